use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    ChannelBias(Var, Var),
    ChannelAdd(Var, Var),
    ChannelMul(Var, Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Group-normalisation parameters (per-channel affine).
#[derive(Debug, Clone, Copy)]
pub struct GroupNormParams {
    pub gamma: Var,
    pub beta: Var,
    pub groups: usize,
}

/// Single-head self-attention over the spatial tokens of an `[N, C, H, W]` map.
///
/// The q/k/v/out projections are 1×1 convolutions (`[C, C, 1, 1]` kernels,
/// `[C]` biases). The optional norm is applied to the q/k/v input only; the
/// residual path carries the raw input.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub norm: Option<GroupNormParams>,
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

const GROUP_NORM_EPS: f64 = 1e-5;

/// Ordered record of executed primitives. Inputs always precede the nodes
/// that consume them, so a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, kept for leaf nodes only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf, or `None` if the leaf does not require grad.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [N,C,H,W], got {shape:?}"))),
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies in `0..w`.
fn valid_cols(w: usize, wo: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &input[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let first = lo * stride + kj - pad;
                    if stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, ix) in out_row[lo..hi].iter_mut().zip((first..).step_by(stride)) {
                            *o = src[ix];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                if lo >= hi {
                    continue;
                }
                let first = lo * stride + kj - pad;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut out[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        add_into(&mut dst[first..first + hi - lo], s);
                    } else {
                        for (v, ix) in s.iter().zip((first..).step_by(stride)) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient accumulator for `v`, or `None` if `v` does not participate.
fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Affine(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Swish(x)
            | Op::Clamp(x, ..)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::GlobalAvgPool(x)
            | Op::Upsample2x(x)
            | Op::SliceChannels { x, .. }
            | Op::Reshape(x)
            | Op::Softmax(x) => vec![*x],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ChannelBias(x, v) | Op::ChannelAdd(x, v) | Op::ChannelMul(x, v) => vec![*x, *v],
            Op::Dense { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(parts) => parts.clone(),
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
        }
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a copy of `t`; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` that never receives a gradient.
    pub fn constant_ref(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            _ => Err(Error::shape("scalar", format!("shape {:?}", self.shape(v)))),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, value, op)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// `x · sigmoid(x)`
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary("swish", x, |v| v * sigmoid(v), Op::Swish(x))
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![m], Op::Mean(x))
    }

    /// Cross-correlation of `[N,C_in,H,W]` with `[C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("conv2d", self.shape(input))?;
        let (co, ci, k, k2) = dims4("conv2d", self.shape(kernel))?;
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {ci}"),
            ));
        }
        if k != k2 {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {k}x{k2}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input with padding {padding} is smaller than kernel {k}"),
            ));
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let ckk = c * k * k;
        let mut col = vec![0.0; ckk * ho * wo];
        let mut out = vec![0.0; n * co * ho * wo];
        {
            let x = &self.node(input).value;
            let kv = &self.node(kernel).value;
            for b in 0..n {
                im2col(&x[b * c * h * w..(b + 1) * c * h * w], c, h, w, k, stride, padding, ho, wo, &mut col);
                gemm(
                    co,
                    ckk,
                    ho * wo,
                    MatRef::new(kv, ckk, false),
                    MatRef::new(&col, ho * wo, false),
                    0.0,
                    &mut out[b * co * ho * wo..(b + 1) * co * ho * wo],
                );
            }
        }
        self.push(
            "conv2d",
            vec![n, co, ho, wo],
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        )
    }

    /// Adds a `[C]` bias to every position of an `[N,C,...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for input {shape:?}", self.shape(bias)),
            ));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = &self.node(bias).value;
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % c])
            .collect();
        self.push("add_channel_bias", shape, value, Op::ChannelBias(x, bias))
    }

    fn check_channel_vec(&self, name: &'static str, x: Var, v: Var) -> Result<(Vec<usize>, usize)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(v) != [shape[0], shape[1]] {
            return Err(Error::shape(
                name,
                format!("per-channel vector {:?} for input {shape:?}", self.shape(v)),
            ));
        }
        let inner = shape[2..].iter().product();
        Ok((shape, inner))
    }

    /// Adds an `[N,C]` vector to an `[N,C,...]` tensor, broadcast over trailing axes.
    pub fn channel_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let (shape, inner) = self.check_channel_vec("channel_add", x, v)?;
        let vv = &self.node(v).value;
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vv[i / inner])
            .collect();
        self.push("channel_add", shape, value, Op::ChannelAdd(x, v))
    }

    /// Multiplies an `[N,C,...]` tensor by an `[N,C]` gate, broadcast over trailing axes.
    pub fn channel_mul(&mut self, x: Var, v: Var) -> Result<Var> {
        let (shape, inner) = self.check_channel_vec("channel_mul", x, v)?;
        let vv = &self.node(v).value;
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &a)| a * vv[i / inner])
            .collect();
        self.push("channel_mul", shape, value, Op::ChannelMul(x, v))
    }

    /// `x · wᵀ + b` for `x: [N,F_in]`, `w: [F_out,F_in]`, `b: [F_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = match *self.shape(x) {
            [n, f] => (n, f),
            ref s => return Err(Error::shape("dense", format!("input must be [N,F], got {s:?}"))),
        };
        let fout = match *self.shape(w) {
            [o, i] if i == fin => o,
            ref s => {
                return Err(Error::shape(
                    "dense",
                    format!("weight {s:?} does not accept {fin} input features"),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("dense", format!("bias {:?}, expected [{fout}]", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * fout];
        if let Some(b) = b {
            let bv = &self.node(b).value;
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            n,
            fin,
            fout,
            MatRef::new(&self.node(x).value, fin, false),
            MatRef::new(&self.node(w).value, fin, true),
            1.0,
            &mut out,
        );
        self.push("dense", vec![n, fout], out, Op::Dense { x, w, b })
    }

    /// Mean over each `H×W` plane: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let value = self
            .value(x)
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push("global_avg_pool", vec![n, c], value, Op::GlobalAvgPool(x))
    }

    pub fn group_norm(&mut self, x: Var, p: GroupNormParams) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("group_norm", format!("input {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if p.groups == 0 || c % p.groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {} groups", p.groups),
            ));
        }
        if self.shape(p.gamma) != [c] || self.shape(p.beta) != [c] {
            return Err(Error::shape("group_norm", "affine parameters must be [C]"));
        }
        let gsize = c / p.groups * inner;
        let xv = &self.node(x).value;
        let gamma = &self.node(p.gamma).value;
        let beta = &self.node(p.beta).value;
        let mut mean = Vec::with_capacity(n * p.groups);
        let mut rstd = Vec::with_capacity(n * p.groups);
        let mut out = vec![0.0; xv.len()];
        for (gi, chunk) in xv.chunks(gsize).enumerate() {
            let m = chunk.iter().sum::<f64>() / gsize as f64;
            let var = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / gsize as f64;
            let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            mean.push(m);
            rstd.push(r);
            let base = gi * gsize;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = ((base + j) / inner) % c;
                out[base + j] = (v - m) * r * gamma[ch] + beta[ch];
            }
        }
        self.push(
            "group_norm",
            shape,
            out,
            Op::GroupNorm {
                x,
                gamma: p.gamma,
                beta: p.beta,
                groups: p.groups,
                mean,
                rstd,
            },
        )
    }

    /// Nearest-neighbour ×2 upsampling of `[N,C,H,W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("upsample_nearest2x", self.shape(x))?;
        let xv = self.value(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push("upsample_nearest2x", vec![n, c, h2, w2], out, Op::Upsample2x(x))
    }

    /// Concatenates `[N,C_i,...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat_channels", format!("input {s0:?}")));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape("concat_channels", format!("{s:?} vs {s0:?}")));
            }
            channels += s[1];
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for p in parts {
                let cp = self.shape(*p)[1] * inner;
                out.extend_from_slice(&self.value(*p)[b * cp..(b + 1) * cp]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        self.push("concat_channels", shape, out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || len == 0 || start + len > shape[1] {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let c = shape[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(shape[0] * len * inner);
        for b in 0..shape[0] {
            out.extend_from_slice(&xv[(b * c + start) * inner..(b * c + start + len) * inner]);
        }
        let mut s = shape;
        s[1] = len;
        self.push("slice_channels", s, out, Op::SliceChannels { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(x))
    }

    /// Batched matrix product of 3-D tensors; `ta`/`tb` transpose the stored
    /// `[B, r, c]` operands before multiplying.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ba, ar, ac) = match *self.shape(a) {
            [x, y, z] => (x, y, z),
            ref s => return Err(Error::shape("bmm", format!("lhs must be 3-D, got {s:?}"))),
        };
        let (bb, br, bc) = match *self.shape(b) {
            [x, y, z] => (x, y, z),
            ref s => return Err(Error::shape("bmm", format!("rhs must be 3-D, got {s:?}"))),
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, nn) = if tb { (bc, br) } else { (br, bc) };
        if ba != bb || k != k2 {
            return Err(Error::shape(
                "bmm",
                format!("{:?}{} x {:?}{}", self.shape(a), if ta { "ᵀ" } else { "" }, self.shape(b), if tb { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; ba * m * nn];
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        for i in 0..ba {
            gemm(
                m,
                k,
                nn,
                MatRef::new(&av[i * ar * ac..(i + 1) * ar * ac], ac, ta),
                MatRef::new(&bv[i * br * bc..(i + 1) * br * bc], bc, tb),
                0.0,
                &mut out[i * m * nn..(i + 1) * m * nn],
            );
        }
        self.push("bmm", vec![ba, m, nn], out, Op::BatchMatMul { a, b, ta, tb })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let l = *shape.last().expect("non-empty shape");
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(l) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push("softmax", shape, out, Op::Softmax(x))
    }

    fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.conv2d(x, w, 1, 0)?;
        self.add_channel_bias(y, b)
    }

    /// Scaled dot-product self-attention over the `H·W` token axis with a
    /// residual connection. Output shape equals input shape.
    pub fn self_attention(&mut self, x: Var, p: &AttentionParams) -> Result<Var> {
        let (n, c, h, w) = dims4("self_attention", self.shape(x))?;
        let l = h * w;
        let src = match p.norm {
            Some(gn) => self.group_norm(x, gn)?,
            None => x,
        };
        let q = self.conv1x1(src, p.q_w, p.q_b)?;
        let k = self.conv1x1(src, p.k_w, p.k_b)?;
        let v = self.conv1x1(src, p.v_w, p.v_b)?;
        let q = self.reshape(q, &[n, c, l])?;
        let k = self.reshape(k, &[n, c, l])?;
        let v = self.reshape(v, &[n, c, l])?;
        // scores[query, key] = q·k / √C
        let scores = self.bmm(q, k, true, false)?;
        let scores = self.scale(scores, 1.0 / (c as f64).sqrt())?;
        let attn = self.softmax_last(scores)?;
        let mixed = self.bmm(v, attn, false, true)?;
        let mixed = self.reshape(mixed, &[n, c, h, w])?;
        let out = self.conv1x1(mixed, p.out_w, p.out_b)?;
        self.add(x, out)
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Returns gradients for every leaf recorded with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Leaf if n.needs_grad => Some(g.unwrap_or_else(|| vec![0.0; n.value.len()])),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$acc:ident| $body:block) => {
                if let Some($acc) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| -> &[f64] { &nodes[v.0].value };
        let shp = |v: Var| -> &[usize] { &nodes[v.0].shape };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |acc| { add_into(acc, g) });
                with_grad!(*b, |acc| { add_into(acc, g) });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |acc| { add_into(acc, g) });
                with_grad!(*b, |acc| {
                    for (d, s) in acc.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                with_grad!(*a, |acc| {
                    for ((d, s), y) in acc.iter_mut().zip(g).zip(val(*b)) {
                        *d += s * y;
                    }
                });
                with_grad!(*b, |acc| {
                    for ((d, s), x) in acc.iter_mut().zip(g).zip(val(*a)) {
                        *d += s * x;
                    }
                });
            }
            Op::Div(a, b) => {
                with_grad!(*a, |acc| {
                    for ((d, s), y) in acc.iter_mut().zip(g).zip(val(*b)) {
                        *d += s / y;
                    }
                });
                with_grad!(*b, |acc| {
                    for (((d, s), x), y) in acc.iter_mut().zip(g).zip(val(*a)).zip(val(*b)) {
                        *d -= s * x / (y * y);
                    }
                });
            }
            Op::Affine(x, scale) => {
                with_grad!(*x, |acc| {
                    for (d, s) in acc.iter_mut().zip(g) {
                        *d += s * scale;
                    }
                });
            }
            Op::Relu(x) => {
                with_grad!(*x, |acc| {
                    for ((d, s), v) in acc.iter_mut().zip(g).zip(val(*x)) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                with_grad!(*x, |acc| {
                    for ((d, s), y) in acc.iter_mut().zip(g).zip(&node.value) {
                        *d += s * y * (1.0 - y);
                    }
                });
            }
            Op::Swish(x) => {
                with_grad!(*x, |acc| {
                    for ((d, s), v) in acc.iter_mut().zip(g).zip(val(*x)) {
                        let sg = sigmoid(*v);
                        *d += s * (sg + v * sg * (1.0 - sg));
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                with_grad!(*x, |acc| {
                    for ((d, s), v) in acc.iter_mut().zip(g).zip(val(*x)) {
                        if *v >= *lo && *v <= *hi {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |acc| {
                    acc.iter_mut().for_each(|d| *d += g[0]);
                });
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                with_grad!(*x, |acc| {
                    acc.iter_mut().for_each(|d| *d += g[0] / n);
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (n, c, h, w) = dims4("conv2d", shp(*input))?;
                let (co, _, k, _) = dims4("conv2d", shp(*kernel))?;
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let ckk = c * k * k;
                let plane = ho * wo;
                let xin = val(*input);
                let kv = val(*kernel);
                let mut col = vec![0.0; ckk * plane];
                let need_k = nodes[kernel.0].needs_grad;
                let need_x = nodes[input.0].needs_grad;
                for b in 0..n {
                    let gout = &g[b * co * plane..(b + 1) * co * plane];
                    if need_k {
                        im2col(&xin[b * c * h * w..(b + 1) * c * h * w], c, h, w, k, *stride, *padding, ho, wo, &mut col);
                        with_grad!(*kernel, |acc| {
                            gemm(co, plane, ckk, MatRef::new(gout, plane, false), MatRef::new(&col, plane, true), 1.0, acc);
                        });
                    }
                    if need_x {
                        gemm(ckk, co, plane, MatRef::new(kv, ckk, true), MatRef::new(gout, plane, false), 0.0, &mut col);
                        with_grad!(*input, |acc| {
                            col2im_add(&col, c, h, w, k, *stride, *padding, ho, wo, &mut acc[b * c * h * w..(b + 1) * c * h * w]);
                        });
                    }
                }
            }
            Op::ChannelBias(x, bias) => {
                with_grad!(*x, |acc| { add_into(acc, g) });
                let c = node.shape[1];
                let inner: usize = node.shape[2..].iter().product();
                with_grad!(*bias, |acc| {
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        acc[i % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::ChannelAdd(x, v) => {
                with_grad!(*x, |acc| { add_into(acc, g) });
                let inner: usize = node.shape[2..].iter().product();
                with_grad!(*v, |acc| {
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        acc[i] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::ChannelMul(x, v) => {
                let inner: usize = node.shape[2..].iter().product();
                let vv = val(*v);
                with_grad!(*x, |acc| {
                    for (i, (d, s)) in acc.iter_mut().zip(g).enumerate() {
                        *d += s * vv[i / inner];
                    }
                });
                let xv = val(*x);
                with_grad!(*v, |acc| {
                    for (i, (gc, xc)) in g.chunks(inner).zip(xv.chunks(inner)).enumerate() {
                        acc[i] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let (n, fin) = (shp(*x)[0], shp(*x)[1]);
                let fout = node.shape[1];
                with_grad!(*x, |acc| {
                    gemm(n, fout, fin, MatRef::new(g, fout, false), MatRef::new(val(*w), fin, false), 1.0, acc);
                });
                with_grad!(*w, |acc| {
                    gemm(fout, n, fin, MatRef::new(g, fout, true), MatRef::new(val(*x), fin, false), 1.0, acc);
                });
                if let Some(b) = b {
                    with_grad!(*b, |acc| {
                        for row in g.chunks(fout) {
                            add_into(acc, row);
                        }
                    });
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = dims4("global_avg_pool", shp(*x))?;
                let hw = h * w;
                with_grad!(*x, |acc| {
                    for (i, d) in acc.iter_mut().enumerate() {
                        *d += g[i / hw] / hw as f64;
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let c = node.shape[1];
                let inner: usize = node.shape[2..].iter().product();
                let gsize = c / groups * inner;
                let xv = val(*x);
                let gm = val(*gamma);
                let ch = |idx: usize| (idx / inner) % c;
                let xhat = |idx: usize| (xv[idx] - mean[idx / gsize]) * rstd[idx / gsize];
                with_grad!(*gamma, |acc| {
                    for (i, s) in g.iter().enumerate() {
                        acc[ch(i)] += s * xhat(i);
                    }
                });
                with_grad!(*beta, |acc| {
                    for (i, s) in g.iter().enumerate() {
                        acc[ch(i)] += s;
                    }
                });
                with_grad!(*x, |acc| {
                    let m = gsize as f64;
                    for gi in 0..mean.len() {
                        let base = gi * gsize;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in base..base + gsize {
                            let d = g[j] * gm[ch(j)];
                            sum_d += d;
                            sum_dx += d * xhat(j);
                        }
                        let r = rstd[gi];
                        for j in base..base + gsize {
                            let d = g[j] * gm[ch(j)];
                            acc[j] += r / m * (m * d - sum_d - xhat(j) * sum_dx);
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let (_, _, h, w) = dims4("upsample_nearest2x", shp(*x))?;
                let (h2, w2) = (2 * h, 2 * w);
                with_grad!(*x, |acc| {
                    for (i, s) in g.iter().enumerate() {
                        let p = i / (h2 * w2);
                        let y = (i / w2) % h2;
                        let xx = i % w2;
                        acc[(p * h + y / 2) * w + xx / 2] += s;
                    }
                });
            }
            Op::Concat(parts) => {
                let n = node.shape[0];
                let inner: usize = node.shape[2..].iter().product();
                let total = node.shape[1] * inner;
                let mut offset = 0;
                for p in parts {
                    let cp = shp(*p)[1] * inner;
                    with_grad!(*p, |acc| {
                        for b in 0..n {
                            add_into(&mut acc[b * cp..(b + 1) * cp], &g[b * total + offset..b * total + offset + cp]);
                        }
                    });
                    offset += cp;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = shp(*x);
                let inner: usize = xs[2..].iter().product();
                let c = xs[1];
                let len = node.shape[1];
                with_grad!(*x, |acc| {
                    for b in 0..xs[0] {
                        add_into(
                            &mut acc[(b * c + start) * inner..(b * c + start + len) * inner],
                            &g[b * len * inner..(b + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |acc| { add_into(acc, g) });
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (bs, ar, ac) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
                let (br, bc) = (shp(*b)[1], shp(*b)[2]);
                let (m, nn) = (node.shape[1], node.shape[2]);
                let k = if *ta { ar } else { ac };
                let (av, bv) = (val(*a), val(*b));
                for i in 0..bs {
                    let gi = &g[i * m * nn..(i + 1) * m * nn];
                    let a_i = &av[i * ar * ac..(i + 1) * ar * ac];
                    let b_i = &bv[i * br * bc..(i + 1) * br * bc];
                    with_grad!(*a, |acc| {
                        let dst = &mut acc[i * ar * ac..(i + 1) * ar * ac];
                        if !*ta {
                            // dA[m,k] = dC[m,n] · op(B)ᵀ
                            gemm(m, nn, k, MatRef::new(gi, nn, false), MatRef::new(b_i, bc, !*tb), 1.0, dst);
                        } else {
                            // dA_stored[k,m] = op(B) · dCᵀ
                            gemm(k, nn, m, MatRef::new(b_i, bc, *tb), MatRef::new(gi, nn, true), 1.0, dst);
                        }
                    });
                    with_grad!(*b, |acc| {
                        let dst = &mut acc[i * br * bc..(i + 1) * br * bc];
                        if !*tb {
                            // dB[k,n] = op(A)ᵀ · dC
                            gemm(k, m, nn, MatRef::new(a_i, ac, !*ta), MatRef::new(gi, nn, false), 1.0, dst);
                        } else {
                            // dB_stored[n,k] = dCᵀ · op(A)
                            gemm(nn, m, k, MatRef::new(gi, nn, true), MatRef::new(a_i, ac, *ta), 1.0, dst);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let l = *node.shape.last().expect("shape");
                with_grad!(*x, |acc| {
                    for ((d, gs), ys) in acc.chunks_mut(l).zip(g.chunks(l)).zip(node.value.chunks(l)) {
                        let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for ((dd, gg), yy) in d.iter_mut().zip(gs).zip(ys) {
                            *dd += yy * (gg - dot);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}
