//! Noise-predicting U-Net: residual blocks with γ-embedding injection,
//! four resolution levels, self-attention at the bottom level.

use rand::Rng;

use super::params::{Binding, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{kaiming_init, AttentionParams, GroupNormParams, Tape, Tensor, Var};

/// Largest divisor of `channels` that is at most 8.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = [cout, cin, k, k];
        let w = if zero {
            Tensor::zeros(&shape)
        } else {
            kaiming_init(&shape, cin * k * k, rng)?
        };
        Ok(Conv {
            w: params.add(format!("{name}.weight"), w),
            b: params.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding: k / 2,
        })
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bind.var(self.w), self.stride, self.padding)?;
        tape.add_channel_bias(y, bind.var(self.b))
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        Norm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: group_count(channels),
        }
    }

    fn params(&self, bind: &Binding) -> GroupNormParams {
        GroupNormParams {
            gamma: bind.var(self.gamma),
            beta: bind.var(self.beta),
            groups: self.groups,
        }
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        tape.group_norm(x, self.params(bind))
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(params: &mut ParamSet, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            w: params.add(format!("{name}.weight"), kaiming_init(&[fout, fin], fin, rng)?),
            b: params.add(format!("{name}.bias"), Tensor::zeros(&[fout])),
        })
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        tape.dense(x, bind.var(self.w), Some(bind.var(self.b)))
    }
}

/// conv → norm → (+γ embedding) → swish → conv → norm → swish, plus skip.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    emb: Linear,
    conv2: Conv,
    norm2: Norm,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(params: &mut ParamSet, name: &str, cin: usize, cout: usize, emb_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv::new(params, &format!("{name}.conv1"), cin, cout, 3, 1, false, rng)?,
            norm1: Norm::new(params, &format!("{name}.norm1"), cout),
            emb: Linear::new(params, &format!("{name}.emb"), emb_dim, cout, rng)?,
            conv2: Conv::new(params, &format!("{name}.conv2"), cout, cout, 3, 1, false, rng)?,
            norm2: Norm::new(params, &format!("{name}.norm2"), cout),
            skip: if cin != cout {
                Some(Conv::new(params, &format!("{name}.skip"), cin, cout, 1, 1, false, rng)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var, emb: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, bind, x)?;
        let h = self.norm1.forward(tape, bind, h)?;
        let e = self.emb.forward(tape, bind, emb)?;
        let h = tape.channel_add(h, e)?;
        let h = tape.swish(h)?;
        let h = self.conv2.forward(tape, bind, h)?;
        let h = self.norm2.forward(tape, bind, h)?;
        let h = tape.swish(h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(tape, bind, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    out: Conv,
}

impl Attention {
    fn new(params: &mut ParamSet, name: &str, c: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Attention {
            norm: Norm::new(params, &format!("{name}.norm"), c),
            q: Conv::new(params, &format!("{name}.q"), c, c, 1, 1, false, rng)?,
            k: Conv::new(params, &format!("{name}.k"), c, c, 1, 1, false, rng)?,
            v: Conv::new(params, &format!("{name}.v"), c, c, 1, 1, false, rng)?,
            out: Conv::new(params, &format!("{name}.out"), c, c, 1, 1, false, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        tape.self_attention(
            x,
            &AttentionParams {
                norm: Some(self.norm.params(bind)),
                q_w: bind.var(self.q.w),
                q_b: bind.var(self.q.b),
                k_w: bind.var(self.k.w),
                k_b: bind.var(self.k.b),
                v_w: bind.var(self.v.w),
                v_b: bind.var(self.v.b),
                out_w: bind.var(self.out.w),
                out_b: bind.var(self.out.b),
            },
        )
    }
}

/// Multiplier applied to γ before the sinusoidal embedding, so that the
/// closely spaced γ values of neighbouring steps map to distinct phases.
pub const GAMMA_EMBED_SCALE: f64 = 1000.0;

/// Sinusoidal embedding of `GAMMA_EMBED_SCALE · γ` into `dim` features.
pub fn gamma_embedding(gammas: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(gammas.len() * dim);
    for &g in gammas {
        let v = g * GAMMA_EMBED_SCALE;
        let freqs = (0..half).map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((v * f).sin(), (v * f).cos())).unzip();
        data.extend(sin);
        data.extend(cos);
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::new(&[gammas.len(), dim], data).expect("embedding shape")
}

/// The U-Net body of the denoiser.
#[derive(Debug, Clone)]
pub struct UNet {
    widths: Vec<usize>,
    emb_dim: usize,
    emb1: Linear,
    emb2: Linear,
    stem: Conv,
    down_blocks: Vec<ResBlock>,
    downsamples: Vec<Conv>,
    mid1: ResBlock,
    mid_attn: Attention,
    mid2: ResBlock,
    up_blocks: Vec<ResBlock>,
    upsamples: Vec<Conv>,
    head: Conv,
}

impl UNet {
    pub fn new(params: &mut ParamSet, in_channels: usize, out_channels: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid channel widths {widths:?}")));
        }
        let levels = widths.len();
        let emb_dim = widths[0].max(2);
        let emb1 = Linear::new(params, "gamma_mlp.0", emb_dim, 4 * emb_dim, rng)?;
        let emb2 = Linear::new(params, "gamma_mlp.1", 4 * emb_dim, emb_dim, rng)?;
        let stem = Conv::new(params, "stem", in_channels, widths[0], 3, 1, false, rng)?;

        let mut down_blocks = Vec::with_capacity(levels);
        let mut downsamples = Vec::with_capacity(levels - 1);
        let mut ch = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            down_blocks.push(ResBlock::new(params, &format!("down.{i}.res"), ch, w, emb_dim, rng)?);
            ch = w;
            if i + 1 < levels {
                downsamples.push(Conv::new(params, &format!("down.{i}.downsample"), w, w, 3, 2, false, rng)?);
            }
        }
        let bottom = widths[levels - 1];
        let mid1 = ResBlock::new(params, "mid.res1", bottom, bottom, emb_dim, rng)?;
        let mid_attn = Attention::new(params, "mid.attn", bottom, rng)?;
        let mid2 = ResBlock::new(params, "mid.res2", bottom, bottom, emb_dim, rng)?;

        let mut up_blocks = Vec::with_capacity(levels);
        let mut upsamples = Vec::with_capacity(levels - 1);
        for i in (0..levels).rev() {
            let w = widths[i];
            up_blocks.push(ResBlock::new(params, &format!("up.{i}.res"), ch + w, w, emb_dim, rng)?);
            ch = w;
            if i > 0 {
                upsamples.push(Conv::new(params, &format!("up.{i}.upsample"), w, w, 3, 1, false, rng)?);
            }
        }
        let head = Conv::new(params, "head", widths[0], out_channels, 3, 1, true, rng)?;
        Ok(UNet {
            widths: widths.to_vec(),
            emb_dim,
            emb1,
            emb2,
            stem,
            down_blocks,
            downsamples,
            mid1,
            mid_attn,
            mid2,
            up_blocks,
            upsamples,
            head,
        })
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub(crate) fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var, gammas: &[f64]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let m = self.size_multiple();
        if shape.len() != 4 || !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(Error::shape(
                "unet",
                format!("spatial size must be a multiple of {m} for {} levels, got {shape:?}", self.widths.len()),
            ));
        }
        if gammas.len() != shape[0] {
            return Err(Error::shape("unet", format!("{} noise levels for batch of {}", gammas.len(), shape[0])));
        }
        let e = tape.constant(gamma_embedding(gammas, self.emb_dim));
        let e = self.emb1.forward(tape, bind, e)?;
        let e = tape.swish(e)?;
        let emb = self.emb2.forward(tape, bind, e)?;

        let mut h = self.stem.forward(tape, bind, x)?;
        let mut skips = Vec::with_capacity(self.down_blocks.len());
        for (i, block) in self.down_blocks.iter().enumerate() {
            h = block.forward(tape, bind, h, emb)?;
            skips.push(h);
            if let Some(ds) = self.downsamples.get(i) {
                h = ds.forward(tape, bind, h)?;
            }
        }
        h = self.mid1.forward(tape, bind, h, emb)?;
        h = self.mid_attn.forward(tape, bind, h)?;
        h = self.mid2.forward(tape, bind, h, emb)?;
        for (j, block) in self.up_blocks.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            let cat = tape.concat_channels(&[h, skip])?;
            h = block.forward(tape, bind, cat, emb)?;
            if let Some(us) = self.upsamples.get(j) {
                let up = tape.upsample_nearest2x(h)?;
                h = us.forward(tape, bind, up)?;
            }
        }
        self.head.forward(tape, bind, h)
    }
}
