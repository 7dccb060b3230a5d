//! Bicubic (Catmull-Rom, a = −0.5) resampling with half-pixel centres and
//! edge-clamped borders.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Weights of the four taps around a sample at fractional offset `t ∈ [0, 1)`
/// past the second tap.
pub fn cubic_weights(t: f64) -> [f64; 4] {
    [cubic(1.0 + t), cubic(t), cubic(1.0 - t), cubic(2.0 - t)]
}

/// Per-output-coordinate source taps and weights along one axis.
fn axis_taps(input: usize, output: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let weights = cubic_weights(src - base);
            let clamp = |i: f64| i.clamp(0.0, (input - 1) as f64) as usize;
            let idx = [clamp(base - 1.0), clamp(base), clamp(base + 1.0), clamp(base + 2.0)];
            (idx, weights)
        })
        .collect()
}

/// Resamples every `H×W` plane of `img` (`[.., H, W]`) to `out_h × out_w`.
/// Output values are clamped to `[0, 1]`.
pub fn bicubic_resample(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = img.shape();
    if shape.len() < 2 {
        return Err(Error::shape("bicubic_resample", format!("need [.., H, W], got {shape:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("bicubic_resample output size must be >= 1".into()));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = img.numel() / (h * w);
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut tmp = vec![0.0; h * out_w];
    for plane in img.data().chunks(h * w) {
        // horizontal pass
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, (idx, wt)) in cols.iter().enumerate() {
                tmp[y * out_w + x] = (0..4).map(|k| wt[k] * row[idx[k]]).sum();
            }
        }
        // vertical pass
        for (idx, wt) in &rows {
            for x in 0..out_w {
                let v: f64 = (0..4).map(|k| wt[k] * tmp[idx[k] * out_w + x]).sum();
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = out_h;
    out_shape[n - 1] = out_w;
    debug_assert_eq!(planes * out_h * out_w, out.len());
    Tensor::new(&out_shape, out)
}
