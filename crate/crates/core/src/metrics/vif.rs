//! Pixel-domain visual information fidelity over a four-scale pyramid.

use super::{filter_valid, planes, same_shape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance of the additive visual-noise model, for 8-bit pixel values.
pub const VIF_NOISE_VAR: f64 = 2.0;

/// Smallest height/width accepted; the coarsest scale is then 4×4.
pub const VIF_MIN_SIZE: usize = 32;

const EPS: f64 = 1e-10;
const SCALES: u32 = 4;

fn gaussian(n: usize, sigma: f64) -> Vec<f64> {
    let r = (n / 2) as f64;
    let g: Vec<f64> = (0..n).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total = g.iter().sum::<f64>().powi(2);
    g.iter().flat_map(|a| g.iter().map(move |b| a * b / total)).collect()
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d`).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Same-size filtering with symmetric boundary extension.
fn filter_same(plane: &[f64], h: usize, w: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let (ph, pw) = (h + k - 1, w + k - 1);
    let mut padded = Vec::with_capacity(ph * pw);
    for i in 0..ph as isize {
        let si = reflect(i - r, h);
        for j in 0..pw as isize {
            padded.push(plane[si * w + reflect(j - r, w)]);
        }
    }
    filter_valid(&padded, ph, pw, kernel, k)
}

fn decimate(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow);
    for i in (0..h).step_by(2) {
        for j in (0..w).step_by(2) {
            out.push(plane[i * w + j]);
        }
    }
    (out, oh, ow)
}

/// `(numerator, denominator)` information sums of one channel.
fn channel_sums(reference: &[f64], distorted: &[f64], h: usize, w: usize) -> (f64, f64) {
    let (mut r, mut d) = (reference.to_vec(), distorted.to_vec());
    let (mut h, mut w) = (h, w);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 0..SCALES {
        let n = (1usize << (SCALES - scale)) + 1;
        let win = gaussian(n, n as f64 / 5.0);
        if scale > 0 {
            let (r2, nh, nw) = decimate(&filter_same(&r, h, w, &win, n), h, w);
            let (d2, _, _) = decimate(&filter_same(&d, h, w, &win, n), h, w);
            (r, d, h, w) = (r2, d2, nh, nw);
        }
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu1 = filter_same(&r, h, w, &win, n);
        let mu2 = filter_same(&d, h, w, &win, n);
        let e11 = filter_same(&sq(&r, &r), h, w, &win, n);
        let e22 = filter_same(&sq(&d, &d), h, w, &win, n);
        let e12 = filter_same(&sq(&r, &d), h, w, &win, n);
        for i in 0..h * w {
            let mut s1 = (e11[i] - mu1[i] * mu1[i]).max(0.0);
            let s2 = (e22[i] - mu2[i] * mu2[i]).max(0.0);
            let s12 = e12[i] - mu1[i] * mu2[i];
            let mut g = s12 / (s1 + EPS);
            let mut sv = s2 - g * s12;
            if s1 < EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            sv = sv.max(EPS);
            num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + s1 / VIF_NOISE_VAR).log10();
        }
    }
    (num, den)
}

/// VIF of `distorted` against `reference`, both on the 8-bit `[0, 255]` scale.
///
/// Asymmetric: the first argument is the reference. Information sums are
/// pooled over scales and channels before taking the ratio. A constant
/// reference carries no information; the value is then 1 for an identical
/// distorted image and 0 otherwise.
pub fn vif(reference: &Tensor, distorted: &Tensor) -> Result<f64> {
    same_shape(reference, distorted)?;
    let (c, h, w) = planes(reference)?;
    if h.min(w) < VIF_MIN_SIZE {
        return Err(Error::shape(
            "vif",
            format!("image {h}x{w} is below the {VIF_MIN_SIZE}x{VIF_MIN_SIZE} minimum of the four-scale pyramid"),
        ));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ch in 0..c {
        let span = ch * h * w..(ch + 1) * h * w;
        let (n, d) = channel_sums(&reference.data()[span.clone()], &distorted.data()[span], h, w);
        num += n;
        den += d;
    }
    if den == 0.0 {
        return Ok(if reference == distorted { 1.0 } else { 0.0 });
    }
    Ok(num / den)
}
