//! Full-reference image quality metrics and result-set evaluation.
//!
//! Images are `[C,H,W]` (or `[H,W]`) tensors. Channel-wise metrics average
//! over channels; pixel metrics average over every element.

mod report;
mod vif;

pub use report::{evaluate_set, EvalOptions, ImageRecord, MetricsReport, REPORT_SCHEMA_VERSION, TABLE_COLUMNS};
pub use vif::{vif, VIF_MIN_SIZE, VIF_NOISE_VAR};

use crate::error::{Error, Result};
use crate::objectives::{SsimWindow, SSIM_K1, SSIM_K2};
use crate::tensor::Tensor;

/// Pixel range of 8-bit images.
pub const DEFAULT_RANGE: f64 = 255.0;

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        ref s => Err(Error::shape("metrics", format!("expected [C,H,W] or [H,W], got {s:?}"))),
    }
}

fn same_shape(p: &Tensor, t: &Tensor) -> Result<()> {
    if p.shape() != t.shape() {
        return Err(Error::shape("metrics", format!("{:?} vs {:?}", p.shape(), t.shape())));
    }
    Ok(())
}

/// Average gradient: per channel, the mean over `(H−1)(W−1)` positions of
/// `√((Gx² + Gy²)/2)` with forward differences, then averaged over channels.
pub fn ag(img: &Tensor) -> Result<f64> {
    let (c, h, w) = planes(img)?;
    if h < 2 || w < 2 {
        return Err(Error::shape("ag", format!("needs H, W >= 2, got {h}x{w}")));
    }
    let d = img.data();
    let mut total = 0.0;
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                let v = p[i * w + j];
                let gx = p[i * w + j + 1] - v;
                let gy = p[(i + 1) * w + j] - v;
                acc += ((gx * gx + gy * gy) / 2.0).sqrt();
            }
        }
        total += acc / ((h - 1) * (w - 1)) as f64;
    }
    Ok(total / c as f64)
}

pub fn mse(p: &Tensor, t: &Tensor) -> Result<f64> {
    same_shape(p, t)?;
    Ok(p.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.numel() as f64)
}

pub fn mae(p: &Tensor, t: &Tensor) -> Result<f64> {
    same_shape(p, t)?;
    Ok(p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.numel() as f64)
}

pub fn rmse(p: &Tensor, t: &Tensor) -> Result<f64> {
    Ok(mse(p, t)?.sqrt())
}

/// `10·log10(range² / mse)` from a precomputed MSE; `+∞` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; identical images give `+∞`.
pub fn psnr(p: &Tensor, t: &Tensor, range: f64) -> Result<f64> {
    if !(range > 0.0) {
        return Err(Error::InvalidArgument(format!("PSNR range must be > 0, got {range}")));
    }
    Ok(psnr_from_mse(mse(p, t)?, range))
}

/// Valid-mode 2-D correlation of one plane with a square kernel.
pub(crate) fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for a in 0..k {
                let row = &plane[(i + a) * w + j..(i + a) * w + j + k];
                for (x, kv) in row.iter().zip(&kernel[a * k..(a + 1) * k]) {
                    acc += x * kv;
                }
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over valid windows
/// and channels. Same definition as the training-loss SSIM.
pub fn ssim_metric(p: &Tensor, t: &Tensor, range: f64) -> Result<f64> {
    ssim_with_window(p, t, range, SsimWindow::default())
}

pub fn ssim_with_window(p: &Tensor, t: &Tensor, range: f64, window: SsimWindow) -> Result<f64> {
    same_shape(p, t)?;
    if !(range > 0.0) {
        return Err(Error::InvalidArgument(format!("SSIM dynamic range must be > 0, got {range}")));
    }
    let (c, h, w) = planes(p)?;
    let k = window.size;
    if h < k || w < k {
        return Err(Error::shape("ssim", format!("image {h}x{w} is smaller than the {k}x{k} window")));
    }
    let kernel = window.kernel();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let a = &p.data()[ch * h * w..(ch + 1) * h * w];
        let b = &t.data()[ch * h * w..(ch + 1) * h * w];
        let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
        let mu_a = filter_valid(a, h, w, &kernel, k);
        let mu_b = filter_valid(b, h, w, &kernel, k);
        let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &kernel, k);
        let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &kernel, k);
        let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &kernel, k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let (maa, mbb, mab) = (ma * ma, mb * mb, ma * mb);
            let va = e_aa[i] - maa;
            let vb = e_bb[i] - mbb;
            let cov = e_ab[i] - mab;
            total += ((2.0 * mab + c1) * (2.0 * cov + c2)) / ((maa + mbb + c1) * (va + vb + c2));
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ssim_index;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ag_examples() {
        assert_eq!(ag(&Tensor::full(&[3, 5, 6], 0.4)).unwrap(), 0.0);
        let ramp = Tensor::from_fn(&[1, 6, 7], |i| (i % 7) as f64);
        assert!((ag(&ramp).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        let img = Tensor::randn(&[2, 8, 8], &mut rng(1));
        let shifted = img.map(|v| v + 3.5);
        assert!((ag(&img).unwrap() - ag(&shifted).unwrap()).abs() < 1e-12);
        assert!(ag(&Tensor::zeros(&[1, 1, 5])).is_err());
    }

    #[test]
    fn pixel_metric_examples() {
        let p = Tensor::randn(&[3, 4, 4], &mut rng(2));
        assert_eq!(mse(&p, &p).unwrap(), 0.0);
        assert_eq!(mae(&p, &p).unwrap(), 0.0);
        assert_eq!(rmse(&p, &p).unwrap(), 0.0);
        assert_eq!(psnr(&p, &p, 255.0).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let q = p.map(|v| v + 0.1);
        assert!((psnr(&p, &q, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(mse(&p, &Tensor::zeros(&[3, 4, 5])).is_err());
        assert!(psnr(&p, &q, 0.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let p = Tensor::randn(&[3, 16, 16], &mut rng(3));
        assert!((ssim_metric(&p, &p, 255.0).unwrap() - 1.0).abs() < 1e-9);
        let v = ssim_metric(&Tensor::zeros(&[1, 12, 12]), &Tensor::full(&[1, 12, 12], 1.0), 1.0).unwrap();
        assert!((v - 1e-4 / (1.0 + 1e-4)).abs() < 1e-12);
        assert!(ssim_metric(&Tensor::zeros(&[1, 10, 12]), &Tensor::zeros(&[1, 10, 12]), 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn metric_and_loss_ssim_agree(seed in any::<u64>(), range in 0.5f64..300.0) {
            let mut r = rng(seed);
            let p = Tensor::randn(&[2, 13, 14], &mut r).map(|v| v * range / 4.0);
            let t = Tensor::randn(&[2, 13, 14], &mut r).map(|v| v * range / 4.0);
            let mut tape = Tape::new();
            let (a, b) = (tape.constant_ref(&p), tape.constant_ref(&t));
            let s = ssim_index(&mut tape, a, b, SsimWindow::default(), range).unwrap();
            let loss_mode = tape.scalar(s).unwrap();
            prop_assert!((loss_mode - ssim_metric(&p, &t, range).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn mae_never_exceeds_rmse(seed in any::<u64>()) {
            let mut r = rng(seed);
            let p = Tensor::randn(&[1, 5, 7], &mut r);
            let t = Tensor::randn(&[1, 5, 7], &mut r);
            prop_assert!(mae(&p, &t).unwrap() <= rmse(&p, &t).unwrap() + 1e-15);
        }

        #[test]
        fn identity_values_on_random_shapes(seed in any::<u64>(), c in 1usize..4, h in 11usize..20, w in 11usize..20) {
            let p = Tensor::randn(&[c, h, w], &mut rng(seed)).map(|v| 128.0 + 40.0 * v);
            prop_assert!((ssim_metric(&p, &p, 255.0).unwrap() - 1.0).abs() <= 1e-9);
            prop_assert_eq!(ag(&Tensor::full(&[c, h, w], 7.0)).unwrap(), 0.0);
        }
    }
}
