//! Pixel and structural losses, and the combined training loss.

use rand::Rng;

use crate::diffusion::{draw_noise, noise_objective, predict_x0_on, NoiseDraw, NoiseSchedule, TapeDenoiser, TrainingBatch};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Dynamic range of `[-1, 1]` latents, used for SSIM inside the loss.
pub const LATENT_RANGE: f64 = 2.0;

/// Gaussian window used for the local SSIM statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
}

impl Default for SsimWindow {
    fn default() -> Self {
        SsimWindow { size: 11, sigma: 1.5 }
    }
}

impl SsimWindow {
    /// Normalised `size × size` Gaussian kernel, row-major.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.size / 2) as f64;
        let g: Vec<f64> = (0..self.size)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = g.iter().sum::<f64>().powi(2);
        g.iter().flat_map(|a| g.iter().map(move |b| a * b / total)).collect()
    }
}

/// Weights of the joint pixel/structure loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub psf_enabled: bool,
    /// Multiplier on the noise-prediction term.
    pub noise_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 0.5,
            psf_enabled: true,
            noise_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, psf_enabled: bool) -> Result<Self> {
        let w = LossWeights {
            lambda1,
            lambda2,
            psf_enabled,
            noise_weight: 1.0,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside (0, 1]")));
            }
        }
        if !(self.noise_weight.is_finite() && self.noise_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise_weight = {} must be finite and >= 0", self.noise_weight)));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, tape: &Tape, p: Var, t: Var) -> Result<()> {
    if tape.shape(p) != tape.shape(t) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(p), tape.shape(t))));
    }
    Ok(())
}

/// Mean of squared differences.
pub fn mse_loss(tape: &mut Tape, p: Var, t: Var) -> Result<Var> {
    check_pair("mse_loss", tape, p, t)?;
    let d = tape.sub(p, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Mean SSIM over all valid window positions of every plane.
///
/// Accepts `[H,W]`, `[C,H,W]` or `[N,C,H,W]`; each trailing `H×W` plane is
/// treated independently.
pub fn ssim_index(tape: &mut Tape, p: Var, t: Var, window: SsimWindow, range: f64) -> Result<Var> {
    check_pair("ssim_index", tape, p, t)?;
    if !(range > 0.0) {
        return Err(Error::InvalidArgument(format!("SSIM dynamic range must be > 0, got {range}")));
    }
    let shape = tape.shape(p).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("ssim_index", format!("need at least [H,W], got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < window.size || w < window.size {
        return Err(Error::shape(
            "ssim_index",
            format!("image {h}x{w} is smaller than the {0}x{0} window", window.size),
        ));
    }
    let planes = shape[..shape.len() - 2].iter().product::<usize>();
    let planar = [planes, 1, h, w];
    let p = tape.reshape(p, &planar)?;
    let t = tape.reshape(t, &planar)?;
    let k = tape.constant(Tensor::new(&[1, 1, window.size, window.size], window.kernel())?);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);

    let mu_p = tape.conv2d(p, k, 1, 0)?;
    let mu_t = tape.conv2d(t, k, 1, 0)?;
    let pp = tape.mul(p, p)?;
    let tt = tape.mul(t, t)?;
    let pt = tape.mul(p, t)?;
    let e_pp = tape.conv2d(pp, k, 1, 0)?;
    let e_tt = tape.conv2d(tt, k, 1, 0)?;
    let e_pt = tape.conv2d(pt, k, 1, 0)?;

    let mu_pp = tape.mul(mu_p, mu_p)?;
    let mu_tt = tape.mul(mu_t, mu_t)?;
    let mu_pt = tape.mul(mu_p, mu_t)?;
    let var_p = tape.sub(e_pp, mu_pp)?;
    let var_t = tape.sub(e_tt, mu_tt)?;
    let cov = tape.sub(e_pt, mu_pt)?;

    let lum_num = tape.affine(mu_pt, 2.0, c1)?;
    let cs_num = tape.affine(cov, 2.0, c2)?;
    let mu_sum = tape.add(mu_pp, mu_tt)?;
    let lum_den = tape.affine(mu_sum, 1.0, c1)?;
    let var_sum = tape.add(var_p, var_t)?;
    let cs_den = tape.affine(var_sum, 1.0, c2)?;
    let num = tape.mul(lum_num, cs_num)?;
    let den = tape.mul(lum_den, cs_den)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// `λ1 · MSE + λ2 · (1 − SSIM)`.
pub fn psf_loss(tape: &mut Tape, p: Var, t: Var, w: &LossWeights, window: SsimWindow, range: f64) -> Result<Var> {
    let mse = mse_loss(tape, p, t)?;
    let ssim = ssim_index(tape, p, t, window, range)?;
    let a = tape.scale(mse, w.lambda1)?;
    let dissim = tape.affine(ssim, -w.lambda2, w.lambda2)?;
    tape.add(a, dissim)
}

/// Tape handles of one training-loss evaluation.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub noise: Var,
    pub psf: Option<Var>,
    pub draw: NoiseDraw,
}

/// Noise-prediction term plus, when enabled, the PSF loss on the clean-image
/// estimate, both using one shared `(t, ε)` draw.
pub fn training_loss(
    tape: &mut Tape,
    denoiser: &dyn TapeDenoiser,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
    w: &LossWeights,
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    let draw = draw_noise(batch.target.shape(), sched, rng);
    training_loss_with(tape, denoiser, batch, w, SsimWindow::default(), draw)
}

/// [`training_loss`] for an explicit draw and SSIM window.
pub fn training_loss_with(
    tape: &mut Tape,
    denoiser: &dyn TapeDenoiser,
    batch: &TrainingBatch,
    w: &LossWeights,
    window: SsimWindow,
    draw: NoiseDraw,
) -> Result<LossTerms> {
    let term = noise_objective(tape, denoiser, batch, &draw)?;
    let noise = if w.noise_weight == 1.0 {
        term.loss
    } else {
        tape.scale(term.loss, w.noise_weight)?
    };
    if !w.psf_enabled {
        return Ok(LossTerms {
            total: noise,
            noise: term.loss,
            psf: None,
            draw,
        });
    }
    let x0_hat = predict_x0_on(tape, term.latent, term.eps_hat, &draw.gammas)?;
    let target = tape.constant_ref(&batch.target);
    let psf = psf_loss(tape, x0_hat, target, w, window, LATENT_RANGE)?;
    let total = tape.add(noise, psf)?;
    Ok(LossTerms {
        total,
        noise: term.loss,
        psf: Some(psf),
        draw,
    })
}
