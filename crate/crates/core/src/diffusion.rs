//! Forward corruption, reverse sampling and the noise-prediction objective.
//!
//! Step indices run `1..=T`; `gamma(0)` is the clean-signal convention `1`.
//! Latents live in `[-1, 1]`, images handed back to callers in `[0, 1]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::pipeline::resample::bicubic_resample;
use crate::tensor::{Tape, Tensor, Var};

/// Scale factors accepted by [`sample_fusion`] unless the caller overrides them.
pub const DEFAULT_SCALES: [usize; 3] = [2, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

/// The β / α / γ sequences of the forward Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    // gammas[t] for t in 0..=T, gammas[0] = 1
    gammas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        let mut gammas = Vec::with_capacity(betas.len() + 1);
        gammas.push(1.0);
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidArgument(format!("beta_{} = {b} outside (0, 1)", i + 1)));
            }
            let prev = gammas[i];
            let next = prev * (1.0 - b);
            if !(next > 0.0 && next < prev) {
                return Err(Error::InvalidArgument(format!(
                    "gamma is not strictly decreasing at step {} (beta = {b})",
                    i + 1
                )));
            }
            gammas.push(next);
        }
        Ok(NoiseSchedule { betas, gammas })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gammas[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `γ_0..=γ_T`
    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// Variance of the reverse-step noise, `β_t (1 − γ_{t−1}) / (1 − γ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.gamma(t - 1)) / (1.0 - self.gamma(t))
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `√γ · x0 + √(1 − γ) · eps` for an explicit `γ ∈ [0, 1]`.
pub fn q_sample_gamma(x0: &Tensor, gamma: f64, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    let (a, b) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape(), data)
}

pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    q_sample_gamma(x0, sched.gamma(t), eps)
}

/// Inverse of [`q_sample_gamma`] given a noise estimate, without clamping.
pub fn predict_x0_unclamped(latent: &Tensor, eps_hat: &Tensor, gamma: f64) -> Result<Tensor> {
    if latent.shape() != eps_hat.shape() {
        return Err(Error::shape("predict_x0", format!("{:?} vs {:?}", latent.shape(), eps_hat.shape())));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("predict_x0 needs gamma in (0, 1], got {gamma}")));
    }
    let (a, b) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    let data = latent
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| (x - b * e) / a)
        .collect();
    Tensor::new(latent.shape(), data)
}

/// Clean-image estimate `(I_t − √(1−γ)·ε̂)/√γ`, clamped to `[-1, 1]`.
pub fn predict_x0(latent: &Tensor, eps_hat: &Tensor, gamma: f64) -> Result<Tensor> {
    Ok(predict_x0_unclamped(latent, eps_hat, gamma)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// Tape version of [`predict_x0`] with per-sample `γ` over the leading axis.
pub fn predict_x0_on(tape: &mut Tape, latent: Var, eps_hat: Var, gammas: &[f64]) -> Result<Var> {
    let shape = tape.shape(latent).to_vec();
    if shape.first() != Some(&gammas.len()) {
        return Err(Error::shape("predict_x0", format!("{} gammas for batch {shape:?}", gammas.len())));
    }
    if gammas.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
        return Err(Error::InvalidArgument("predict_x0 needs gamma in (0, 1]".into()));
    }
    let inner: usize = shape[1..].iter().product();
    let coeff = |f: &dyn Fn(f64) -> f64| {
        Tensor::from_fn(&shape, |i| f(gammas[i / inner]))
    };
    let inv_sqrt = tape.constant(coeff(&|g| 1.0 / g.sqrt()));
    let noise_coeff = tape.constant(coeff(&|g| (1.0 - g).sqrt() / g.sqrt()));
    let a = tape.mul(latent, inv_sqrt)?;
    let b = tape.mul(eps_hat, noise_coeff)?;
    let x0 = tape.sub(a, b)?;
    tape.clamp(x0, -1.0, 1.0)
}

/// Tensor-level denoiser used by the reverse chain.
pub trait Denoiser {
    /// Conditioning features `z` from the upsampled `[N,3,H,W]` modality stack.
    fn condition(&self, modalities: &Tensor) -> Result<Tensor>;

    /// Predicted noise for an `[N,3,H,W]` latent with one `γ` per sample.
    fn predict_noise(&self, cond: &Tensor, latent: &Tensor, gammas: &[f64]) -> Result<Tensor>;
}

/// Differentiable denoiser recorded on a tape, used by the training objectives.
pub trait TapeDenoiser {
    fn condition(&self, tape: &mut Tape, modalities: Var) -> Result<Var>;

    fn predict_noise(&self, tape: &mut Tape, cond: Var, latent: Var, gammas: &[f64]) -> Result<Var>;
}

/// One point of the reverse chain.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    /// `[N,3,H,W]` latent at step `t`.
    pub latent: Tensor,
    pub t: usize,
    /// Conditioning features, same spatial size as the latent.
    pub cond: Tensor,
}

/// One ancestral step `t → t−1`. `noise` is the `n ∼ N(0, I)` draw; it is
/// ignored at `t = 1`.
pub fn p_sample_step_with_noise(
    state: &DiffusionState,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<DiffusionState> {
    let t = state.t;
    if t == 0 {
        return Err(Error::InvalidArgument("cannot step below t = 0".into()));
    }
    sched.check_step(t)?;
    let batch = state.latent.shape()[0];
    let gamma = sched.gamma(t);
    let eps_hat = denoiser.predict_noise(&state.cond, &state.latent, &vec![gamma; batch])?;
    if eps_hat.shape() != state.latent.shape() {
        return Err(Error::shape("p_sample_step", format!("denoiser returned {:?}", eps_hat.shape())));
    }
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coeff = sched.beta(t) / (1.0 - gamma).sqrt();
    let sigma = sched.posterior_variance(t).sqrt();
    let mut next: Vec<f64> = state
        .latent
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| inv_sqrt_alpha * (x - eps_coeff * e))
        .collect();
    if t > 1 {
        let n = noise.ok_or_else(|| Error::InvalidArgument("reverse step t > 1 needs a noise draw".into()))?;
        if n.shape() != state.latent.shape() {
            return Err(Error::shape("p_sample_step", format!("noise {:?}", n.shape())));
        }
        for (v, z) in next.iter_mut().zip(n.data()) {
            *v += sigma * z;
        }
    }
    Ok(DiffusionState {
        latent: Tensor::new(state.latent.shape(), next)?,
        t: t - 1,
        cond: state.cond.clone(),
    })
}

pub fn p_sample_step(
    state: &DiffusionState,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<DiffusionState> {
    let noise = (state.t > 1).then(|| Tensor::randn(state.latent.shape(), rng));
    p_sample_step_with_noise(state, denoiser, sched, noise.as_ref())
}

/// Fuses three low-resolution `[1,h,w]` modality images into a `[3, h·s, w·s]`
/// image in `[0, 1]` by running the full reverse chain.
#[allow(clippy::too_many_arguments)]
pub fn sample_fusion(
    x: &Tensor,
    y: &Tensor,
    s: &Tensor,
    scale: usize,
    allowed_scales: &[usize],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    sample_fusion_with(x, y, s, scale, allowed_scales, denoiser, sched, rng, |_| {})
}

/// [`sample_fusion`] with a callback invoked after every reverse step.
#[allow(clippy::too_many_arguments)]
pub fn sample_fusion_with(
    x: &Tensor,
    y: &Tensor,
    s: &Tensor,
    scale: usize,
    allowed_scales: &[usize],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(usize),
) -> Result<Tensor> {
    if !allowed_scales.contains(&scale) {
        return Err(Error::InvalidArgument(format!(
            "scale factor {scale} not in {allowed_scales:?}"
        )));
    }
    let modalities = upsample_modalities(x, y, s, scale)?;
    let (h, w) = (modalities.shape()[2], modalities.shape()[3]);
    let cond = denoiser.condition(&modalities)?;
    let mut state = DiffusionState {
        latent: Tensor::randn(&[1, 3, h, w], rng),
        t: sched.steps(),
        cond,
    };
    while state.t > 0 {
        state = p_sample_step(&state, denoiser, sched, rng)?;
        on_step(state.t + 1);
    }
    state
        .latent
        .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
        .reshape(&[3, h, w])
}

/// Bicubically upsamples `[1,h,w]` images by `scale` and stacks them as `[1,3,H,W]`
/// in `(x, y, s)` order.
pub fn upsample_modalities(x: &Tensor, y: &Tensor, s: &Tensor, scale: usize) -> Result<Tensor> {
    let (h, w) = plane_dims(x)?;
    for other in [y, s] {
        if plane_dims(other)? != (h, w) {
            return Err(Error::shape(
                "upsample_modalities",
                format!("modalities differ: {:?} vs {:?}", x.shape(), other.shape()),
            ));
        }
    }
    let up: Vec<Tensor> = [x, y, s]
        .iter()
        .map(|m| bicubic_resample(m, h * scale, w * scale))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(3 * h * w * scale * scale);
    for u in &up {
        data.extend_from_slice(u.data());
    }
    Tensor::new(&[1, 3, h * scale, w * scale], data)
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [1, h, w] | [h, w] => Ok((h, w)),
        ref s => Err(Error::shape("modality", format!("expected [1,H,W], got {s:?}"))),
    }
}

/// Conditioning inputs and clean targets for one optimisation step.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// Upsampled modality stacks, `[N,3,H,W]` in `[0, 1]`.
    pub modalities: Tensor,
    /// Ground-truth fusions mapped to `[-1, 1]`, `[N,3,H,W]`.
    pub target: Tensor,
}

/// Timesteps and Gaussian noise for one batch, shared by every loss term.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub gammas: Vec<f64>,
    pub eps: Tensor,
}

/// Draws `t ∼ U{1..T}` per sample, then `ε ∼ N(0, I)` for the whole batch.
pub fn draw_noise(shape: &[usize], sched: &NoiseSchedule, rng: &mut impl Rng) -> NoiseDraw {
    let steps: Vec<usize> = (0..shape[0]).map(|_| rng.gen_range(1..=sched.steps())).collect();
    let gammas = steps.iter().map(|&t| sched.gamma(t)).collect();
    NoiseDraw {
        steps,
        gammas,
        eps: Tensor::randn(shape, rng),
    }
}

/// Tape values of the noise-prediction term for a given draw.
#[derive(Debug, Clone, Copy)]
pub struct NoiseTerm {
    pub loss: Var,
    pub latent: Var,
    pub eps_hat: Var,
}

/// `mean ‖ε − ε_θ(z, I_t, γ_t)‖²` for a fixed draw.
pub fn noise_objective(
    tape: &mut Tape,
    denoiser: &dyn TapeDenoiser,
    batch: &TrainingBatch,
    draw: &NoiseDraw,
) -> Result<NoiseTerm> {
    if batch.modalities.shape()[0] != batch.target.shape()[0] || batch.target.shape() != draw.eps.shape() {
        return Err(Error::shape(
            "tfs_objective",
            format!(
                "modalities {:?}, target {:?}, noise {:?}",
                batch.modalities.shape(),
                batch.target.shape(),
                draw.eps.shape()
            ),
        ));
    }
    let inner: usize = batch.target.shape()[1..].iter().product();
    let latent = Tensor::new(
        batch.target.shape(),
        batch
            .target
            .data()
            .iter()
            .zip(draw.eps.data())
            .enumerate()
            .map(|(i, (x, e))| {
                let g = draw.gammas[i / inner];
                g.sqrt() * x + (1.0 - g).sqrt() * e
            })
            .collect(),
    )?;
    let modalities = tape.constant(batch.modalities.clone());
    let latent = tape.constant(latent);
    let eps = tape.constant(draw.eps.clone());
    let cond = denoiser.condition(tape, modalities)?;
    let eps_hat = denoiser.predict_noise(tape, cond, latent, &draw.gammas)?;
    let diff = tape.sub(eps, eps_hat)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq)?;
    Ok(NoiseTerm { loss, latent, eps_hat })
}

/// The noise-prediction objective with a fresh `(t, ε)` draw from `rng`.
pub fn tfs_objective(
    tape: &mut Tape,
    denoiser: &dyn TapeDenoiser,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Var> {
    let draw = draw_noise(batch.target.shape(), sched, rng);
    Ok(noise_objective(tape, denoiser, batch, &draw)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.gamma(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.gamma(0), 1.0);
        let s = NoiseSchedule::build(1, 1e-6, 1e-6, ScheduleKind::Linear).unwrap();
        assert_eq!(s.gamma(1), 1.0 - 1e-6);
        let s = NoiseSchedule::build(4000, 1e-6, 1e-2, ScheduleKind::Linear).unwrap();
        assert!(s.gamma(4000) < 1e-8);
        assert!(s.gammas().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.beta(1), 1e-6);
        assert!((s.beta(4000) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(NoiseSchedule::build(0, 1e-4, 1e-2, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::build(10, 0.0, 1e-2, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::build(10, 0.2, 0.1, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::build(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let x0 = scalar(1.0);
        let eps = scalar(0.5);
        let v = q_sample_gamma(&x0, 0.72, &eps).unwrap().item().unwrap();
        assert!((v - (0.72f64.sqrt() + 0.5 * 0.28f64.sqrt())).abs() < 1e-15);
        assert!((v - 1.113103).abs() < 1e-6);
        assert_eq!(q_sample_gamma(&x0, 1.0, &eps).unwrap(), x0);
        assert_eq!(q_sample_gamma(&x0, 0.0, &eps).unwrap(), eps);
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((q_sample(&x0, 2, &eps, &s).unwrap().item().unwrap() - v).abs() < 1e-15);
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 3, &eps, &s).is_err());
        assert!(q_sample(&x0, 1, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn predict_x0_examples() {
        let v = predict_x0(&scalar(1.113103), &scalar(0.5), 0.72).unwrap().item().unwrap();
        assert!((v - 1.0).abs() < 1e-6);
        let it = Tensor::new(&[3], vec![-0.4, 0.2, 0.9]).unwrap();
        assert_eq!(predict_x0(&it, &Tensor::randn(&[3], &mut rng(1)), 1.0).unwrap(), it);
        assert!(predict_x0(&it, &it, 0.0).is_err());
        assert!(predict_x0(&it, &it, -0.1).is_err());
        let big = predict_x0(&scalar(3.0), &scalar(0.0), 0.5).unwrap();
        assert_eq!(big.item().unwrap(), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn schedules_are_strictly_decreasing(steps in 1usize..300, start in 1e-6f64..0.05, span in 0.0f64..0.3) {
            let end = (start + span).min(0.5);
            let s = NoiseSchedule::build(steps, start, end, ScheduleKind::Linear).unwrap();
            prop_assert_eq!(s.gammas().len(), steps + 1);
            for t in 1..=steps {
                prop_assert!(s.gamma(t) < s.gamma(t - 1));
                prop_assert!(s.gamma(t) > 0.0);
                prop_assert!((s.gamma(t) - s.gamma(t - 1) * s.alpha(t)).abs() <= 1e-12);
            }
        }

        #[test]
        fn predict_x0_inverts_q_sample(seed in any::<u64>(), gamma in 1e-3f64..=1.0) {
            let mut r = rng(seed);
            let x0 = Tensor::randn(&[2, 3, 4, 4], &mut r);
            let eps = Tensor::randn(&[2, 3, 4, 4], &mut r);
            let it = q_sample_gamma(&x0, gamma, &eps).unwrap();
            let back = predict_x0_unclamped(&it, &eps, gamma).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn single_step_oracle_reconstructs(seed in any::<u64>(), beta in 1e-4f64..0.99) {
            let sched = NoiseSchedule::from_betas(vec![beta]).unwrap();
            let mut r = rng(seed);
            let x0 = Tensor::randn(&[1, 3, 2, 2], &mut r).map(|v| v.clamp(-1.0, 1.0));
            let eps = Tensor::randn(&[1, 3, 2, 2], &mut r);
            let latent = q_sample(&x0, 1, &eps, &sched).unwrap();
            let state = DiffusionState { latent, t: 1, cond: Tensor::zeros(&[1, 3, 2, 2]) };
            let next = p_sample_step_with_noise(&state, &Fixed(eps), &sched, None).unwrap();
            prop_assert_eq!(next.t, 0);
            for (a, b) in next.latent.data().iter().zip(x0.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    /// Returns the same noise estimate regardless of input.
    struct Fixed(Tensor);

    impl Denoiser for Fixed {
        fn condition(&self, m: &Tensor) -> Result<Tensor> {
            Ok(m.clone())
        }
        fn predict_noise(&self, _: &Tensor, _: &Tensor, _: &[f64]) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    /// Recovers the noise that maps `x0` to the current latent at `γ`.
    struct Planted(Tensor);

    impl Denoiser for Planted {
        fn condition(&self, m: &Tensor) -> Result<Tensor> {
            Ok(m.clone())
        }
        fn predict_noise(&self, _: &Tensor, latent: &Tensor, gammas: &[f64]) -> Result<Tensor> {
            let g = gammas[0];
            let data = latent
                .data()
                .iter()
                .zip(self.0.data())
                .map(|(l, x)| (l - g.sqrt() * x) / (1.0 - g).sqrt())
                .collect();
            Tensor::new(latent.shape(), data)
        }
    }

    #[test]
    fn zero_denoiser_step_by_hand() {
        let sched = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let latent = Tensor::new(&[1, 3, 1, 1], vec![0.3, -0.6, 1.2]).unwrap();
        let n = Tensor::new(&[1, 3, 1, 1], vec![1.0, -0.5, 0.25]).unwrap();
        let state = DiffusionState { latent: latent.clone(), t: 2, cond: latent.clone() };
        let next = p_sample_step_with_noise(&state, &Fixed(Tensor::zeros(&[1, 3, 1, 1])), &sched, Some(&n)).unwrap();
        // σ² = 0.2 · (1 − 0.9) / (1 − 0.72)
        let sigma = (0.2f64 * 0.1 / 0.28).sqrt();
        for ((o, i), z) in next.latent.data().iter().zip(latent.data()).zip(n.data()) {
            assert!((o - (i / 0.8f64.sqrt() + sigma * z)).abs() < 1e-12);
        }
        assert!(p_sample_step_with_noise(&state, &Fixed(Tensor::zeros(&[1, 3, 1, 1])), &sched, None).is_err());
        let done = DiffusionState { t: 0, ..state };
        assert!(p_sample_step(&done, &Fixed(Tensor::zeros(&[1, 3, 1, 1])), &sched, &mut rng(0)).is_err());
    }

    #[test]
    fn reverse_step_moments() {
        let sched = NoiseSchedule::build(10, 0.01, 0.2, ScheduleKind::Linear).unwrap();
        let t = 6;
        let latent = Tensor::new(&[1, 3, 1, 1], vec![0.8, -1.1, 1.5]).unwrap();
        let eps_hat = Tensor::new(&[1, 3, 1, 1], vec![0.2, 0.4, -0.3]).unwrap();
        let den = Fixed(eps_hat.clone());
        let state = DiffusionState { latent: latent.clone(), t, cond: latent.clone() };
        let n = 100_000;
        let mut r = rng(2);
        let (mut sum, mut sq) = ([0.0; 3], [0.0; 3]);
        for _ in 0..n {
            let next = p_sample_step(&state, &den, &sched, &mut r).unwrap();
            for (k, v) in next.latent.data().iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        let var = sched.beta(t) * (1.0 - sched.gamma(t - 1)) / (1.0 - sched.gamma(t));
        let c = sched.beta(t) / (1.0 - sched.gamma(t)).sqrt();
        for k in 0..3 {
            let mean = sum[k] / n as f64;
            let v = sq[k] / n as f64 - mean * mean;
            let want = (latent.data()[k] - c * eps_hat.data()[k]) / sched.alpha(t).sqrt();
            assert!((mean - want).abs() / want.abs() < 0.01, "mean {mean} vs {want}");
            assert!((v - var).abs() / var < 0.01, "var {v} vs {var}");
        }
    }

    #[test]
    fn forward_moments() {
        let gamma = 0.6;
        let x0 = Tensor::new(&[2], vec![0.9, -0.5]).unwrap();
        let mut r = rng(3);
        let n = 100_000;
        let (mut sum, mut sq) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let it = q_sample_gamma(&x0, gamma, &Tensor::randn(&[2], &mut r)).unwrap();
            for (k, v) in it.data().iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let want = gamma.sqrt() * x0.data()[k];
            assert!((mean - want).abs() / want.abs() < 0.01, "mean {mean}");
            assert!((var - (1.0 - gamma)).abs() / (1.0 - gamma) < 0.01, "var {var}");
        }
    }

    #[test]
    fn sample_fusion_recovers_planted_image_in_one_step() {
        let sched = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let mut r = rng(4);
        let lr: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[1, 4, 4], &mut r).map(|v| v.abs().min(1.0))).collect();
        let planted = Tensor::randn(&[1, 3, 8, 8], &mut r).map(|v| v.clamp(-1.0, 1.0));
        let out = sample_fusion(&lr[0], &lr[1], &lr[2], 2, &DEFAULT_SCALES, &Planted(planted.clone()), &sched, &mut r).unwrap();
        assert_eq!(out.shape(), &[3, 8, 8]);
        for (o, p) in out.data().iter().zip(planted.data()) {
            assert!((o - (p + 1.0) / 2.0).abs() < 1e-6);
        }
        assert!(sample_fusion(&lr[0], &lr[1], &lr[2], 3, &DEFAULT_SCALES, &Planted(planted.clone()), &sched, &mut r).is_err());
        assert!(sample_fusion(&lr[0], &lr[1], &lr[2], 3, &[3], &Planted(Tensor::zeros(&[1, 3, 12, 12])), &sched, &mut r).is_ok());
    }

    #[test]
    fn sample_fusion_is_seeded() {
        let sched = NoiseSchedule::build(5, 0.01, 0.3, ScheduleKind::Linear).unwrap();
        let den = Fixed(Tensor::full(&[1, 3, 8, 8], 0.1));
        let lr = Tensor::full(&[1, 4, 4], 0.5);
        let run = |seed| sample_fusion(&lr, &lr, &lr, 2, &DEFAULT_SCALES, &den, &sched, &mut rng(seed)).unwrap();
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn upsampled_modalities_keep_order_and_reject_mismatch() {
        let (x, y, s) = (Tensor::full(&[1, 2, 2], 0.1), Tensor::full(&[1, 2, 2], 0.5), Tensor::full(&[1, 2, 2], 0.9));
        let m = upsample_modalities(&x, &y, &s, 4).unwrap();
        assert_eq!(m.shape(), &[1, 3, 8, 8]);
        for (c, v) in [0.1, 0.5, 0.9].iter().enumerate() {
            assert!(m.data()[c * 64..(c + 1) * 64].iter().all(|p| (p - v).abs() < 1e-12));
        }
        assert!(upsample_modalities(&x, &y, &Tensor::zeros(&[1, 3, 2]), 2).is_err());
    }

    struct TapeFixed(Tensor);

    impl TapeDenoiser for TapeFixed {
        fn condition(&self, _: &mut Tape, m: Var) -> Result<Var> {
            Ok(m)
        }
        fn predict_noise(&self, tape: &mut Tape, _: Var, _: Var, _: &[f64]) -> Result<Var> {
            Ok(tape.constant_ref(&self.0))
        }
    }

    fn batch(seed: u64, n: usize) -> TrainingBatch {
        let mut r = rng(seed);
        TrainingBatch {
            modalities: Tensor::randn(&[n, 3, 4, 4], &mut r).map(|v| v.abs().min(1.0)),
            target: Tensor::randn(&[n, 3, 4, 4], &mut r).map(|v| v.clamp(-1.0, 1.0)),
        }
    }

    #[test]
    fn objective_with_oracle_and_zero_denoisers() {
        let sched = NoiseSchedule::build(50, 1e-4, 0.2, ScheduleKind::Linear).unwrap();
        let b = batch(5, 2);
        let draw = draw_noise(b.target.shape(), &sched, &mut rng(6));
        let mut tape = Tape::new();
        let term = noise_objective(&mut tape, &TapeFixed(draw.eps.clone()), &b, &draw).unwrap();
        assert_eq!(tape.scalar(term.loss).unwrap(), 0.0);

        let zero = TapeFixed(Tensor::zeros(&[2, 3, 4, 4]));
        let mut r = rng(7);
        let draws = 2000;
        let mut total = 0.0;
        for _ in 0..draws {
            let mut tape = Tape::new();
            let l = tfs_objective(&mut tape, &zero, &b, &sched, &mut r).unwrap();
            let v = tape.scalar(l).unwrap();
            assert!(v >= 0.0);
            total += v;
        }
        let mean = total / draws as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn objective_rejects_missing_target() {
        let sched = NoiseSchedule::build(10, 1e-4, 0.2, ScheduleKind::Linear).unwrap();
        let mut b = batch(8, 2);
        b.target = Tensor::zeros(&[1, 3, 4, 4]);
        let mut tape = Tape::new();
        let zero = TapeFixed(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(tfs_objective(&mut tape, &zero, &b, &sched, &mut rng(9)).is_err());
    }
}
