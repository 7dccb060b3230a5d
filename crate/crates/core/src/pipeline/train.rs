//! The training loop: Adam on the training loss, periodic checkpoints and a
//! step-indexed loss log that a resumed run reproduces line for line.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
use super::config::TrainConfig;
use super::dataset::TriModalSample;
use super::optim::Adam;
use crate::diffusion::{draw_noise, upsample_modalities, NoiseSchedule, TrainingBatch};
use crate::error::{Error, Result};
use crate::network::FusionNet;
use crate::objectives::{training_loss_with, SsimWindow};
use crate::tensor::{Tape, Tensor};

/// Name of the loss log inside a run directory.
pub const LOSS_LOG: &str = "loss.log";
/// Name of the most recent checkpoint inside a run directory.
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Config keys that may change when a run is resumed.
const RESUMABLE_KEYS: [&str; 3] = ["total_steps", "checkpoint_every", "eval_split"];

/// Pre-upsampled conditioning stacks and `[-1, 1]` targets, one per sample.
#[derive(Debug, Clone)]
pub struct TrainingData {
    modalities: Vec<Tensor>,
    targets: Vec<Tensor>,
}

impl TrainingData {
    pub fn from_samples(samples: &[TriModalSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let shape = samples[0].gt.shape().to_vec();
        let mut modalities = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            s.validate()?;
            if s.gt.shape() != shape {
                return Err(Error::Dataset(format!(
                    "{}: ground truth {:?} differs from {:?}; training needs one size",
                    s.id,
                    s.gt.shape(),
                    shape
                )));
            }
            let m = upsample_modalities(&s.x, &s.y, &s.s, s.scale)?;
            modalities.push(m.reshape(&shape)?);
            targets.push(s.gt.map(|v| 2.0 * v - 1.0));
        }
        Ok(TrainingData { modalities, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// `[H, W]` of every target.
    pub fn size(&self) -> (usize, usize) {
        let s = self.targets[0].shape();
        (s[1], s[2])
    }

    pub fn batch(&self, indices: &[usize]) -> Result<TrainingBatch> {
        let pick = |v: &[Tensor]| Tensor::stack(&indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>());
        Ok(TrainingBatch {
            modalities: pick(&self.modalities)?,
            target: pick(&self.targets)?,
        })
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub noise: f64,
    pub psf: Option<f64>,
}

impl LossRecord {
    /// `step total noise psf`, with `-` when the PSF term is disabled.
    pub fn to_line(&self) -> String {
        match self.psf {
            Some(p) => format!("{} {:?} {:?} {:?}", self.step, self.total, self.noise, p),
            None => format!("{} {:?} {:?} -", self.step, self.total, self.noise),
        }
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed loss log line {line:?}"));
        let mut it = line.split_whitespace();
        let mut next = || it.next().ok_or_else(bad);
        let step = next()?.parse().map_err(|_| bad())?;
        let total = next()?.parse().map_err(|_| bad())?;
        let noise = next()?.parse().map_err(|_| bad())?;
        let psf = match next()? {
            "-" => None,
            v => Some(v.parse().map_err(|_| bad())?),
        };
        Ok(LossRecord { step, total, noise, psf })
    }
}

/// Mean total loss over the last `window` records.
pub fn smoothed_loss(log: &[LossRecord], window: usize) -> Option<f64> {
    let tail = &log[log.len().saturating_sub(window.max(1))..];
    (!tail.is_empty()).then(|| tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64)
}

/// Network, optimizer and rng of a run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    net: FusionNet,
    sched: NoiseSchedule,
    optimizer: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    /// Fresh run: the network is initialised from `seed`, and the batch and
    /// noise draws come from stream 1 of the same seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = FusionNet::new(config.net_config(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            sched: config.schedule()?,
            optimizer: Adam::new(config.learning_rate, net.count_parameters()),
            net,
            rng,
            step: 0,
            config,
        })
    }

    /// Continues a run. `config`, when given, may only change [`RESUMABLE_KEYS`].
    pub fn resume(checkpoint: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let saved = checkpoint.config()?;
        let config = match config {
            Some(c) => {
                let changed: Vec<_> = saved.diff(&c).into_iter().filter(|k| !RESUMABLE_KEYS.contains(k)).collect();
                if !changed.is_empty() {
                    return Err(Error::Checkpoint(format!(
                        "cannot resume with changed settings: {}",
                        changed.join(", ")
                    )));
                }
                c
            }
            None => saved,
        };
        config.validate()?;
        let mut net = FusionNet::new(config.net_config(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        net.params_mut().load_flat(&checkpoint.params)?;
        Ok(Trainer {
            sched: config.schedule()?,
            optimizer: checkpoint.optimizer.clone(),
            net,
            rng: checkpoint.rng.restore(),
            step: checkpoint.step,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &FusionNet {
        &self.net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_text: self.config.to_text(),
            params: self.net.params().flatten(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Runs one optimisation step and returns its loss record.
    pub fn train_step(&mut self, data: &TrainingData) -> Result<LossRecord> {
        let n = data.len();
        // Batches larger than the data stack fresh permutations, so each
        // sample appears with several independent (t, ε) draws.
        let mut indices = Vec::with_capacity(self.config.batch_size);
        while indices.len() < self.config.batch_size {
            let take = (self.config.batch_size - indices.len()).min(n);
            indices.extend(index::sample(&mut self.rng, n, take));
        }
        let batch = data.batch(&indices)?;
        let draw = draw_noise(batch.target.shape(), &self.sched, &mut self.rng);
        let gamma = draw.gammas.clone();
        let step = self.step + 1;
        let weights = self.config.loss_weights();

        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, true);
        let diverged = |noise: f64, psf: f64| Error::NonFiniteLoss {
            step,
            gamma: gamma.clone(),
            noise,
            psf,
        };
        let terms = match training_loss_with(&mut tape, &bound, &batch, &weights, SsimWindow::default(), draw) {
            Ok(t) => t,
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN, f64::NAN)),
            Err(e) => return Err(e),
        };
        let total = tape.scalar(terms.total)?;
        let noise = tape.scalar(terms.noise)?;
        let psf = terms.psf.map(|p| tape.scalar(p)).transpose()?;
        if !total.is_finite() {
            return Err(diverged(noise, psf.unwrap_or(0.0)));
        }
        let grads = match tape.backward(terms.total) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Err(diverged(noise, psf.unwrap_or(0.0))),
            Err(e) => return Err(e),
        };
        let binding = bound.binding().clone();
        drop(bound);
        let params = self.net.params_mut();
        params.accumulate(&grads, &binding)?;
        self.optimizer.step(params)?;
        params.zero_grad();
        self.step = step;
        Ok(LossRecord { step, total, noise, psf })
    }
}

/// Where a run writes its checkpoints and loss log. `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// Records produced by this invocation (not those before a resume point).
    pub log: Vec<LossRecord>,
}

/// Path of the periodic checkpoint written after `step`.
pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("step_{step:08}.ckpt"))
}

/// Reads a loss log written by [`train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(LossRecord::parse_line).collect()
}

/// Trains until `config.total_steps`. With a run directory, checkpoints land
/// every `checkpoint_every` steps and at the end (also as [`LAST_CHECKPOINT`]),
/// and the loss log is truncated to the resume point before appending.
pub fn train(
    trainer: Trainer,
    data: &TrainingData,
    opts: &TrainOptions,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    let mut trainer = trainer;
    let mut log_file = match &opts.run_dir {
        Some(dir) => Some(open_log(dir, trainer.step())?),
        None => None,
    };
    let mut log = Vec::new();
    let total = trainer.config().total_steps;
    while trainer.step() < total {
        let record = trainer.train_step(data)?;
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", record.to_line()).map_err(|e| Error::io(&*path, e))?;
        }
        on_record(&record);
        log.push(record);
        let every = trainer.config().checkpoint_every;
        if let Some(dir) = &opts.run_dir {
            if every > 0 && record.step % every == 0 && record.step != total {
                trainer.checkpoint().save(&checkpoint_path(dir, record.step))?;
            }
        }
    }
    if let Some(dir) = &opts.run_dir {
        let ck = trainer.checkpoint();
        ck.save(&checkpoint_path(dir, trainer.step()))?;
        ck.save(&dir.join(LAST_CHECKPOINT))?;
        if let Some((f, path)) = log_file.as_mut() {
            f.flush().map_err(|e| Error::io(&*path, e))?;
        }
    }
    Ok(TrainOutcome { trainer, log })
}

/// Opens the loss log for appending after dropping any lines past `step`.
fn open_log(dir: &Path, step: u64) -> Result<(std::fs::File, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOSS_LOG);
    let kept = if path.exists() {
        read_loss_log(&path)?.into_iter().filter(|r| r.step <= step).collect()
    } else {
        Vec::new()
    };
    if step > 0 && kept.len() as u64 != step {
        log::warn!("loss log holds {} lines before step {step}; continuing anyway", kept.len());
    }
    let mut text = String::new();
    for r in &kept {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let file = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    Ok((file, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synthetic::phantom;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            diffusion_steps: 10,
            widths: vec![4, 4, 8, 8],
            batch_size: 2,
            total_steps: 6,
            checkpoint_every: 3,
            learning_rate: 1e-3,
            scale: 2,
            seed: 11,
            ..TrainConfig::desk()
        }
    }

    pub(crate) fn tiny_samples(n: usize, size: usize, scale: usize) -> Vec<TriModalSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n)
            .map(|i| {
                let p = phantom(size, &mut rng).unwrap();
                let down = |t: &Tensor| super::super::resample::bicubic_resample(t, size / scale, size / scale).unwrap();
                TriModalSample {
                    id: format!("s{i}"),
                    x: down(&p.x),
                    y: down(&p.y),
                    s: down(&p.s),
                    gt: p.gt,
                    scale,
                    modality: Default::default(),
                }
            })
            .collect()
    }

    #[test]
    fn log_lines_roundtrip() {
        for r in [
            LossRecord { step: 7, total: 0.1 + 0.2, noise: 1e-300, psf: Some(0.5) },
            LossRecord { step: 1, total: 2.0, noise: 2.0, psf: None },
        ] {
            assert_eq!(LossRecord::parse_line(&r.to_line()).unwrap(), r);
        }
        assert!(LossRecord::parse_line("1 2").is_err());
    }

    #[test]
    fn steps_update_parameters_and_stay_finite() {
        let data = TrainingData::from_samples(&tiny_samples(3, 16, 2)).unwrap();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let before = trainer.net().params().flatten();
        let r = trainer.train_step(&data).unwrap();
        assert_eq!(r.step, 1);
        assert!(r.total.is_finite() && r.psf.is_some());
        assert!((r.total - r.noise - r.psf.unwrap()).abs() < 1e-12);
        assert_ne!(trainer.net().params().flatten(), before);
        assert!(trainer.net().params().iter().all(|(_, t)| t.grad().unwrap().iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = TrainingData::from_samples(&tiny_samples(3, 16, 2)).unwrap();
        let full = train(Trainer::new(tiny_config()).unwrap(), &data, &TrainOptions::default(), |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { run_dir: Some(dir.path().to_path_buf()) };
        let mut short = tiny_config();
        short.total_steps = 3;
        train(Trainer::new(short).unwrap(), &data, &opts, |_| {}).unwrap();
        let ck = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(ck.step, 3);
        let resumed = train(Trainer::resume(&ck, Some(tiny_config())).unwrap(), &data, &opts, |_| {}).unwrap();

        assert_eq!(read_loss_log(&dir.path().join(LOSS_LOG)).unwrap(), full.log);
        assert_eq!(resumed.trainer.checkpoint().to_bytes(), full.trainer.checkpoint().to_bytes());
        assert!(checkpoint_path(dir.path(), 3).is_file());
        assert!(checkpoint_path(dir.path(), 6).is_file());
    }

    #[test]
    fn resume_rejects_changed_model_settings() {
        let ck = Trainer::new(tiny_config()).unwrap().checkpoint();
        let mut other = tiny_config();
        other.lambda1 = 0.9;
        assert!(matches!(Trainer::resume(&ck, Some(other)), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn disabled_psf_logs_a_dash() {
        let data = TrainingData::from_samples(&tiny_samples(2, 16, 2)).unwrap();
        let mut cfg = tiny_config();
        cfg.psf_enabled = false;
        let r = Trainer::new(cfg).unwrap().train_step(&data).unwrap();
        assert!(r.psf.is_none() && r.to_line().ends_with(" -"));
    }

    #[test]
    fn divergence_reports_step_and_gamma() {
        let data = TrainingData::from_samples(&tiny_samples(2, 16, 2)).unwrap();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        trainer.net.params_mut().tensors_mut().for_each(|t| t.data_mut().fill(f64::MAX));
        match trainer.train_step(&data) {
            Err(Error::NonFiniteLoss { step, gamma, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(gamma.len(), 2);
            }
            other => panic!("expected a divergence error, got {other:?}"),
        }
    }

    #[test]
    fn smoothing_window() {
        let log: Vec<_> = (1..=4).map(|s| LossRecord { step: s, total: s as f64, noise: 0.0, psf: None }).collect();
        assert_eq!(smoothed_loss(&log, 2), Some(3.5));
        assert_eq!(smoothed_loss(&log, 10), Some(2.5));
        assert_eq!(smoothed_loss(&[], 3), None);
    }
}
