//! Training configuration and its `key = value` text format.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! An optional `profile = desk|toy|paper` line selects the base values that the
//! other keys override, wherever it appears. Unknown or repeated keys are
//! errors. [`TrainConfig::to_text`] renders every key in a fixed order and
//! parses back to an identical config.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::diffusion::{NoiseSchedule, ScheduleKind, DEFAULT_SCALES};
use crate::error::{Error, Result};
use crate::network::{NetConfig, DEFAULT_REDUCTION, DEFAULT_WIDTHS};
use crate::objectives::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Small, CPU-friendly settings.
    Desk,
    /// Desk settings with the narrow widths used for quick overfitting runs.
    Toy,
    /// Reference-scale settings; recorded for completeness.
    Paper,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile {other:?} (desk, toy, paper)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub psf_enabled: bool,
    pub tmfa_enabled: bool,
    pub tmfa_reduction: usize,
    /// Weight of the noise-prediction term in the training loss.
    pub noise_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub widths: Vec<usize>,
    pub scale: usize,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Split used by `ablate` for evaluation.
    pub eval_split: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

/// Widths of the toy profile.
pub const TOY_WIDTHS: [usize; 4] = [16, 32, 64, 64];

const KEYS: [&str; 17] = [
    "diffusion_steps",
    "beta_start",
    "beta_end",
    "lambda1",
    "lambda2",
    "psf_enabled",
    "tmfa_enabled",
    "tmfa_reduction",
    "noise_weight",
    "learning_rate",
    "batch_size",
    "total_steps",
    "seed",
    "widths",
    "scale",
    "checkpoint_every",
    "eval_split",
];

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
            lambda1: 0.5,
            lambda2: 0.5,
            psf_enabled: true,
            tmfa_enabled: true,
            tmfa_reduction: DEFAULT_REDUCTION,
            noise_weight: 1.0,
            learning_rate: 1e-4,
            batch_size: 4,
            total_steps: 2000,
            seed: 0,
            widths: DEFAULT_WIDTHS.to_vec(),
            scale: 4,
            checkpoint_every: 500,
            eval_split: "test".into(),
        }
    }

    /// Desk settings tuned for overfitting a handful of 32×32 samples: a
    /// gentler noise schedule and larger batches.
    pub fn toy() -> Self {
        TrainConfig {
            beta_start: 1e-3,
            beta_end: 0.07,
            batch_size: 8,
            widths: TOY_WIDTHS.to_vec(),
            ..TrainConfig::desk()
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            diffusion_steps: 4000,
            beta_start: 1e-6,
            beta_end: 1e-2,
            batch_size: 32,
            total_steps: 800_000,
            scale: 8,
            checkpoint_every: 10_000,
            ..TrainConfig::desk()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => TrainConfig::desk(),
            Profile::Toy => TrainConfig::toy(),
            Profile::Paper => TrainConfig::paper(),
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "diffusion_steps" => self.diffusion_steps = parse(value)?,
            "beta_start" => self.beta_start = parse(value)?,
            "beta_end" => self.beta_end = parse(value)?,
            "lambda1" => self.lambda1 = parse(value)?,
            "lambda2" => self.lambda2 = parse(value)?,
            "psf_enabled" => self.psf_enabled = parse(value)?,
            "tmfa_enabled" => self.tmfa_enabled = parse(value)?,
            "tmfa_reduction" => self.tmfa_reduction = parse(value)?,
            "noise_weight" => self.noise_weight = parse(value)?,
            "learning_rate" => self.learning_rate = parse(value)?,
            "batch_size" => self.batch_size = parse(value)?,
            "total_steps" => self.total_steps = parse(value)?,
            "seed" => self.seed = parse(value)?,
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|w| parse::<usize>(w.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "scale" => self.scale = parse(value)?,
            "checkpoint_every" => self.checkpoint_every = parse(value)?,
            "eval_split" => self.eval_split = value.to_string(),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Parses the text format, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut assignments = Vec::new();
        let mut profile = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: lineno,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "profile" {
                if profile.is_some() {
                    return Err(Error::Config {
                        line: lineno,
                        message: "profile given twice".into(),
                    });
                }
                profile = Some(value.parse::<Profile>().map_err(|message| Error::Config { line: lineno, message })?);
            } else {
                assignments.push((lineno, key, value));
            }
        }
        let mut cfg = TrainConfig::profile(profile.unwrap_or(Profile::Desk));
        let mut seen = BTreeSet::new();
        for (line, key, value) in assignments {
            if !seen.insert(key) {
                return Err(Error::Config {
                    line,
                    message: format!("{key} given twice"),
                });
            }
            cfg.set(key, value).map_err(|message| Error::Config {
                line,
                message: format!("{key}: {message}"),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Config { line: 0, message };
        self.schedule().map_err(|e| bad(e.to_string()))?;
        self.loss_weights().validate().map_err(|e| bad(e.to_string()))?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be >= 1".into()));
        }
        if self.tmfa_reduction == 0 {
            return Err(bad("tmfa_reduction must be >= 1".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(bad(format!("widths {:?} must be non-empty and positive", self.widths)));
        }
        if !DEFAULT_SCALES.contains(&self.scale) {
            return Err(bad(format!("scale {} not in {DEFAULT_SCALES:?}", self.scale)));
        }
        if !["train", "val", "test"].contains(&self.eval_split.as_str()) {
            return Err(bad(format!("eval_split {:?} must be train, val or test", self.eval_split)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.diffusion_steps, self.beta_start, self.beta_end, ScheduleKind::Linear)
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            widths: self.widths.clone(),
            reduction: self.tmfa_reduction,
            tmfa_enabled: self.tmfa_enabled,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            psf_enabled: self.psf_enabled,
            noise_weight: self.noise_weight,
        }
    }

    fn value(&self, key: &str) -> String {
        match key {
            "diffusion_steps" => self.diffusion_steps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "psf_enabled" => self.psf_enabled.to_string(),
            "tmfa_enabled" => self.tmfa_enabled.to_string(),
            "tmfa_reduction" => self.tmfa_reduction.to_string(),
            "noise_weight" => self.noise_weight.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "seed" => self.seed.to_string(),
            "widths" => self.widths.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            "scale" => self.scale.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "eval_split" => self.eval_split.clone(),
            _ => unreachable!("key list is fixed"),
        }
    }

    /// Canonical text rendering, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value(key));
        }
        out
    }

    /// Keys whose values differ between two configs.
    pub fn diff(&self, other: &TrainConfig) -> Vec<&'static str> {
        KEYS.into_iter().filter(|k| self.value(k) != other.value(k)).collect()
    }
}
