//! Ablation runs: the full model against variants without the TMFA block and
//! without the PSF loss, trained and evaluated under identical seeds and data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::dataset::TriModalSample;
use super::fuse::Fuser;
use super::image_io::save_rgb;
use super::train::{smoothed_loss, train, TrainOptions, Trainer, TrainingData};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_set, EvalOptions, ImageRecord, MetricsReport, DEFAULT_RANGE};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Row order of the comparison table.
pub const ABLATION_ROWS: [&str; 8] = ["VIF", "SSIM", "PSNR", "AG", "MSE", "LPIPS*", "MAE", "RMSE"];

/// Records averaged over the last this many steps for the reported loss.
const LOSS_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub config: TrainConfig,
}

/// Baseline plus one variant per switched-off component, in that order.
pub fn variants(base: &TrainConfig) -> Vec<Variant> {
    let mut base = base.clone();
    base.tmfa_enabled = true;
    base.psf_enabled = true;
    let no_tmfa = TrainConfig {
        tmfa_enabled: false,
        ..base.clone()
    };
    let no_psf = TrainConfig {
        psf_enabled: false,
        ..base.clone()
    };
    vec![
        Variant { name: "baseline", config: base },
        Variant { name: "no-tmfa", config: no_tmfa },
        Variant { name: "no-psf", config: no_psf },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    /// Config keys that differ from the baseline.
    pub changed: Vec<String>,
    pub parameters: usize,
    /// Mean total loss over the last steps; `None` for an untrained run.
    pub final_loss: Option<f64>,
    pub mean: ImageRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub schema_version: u32,
    pub eval_samples: Vec<String>,
    pub variants: Vec<VariantSummary>,
}

impl AblationSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Metrics as rows, variants as columns.
    pub fn to_table(&self) -> String {
        let names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        let cells: Vec<Vec<String>> = ABLATION_ROWS
            .iter()
            .map(|row| self.variants.iter().map(|v| cell(&v.mean, row)).collect())
            .collect();
        let label_w = ABLATION_ROWS.iter().map(|r| r.len()).max().unwrap_or(0).max("metric".len());
        let widths: Vec<usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| cells.iter().map(|r| r[i].len()).max().unwrap_or(0).max(n.len()))
            .collect();
        let mut out = format!("{:<label_w$}", "metric");
        for (n, w) in names.iter().zip(&widths) {
            let _ = write!(out, "  {n:>w$}");
        }
        out.push('\n');
        for (row, values) in ABLATION_ROWS.iter().zip(&cells) {
            let _ = write!(out, "{row:<label_w$}");
            for (v, w) in values.iter().zip(&widths) {
                let _ = write!(out, "  {v:>w$}");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `ablation.json` and `ablation.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("ablation.json");
        let txt = dir.join("ablation.txt");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        Ok((json, txt))
    }
}

fn cell(r: &ImageRecord, row: &str) -> String {
    let v = match row {
        "VIF" => Some(r.vif),
        "SSIM" => Some(r.ssim),
        "PSNR" => Some(r.psnr),
        "AG" => Some(r.ag),
        "MSE" => Some(r.mse),
        "LPIPS*" => r.lpips,
        "MAE" => Some(r.mae),
        "RMSE" => Some(r.rmse),
        _ => None,
    };
    match v {
        None => String::new(),
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v:.4}"),
    }
}

/// Fuses every sample with `seed`, writes the 8-bit results and ground
/// truths under `dir`, and scores them at the 0..255 range.
pub fn evaluate_fuser(
    fuser: &Fuser,
    samples: &[TriModalSample],
    seed: u64,
    dir: &Path,
    lpips_command: Option<String>,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let (fused_dir, gt_dir) = (dir.join("fused"), dir.join("gt"));
    for d in [&fused_dir, &gt_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples {
        let out = fuser.fuse(&s.x, &s.y, &s.s, seed)?;
        save_rgb(&fused_dir.join(format!("{}.png", s.id)), &out.image)?;
        save_rgb(&gt_dir.join(format!("{}.png", s.id)), &s.gt)?;
    }
    let opts = EvalOptions {
        range: DEFAULT_RANGE,
        allow_partial: false,
        lpips_command,
    };
    evaluate_set(&fused_dir, &gt_dir, &opts)
}

#[derive(Debug, Clone, Default)]
pub struct AblationOptions {
    pub lpips_command: Option<String>,
}

/// Trains and evaluates every variant. Each variant's checkpoint, loss log,
/// images and report land in `out/<name>/`; the summary in `out/`.
pub fn run_ablation(
    base: &TrainConfig,
    train_samples: &[TriModalSample],
    eval_samples: &[TriModalSample],
    out: &Path,
    opts: &AblationOptions,
    mut progress: impl FnMut(&str, u64),
) -> Result<AblationSummary> {
    let data = TrainingData::from_samples(train_samples)?;
    let all = variants(base);
    let mut summaries = Vec::with_capacity(all.len());
    for v in &all {
        let dir = out.join(v.name);
        log::info!("ablation: training {}", v.name);
        let trainer = Trainer::new(v.config.clone())?;
        let parameters = trainer.net().count_parameters();
        let outcome = train(trainer, &data, &TrainOptions { run_dir: Some(dir.clone()) }, |r| progress(v.name, r.step))?;
        let fuser = Fuser::from_parts(outcome.trainer.net().clone(), &v.config)?;
        let report = evaluate_fuser(&fuser, eval_samples, v.config.seed, &dir, opts.lpips_command.clone())?;
        report.write(&dir.join("report"))?;
        summaries.push(VariantSummary {
            name: v.name.to_string(),
            changed: all[0].config.diff(&v.config).into_iter().map(String::from).collect(),
            parameters,
            final_loss: smoothed_loss(&outcome.log, LOSS_WINDOW),
            mean: report.mean,
        });
    }
    let summary = AblationSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        eval_samples: eval_samples.iter().map(|s| s.id.clone()).collect(),
        variants: summaries,
    };
    summary.write(out)?;
    Ok(summary)
}
