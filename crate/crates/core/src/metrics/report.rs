use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::{ag, mae, mse, psnr_from_mse, ssim_metric, vif, DEFAULT_RANGE};
use crate::error::{Error, Result};
use crate::pipeline::image_io::load_rgb_levels;
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Column order of the text table.
pub const TABLE_COLUMNS: [&str; 8] = ["MSE", "VIF", "SSIM", "PSNR", "LPIPS*", "MAE", "RMSE", "AG"];

/// Metrics of one result image against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub ag: f64,
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    /// dB; `+∞` for identical images, stored as the string `"inf"` in JSON.
    #[serde(with = "finite_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub vif: f64,
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Pixel value range the metrics were computed on.
    pub value_range: [f64; 2],
    pub records: Vec<ImageRecord>,
    pub mean: ImageRecord,
    pub lpips_plugin: Option<String>,
    /// Ids present on only one side, when evaluated with `allow_partial`.
    pub unmatched: Vec<String>,
}

mod finite_or_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected PSNR value {t:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Peak value for PSNR and SSIM; images are read on the `[0, 255]` scale.
    pub range: f64,
    pub allow_partial: bool,
    /// Executable (plus leading arguments) called as `cmd <result> <gt>`.
    pub lpips_command: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            range: DEFAULT_RANGE,
            allow_partial: false,
            lpips_command: None,
        }
    }
}

impl ImageRecord {
    /// Computes every metric for one pair on the 8-bit scale.
    pub fn compute(id: impl Into<String>, result: &Tensor, gt: &Tensor, range: f64) -> Result<Self> {
        let m = mse(result, gt)?;
        Ok(ImageRecord {
            id: id.into(),
            ag: ag(result)?,
            mse: m,
            mae: mae(result, gt)?,
            rmse: m.sqrt(),
            psnr: psnr_from_mse(m, range),
            ssim: ssim_metric(result, gt, range)?,
            vif: vif(gt, result)?,
            lpips: None,
        })
    }

    fn column(&self, name: &str) -> Option<f64> {
        match name {
            "MSE" => Some(self.mse),
            "VIF" => Some(self.vif),
            "SSIM" => Some(self.ssim),
            "PSNR" => Some(self.psnr),
            "LPIPS*" => self.lpips,
            "MAE" => Some(self.mae),
            "RMSE" => Some(self.rmse),
            "AG" => Some(self.ag),
            _ => None,
        }
    }
}

fn mean_record(records: &[ImageRecord]) -> ImageRecord {
    let n = records.len() as f64;
    let avg = |f: fn(&ImageRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let lpips = records
        .iter()
        .map(|r| r.lpips)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    ImageRecord {
        id: "mean".into(),
        ag: avg(|r| r.ag),
        mse: avg(|r| r.mse),
        mae: avg(|r| r.mae),
        rmse: avg(|r| r.rmse),
        psnr: avg(|r| r.psnr),
        ssim: avg(|r| r.ssim),
        vif: avg(|r| r.vif),
        lpips,
    }
}

impl MetricsReport {
    pub fn from_records(records: Vec<ImageRecord>, range: f64, lpips_plugin: Option<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("metrics report needs at least one image".into()));
        }
        Ok(MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            value_range: [0.0, range],
            mean: mean_record(&records),
            records,
            lpips_plugin,
            unmatched: Vec::new(),
        })
    }

    /// Aligned plain-text table, one row per image plus the mean row.
    pub fn to_table(&self) -> String {
        table(self.records.iter().chain(std::iter::once(&self.mean)).map(|r| (r.id.as_str(), r)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `<stem>.json` and `<stem>.txt` next to each other.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let json = stem.with_extension("json");
        let txt = stem.with_extension("txt");
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&json, self.to_json()? + "\n").map_err(|e| Error::io(&json, e))?;
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        Ok((json, txt))
    }
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v:.4}"),
    }
}

/// Renders labelled records with the standard column order.
pub(crate) fn table<'a>(rows: impl Iterator<Item = (&'a str, &'a ImageRecord)>) -> String {
    let rows: Vec<(String, Vec<String>)> = rows
        .map(|(label, r)| (label.to_string(), TABLE_COLUMNS.iter().map(|c| fmt_value(r.column(c))).collect()))
        .collect();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("image".len());
    let widths: Vec<usize> = TABLE_COLUMNS
        .iter()
        .enumerate()
        .map(|(i, c)| rows.iter().map(|(_, v)| v[i].len()).max().unwrap_or(0).max(c.len()))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "image");
    for (c, w) in TABLE_COLUMNS.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (label, values) in &rows {
        let _ = write!(out, "{label:<label_w$}");
        for (v, w) in values.iter().zip(&widths) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    out
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) && path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                ids.insert(name.to_string());
            }
        }
    }
    Ok(ids)
}

fn run_lpips(command: &str, result: &Path, gt: &Path) -> Result<f64> {
    let mut parts = command.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| Error::Plugin("empty LPIPS command".into()))?;
    let out = Command::new(program)
        .args(parts)
        .arg(result)
        .arg(gt)
        .output()
        .map_err(|e| Error::Plugin(format!("cannot run {program}: {e}")))?;
    if !out.status.success() {
        return Err(Error::Plugin(format!(
            "{program} exited with {} on {}",
            out.status,
            result.display()
        )));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let value: f64 = text
        .trim()
        .parse()
        .map_err(|_| Error::Plugin(format!("{program} printed {:?}, expected one number", text.trim())))?;
    if !value.is_finite() {
        return Err(Error::Plugin(format!("{program} printed a non-finite value")));
    }
    Ok(value)
}

/// Evaluates every PNG in `results` against the same-named PNG in `gt`.
pub fn evaluate_set(results: &Path, gt: &Path, opts: &EvalOptions) -> Result<MetricsReport> {
    if !(opts.range > 0.0) {
        return Err(Error::InvalidArgument(format!("range must be > 0, got {}", opts.range)));
    }
    let ours = png_ids(results)?;
    let theirs = png_ids(gt)?;
    let unmatched: Vec<String> = ours.symmetric_difference(&theirs).cloned().collect();
    if !unmatched.is_empty() && !opts.allow_partial {
        return Err(Error::Unmatched(unmatched));
    }
    if !unmatched.is_empty() {
        log::warn!("skipping {} unmatched files: {unmatched:?}", unmatched.len());
    }
    let mut records = Vec::new();
    for name in ours.intersection(&theirs) {
        let (rp, gp) = (results.join(name), gt.join(name));
        let r = load_rgb_levels(&rp)?;
        let g = load_rgb_levels(&gp)?;
        if r.shape() != g.shape() {
            return Err(Error::shape("evaluate_set", format!("{name}: result {:?} vs truth {:?}", r.shape(), g.shape())));
        }
        let id = name.trim_end_matches(".png").trim_end_matches(".PNG").to_string();
        let mut rec = ImageRecord::compute(id, &r, &g, opts.range)?;
        if let Some(cmd) = &opts.lpips_command {
            rec.lpips = Some(run_lpips(cmd, &rp, &gp)?);
        }
        records.push(rec);
    }
    let mut report = MetricsReport::from_records(records, opts.range, opts.lpips_command.clone())
        .map_err(|_| Error::Unmatched(unmatched.clone()))?;
    report.unmatched = unmatched;
    Ok(report)
}
