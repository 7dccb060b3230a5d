//! Multi-scale dataset construction and loading.
//!
//! Source layout: `<src>/<id>/{x,y,s,gt}.png` with an optional `modality.txt`.
//! Output layout: `<out>/x<scale>/<id>/{x,y,s}.png`, `<out>/gt/<id>.png` and
//! `<out>/manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image_io::{load_gray, load_rgb, save_gray, save_rgb};
use super::resample::bicubic_resample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Train/validation/test group counts of the reference split.
pub const DEFAULT_SPLIT: [usize; 3] = [84, 10, 25];
pub const SUPPORTED_SCALES: [usize; 3] = [2, 4, 8];

/// The registered modality triplets, in `(x, y, s)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[derive(Default)]
pub enum ModalityConfig {
    #[serde(rename = "MR-T2/MR-Gad/PET")]
    T2GadPet,
    #[serde(rename = "CT/MR-T2/SPECT")]
    CtT2Spect,
    #[serde(rename = "MR-T1/MR-T2/PET")]
    T1T2Pet,
    #[serde(rename = "MR-T2/MR-Gad/SPECT")]
    T2GadSpect,
    #[serde(rename = "MR-T1/MR-T2/SPECT")]
    #[default]
    T1T2Spect,
}

impl ModalityConfig {
    pub const ALL: [ModalityConfig; 5] = [
        ModalityConfig::T2GadPet,
        ModalityConfig::CtT2Spect,
        ModalityConfig::T1T2Pet,
        ModalityConfig::T2GadSpect,
        ModalityConfig::T1T2Spect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityConfig::T2GadPet => "MR-T2/MR-Gad/PET",
            ModalityConfig::CtT2Spect => "CT/MR-T2/SPECT",
            ModalityConfig::T1T2Pet => "MR-T1/MR-T2/PET",
            ModalityConfig::T2GadSpect => "MR-T2/MR-Gad/SPECT",
            ModalityConfig::T1T2Spect => "MR-T1/MR-T2/SPECT",
        }
    }
}


impl fmt::Display for ModalityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        ModalityConfig::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Dataset(format!("unknown modality triplet {s:?}")))
    }
}

/// One evaluation/training unit at a given scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TriModalSample {
    pub id: String,
    /// Low-resolution `[1,h,w]` modalities in `[0, 1]`.
    pub x: Tensor,
    pub y: Tensor,
    pub s: Tensor,
    /// High-resolution `[3, h·scale, w·scale]` fusion in `[0, 1]`.
    pub gt: Tensor,
    pub scale: usize,
    pub modality: ModalityConfig,
}

impl TriModalSample {
    /// Checks the size and value-range invariants.
    pub fn validate(&self) -> Result<()> {
        let lr = self.x.shape();
        if lr.len() != 3 || lr[0] != 1 || self.y.shape() != lr || self.s.shape() != lr {
            return Err(Error::Dataset(format!(
                "{}: modality shapes {:?} {:?} {:?}",
                self.id,
                lr,
                self.y.shape(),
                self.s.shape()
            )));
        }
        let want = [3, lr[1] * self.scale, lr[2] * self.scale];
        if self.gt.shape() != want {
            return Err(Error::Dataset(format!(
                "{}: ground truth {:?} is not {:?} (low-res × {})",
                self.id,
                self.gt.shape(),
                want,
                self.scale
            )));
        }
        for t in [&self.x, &self.y, &self.s, &self.gt] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("{}: pixel values outside [0, 1]", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub modality: ModalityConfig,
    /// `[H, W]` of the ground truth.
    pub size: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub split_ratio: [usize; 3],
    pub scales: Vec<usize>,
    pub splits: Splits,
    pub samples: Vec<SampleEntry>,
    /// sha256 of every source file, keyed `<id>/<file>`.
    pub source_checksums: BTreeMap<String, String>,
    /// sha256 of every written file, keyed by path relative to the output root.
    pub output_checksums: BTreeMap<String, String>,
    /// Source samples left out, with the reason.
    pub rejected: Vec<(String, String)>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!("unsupported manifest version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn sample(&self, id: &str) -> Result<&SampleEntry> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Dataset(format!("sample {id:?} not in manifest")))
    }

    /// Re-hashes every output file; returns the paths whose content changed.
    pub fn verify_outputs(&self, root: &Path) -> Result<Vec<String>> {
        let mut changed = Vec::new();
        for (rel, sum) in &self.output_checksums {
            if sha256_file(&root.join(rel))? != *sum {
                changed.push(rel.clone());
            }
        }
        Ok(changed)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub scales: Vec<usize>,
    pub split_ratio: [usize; 3],
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            scales: SUPPORTED_SCALES.to_vec(),
            split_ratio: DEFAULT_SPLIT,
            seed: 0,
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Split sizes for `n` samples: proportional to `ratio` with largest-remainder
/// rounding, so that they always sum to `n`.
pub fn split_sizes(n: usize, ratio: [usize; 3]) -> Result<[usize; 3]> {
    let total: usize = ratio.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("split ratio must not be all zero".into()));
    }
    let mut sizes = ratio.map(|r| r * n / total);
    let mut rema: Vec<(usize, usize)> = ratio.iter().enumerate().map(|(i, r)| (r * n % total, i)).collect();
    // Largest remainder first, ties to the earlier split.
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = n - sizes.iter().sum::<usize>();
    for (_, i) in rema {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok(sizes)
}

/// Deterministic shuffled split of `ids` under `seed`.
pub fn split_ids(ids: &[String], ratio: [usize; 3], seed: u64) -> Result<Splits> {
    let [a, b, _] = split_sizes(ids.len(), ratio)?;
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(a + b);
    let val = shuffled.split_off(a);
    Ok(Splits {
        train: shuffled,
        val,
        test,
    })
}

struct SourceSample {
    id: String,
    x: Tensor,
    y: Tensor,
    s: Tensor,
    gt: Tensor,
    modality: ModalityConfig,
    checksums: Vec<(String, String)>,
}

fn read_source(dir: &Path, id: &str, scales: &[usize]) -> std::result::Result<SourceSample, String> {
    let mut checksums = Vec::new();
    let mut missing = Vec::new();
    for f in ["x.png", "y.png", "s.png", "gt.png"] {
        let p = dir.join(f);
        if p.is_file() {
            checksums.push((format!("{id}/{f}"), sha256_file(&p).map_err(|e| e.to_string())?));
        } else {
            missing.push(f);
        }
    }
    if !missing.is_empty() {
        return Err(format!("missing {}", missing.join(", ")));
    }
    let modality = match std::fs::read_to_string(dir.join("modality.txt")) {
        Ok(text) => text.parse().map_err(|e: Error| e.to_string())?,
        Err(_) => ModalityConfig::default(),
    };
    let load = |f: &str| load_gray(&dir.join(f)).map_err(|e| e.to_string());
    let (x, y, s) = (load("x.png")?, load("y.png")?, load("s.png")?);
    let gt = load_rgb(&dir.join("gt.png")).map_err(|e| e.to_string())?;
    let (h, w) = (gt.shape()[1], gt.shape()[2]);
    for (name, m) in [("x", &x), ("y", &y), ("s", &s)] {
        if m.shape() != [1, h, w] {
            return Err(format!("{name}.png is {:?}, ground truth is {h}x{w}", &m.shape()[1..]));
        }
    }
    if let Some(bad) = scales.iter().find(|&&k| h % k != 0 || w % k != 0) {
        return Err(format!("{h}x{w} is not divisible by scale {bad}"));
    }
    Ok(SourceSample {
        id: id.to_string(),
        x,
        y,
        s,
        gt,
        modality,
        checksums,
    })
}

fn record(out: &Path, rel: String, sums: &mut BTreeMap<String, String>) -> Result<()> {
    let sum = sha256_file(&out.join(&rel))?;
    sums.insert(rel, sum);
    Ok(())
}

/// Builds the multi-scale dataset and writes the manifest.
///
/// Samples with missing or inconsistent files are skipped and listed in
/// [`DatasetManifest::rejected`]; the build fails only if none remain.
pub fn build_dataset(src: &Path, out: &Path, opts: &DatasetOptions) -> Result<DatasetManifest> {
    if opts.scales.is_empty() || opts.scales.iter().any(|s| !SUPPORTED_SCALES.contains(s)) {
        return Err(Error::InvalidArgument(format!(
            "scales {:?} must be a non-empty subset of {SUPPORTED_SCALES:?}",
            opts.scales
        )));
    }
    let mut scales = opts.scales.clone();
    scales.sort_unstable();
    scales.dedup();

    let entries = std::fs::read_dir(src).map_err(|e| Error::io(src, e))?;
    let mut dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(src, e))?.path();
        if path.is_dir() {
            if let Some(id) = path.file_name().and_then(|n| n.to_str()) {
                dirs.push((id.to_string(), path.clone()));
            }
        }
    }
    dirs.sort();

    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for (id, dir) in &dirs {
        match read_source(dir, id, &scales) {
            Ok(s) => samples.push(s),
            Err(reason) => {
                log::warn!("rejecting sample {id}: {reason}");
                rejected.push((id.clone(), reason));
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable samples in {} ({} rejected)",
            src.display(),
            rejected.len()
        )));
    }

    let mut source_checksums = BTreeMap::new();
    let mut output_checksums = BTreeMap::new();
    let gt_dir = out.join("gt");
    std::fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
    for s in &samples {
        source_checksums.extend(s.checksums.iter().cloned());
        save_rgb(&gt_dir.join(format!("{}.png", s.id)), &s.gt)?;
        record(out, format!("gt/{}.png", s.id), &mut output_checksums)?;
        let (h, w) = (s.gt.shape()[1], s.gt.shape()[2]);
        for &k in &scales {
            let dir = out.join(format!("x{k}")).join(&s.id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (name, m) in [("x", &s.x), ("y", &s.y), ("s", &s.s)] {
                let low = bicubic_resample(m, h / k, w / k)?;
                save_gray(&dir.join(format!("{name}.png")), &low)?;
                record(out, format!("x{k}/{}/{name}.png", s.id), &mut output_checksums)?;
            }
        }
    }

    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        seed: opts.seed,
        split_ratio: opts.split_ratio,
        scales,
        splits: split_ids(&ids, opts.split_ratio, opts.seed)?,
        samples: samples
            .iter()
            .map(|s| SampleEntry {
                id: s.id.clone(),
                modality: s.modality,
                size: [s.gt.shape()[1], s.gt.shape()[2]],
            })
            .collect(),
        source_checksums,
        output_checksums,
        rejected,
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads one sample of a built dataset at `scale`.
pub fn load_sample(root: &Path, manifest: &DatasetManifest, id: &str, scale: usize) -> Result<TriModalSample> {
    let entry = manifest.sample(id)?;
    if !manifest.scales.contains(&scale) {
        return Err(Error::Dataset(format!("scale {scale} was not built (have {:?})", manifest.scales)));
    }
    let dir = root.join(format!("x{scale}")).join(id);
    let sample = TriModalSample {
        id: id.to_string(),
        x: load_gray(&dir.join("x.png"))?,
        y: load_gray(&dir.join("y.png"))?,
        s: load_gray(&dir.join("s.png"))?,
        gt: load_rgb(&root.join("gt").join(format!("{id}.png")))?,
        scale,
        modality: entry.modality,
    };
    sample.validate()?;
    Ok(sample)
}

/// Loads every sample of one split.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: &str, scale: usize) -> Result<Vec<TriModalSample>> {
    manifest
        .splits
        .get(split)?
        .iter()
        .map(|id| load_sample(root, manifest, id, scale))
        .collect()
}
