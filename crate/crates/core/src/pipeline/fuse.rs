//! Inference: run the reverse chain of a trained network on one sample.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::image_io::{load_gray, save_rgb};
use crate::diffusion::{sample_fusion_with, NoiseSchedule, DEFAULT_SCALES};
use crate::error::{Error, Result};
use crate::network::FusionNet;
use crate::tensor::Tensor;

/// A trained network with its schedule and scale, ready for sampling.
#[derive(Debug, Clone)]
pub struct Fuser {
    pub net: FusionNet,
    pub sched: NoiseSchedule,
    pub scale: usize,
}

/// Result of one fusion with per-step timings.
#[derive(Debug, Clone)]
pub struct FuseOutput {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub step_times: Vec<Duration>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Fuser {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.config()?;
        let mut net = FusionNet::new(config.net_config(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        net.params_mut().load_flat(&ck.params)?;
        Fuser::from_parts(net, &config)
    }

    pub fn from_parts(net: FusionNet, config: &TrainConfig) -> Result<Self> {
        Ok(Fuser {
            net,
            sched: config.schedule()?,
            scale: config.scale,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Fuser::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Rejects low-resolution sizes whose upscaled size the U-Net cannot take.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.net.size_multiple();
        let k = m / gcd(m, self.scale);
        if h == 0 || w == 0 || !h.is_multiple_of(k) || !w.is_multiple_of(k) {
            let round = |v: usize| v.max(1).div_ceil(k) * k;
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} at scale {} gives {}x{}, but the network needs multiples of {m}; \
                 low-resolution sides must be multiples of {k} (e.g. {}x{})",
                self.scale,
                h * self.scale,
                w * self.scale,
                round(h),
                round(w)
            )));
        }
        Ok(())
    }

    /// Fuses `[1,h,w]` modalities into a `[3, h·scale, w·scale]` image.
    pub fn fuse(&self, x: &Tensor, y: &Tensor, s: &Tensor, seed: u64) -> Result<FuseOutput> {
        let dims = x.shape();
        if dims.len() != 3 || dims[0] != 1 {
            return Err(Error::shape("fuse", format!("expected [1,h,w] modalities, got {dims:?}")));
        }
        self.check_input_size(dims[1], dims[2])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut step_times = Vec::with_capacity(self.sched.steps());
        let mut last = Instant::now();
        let image = sample_fusion_with(x, y, s, self.scale, &DEFAULT_SCALES, &self.net, &self.sched, &mut rng, |t| {
            let now = Instant::now();
            let dt = now - last;
            last = now;
            log::debug!("reverse step t={t} took {:.3} ms", dt.as_secs_f64() * 1e3);
            step_times.push(dt);
        })?;
        let total: Duration = step_times.iter().sum();
        log::info!(
            "fused {}x{} in {} steps, {:.3} s total, {:.3} ms/step",
            image.shape()[1],
            image.shape()[2],
            step_times.len(),
            total.as_secs_f64(),
            total.as_secs_f64() * 1e3 / step_times.len().max(1) as f64
        );
        Ok(FuseOutput { image, step_times })
    }
}

/// Loads a checkpoint and three grayscale PNGs, fuses them and writes an RGB PNG.
pub fn fuse_files(checkpoint: &Path, x: &Path, y: &Path, s: &Path, seed: u64, out: &Path) -> Result<FuseOutput> {
    let fuser = Fuser::load(checkpoint)?;
    let (x, y, s) = (load_gray(x)?, load_gray(y)?, load_gray(s)?);
    let result = fuser.fuse(&x, &y, &s, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_rgb(out, &result.image)?;
    Ok(result)
}
