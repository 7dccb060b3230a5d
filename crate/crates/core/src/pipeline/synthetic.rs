//! Synthetic tri-modal phantoms for self-contained tests and demos.
//!
//! Not medical data: each sample is a few soft-edged ellipses whose contrast
//! differs per modality. The ground-truth fusion is the per-pixel maximum of
//! the three high-resolution modalities, replicated into three channels.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::dataset::{ModalityConfig, TriModalSample};
use super::image_io::{save_gray, save_rgb};
use super::resample::bicubic_resample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One high-resolution phantom: three `[1,H,W]` modalities and a `[3,H,W]` fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub x: Tensor,
    pub y: Tensor,
    pub s: Tensor,
    pub gt: Tensor,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    levels: [f64; 3],
}

impl Ellipse {
    /// Soft membership in `[0, 1]`, one pixel of edge ramp.
    fn weight(&self, y: f64, x: f64, edge: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.angle.sin_cos();
        let u = (dx * cos + dy * sin) / self.rx;
        let v = (-dx * sin + dy * cos) / self.ry;
        let r = (u * u + v * v).sqrt();
        let scale = self.rx.min(self.ry);
        ((1.0 - r) * scale / edge + 0.5).clamp(0.0, 1.0)
    }
}

/// Fusion target: per-pixel maximum of the modalities in every channel.
pub fn max_fusion(x: &Tensor, y: &Tensor, s: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() || x.shape() != s.shape() {
        return Err(Error::shape("max_fusion", format!("{:?} {:?} {:?}", x.shape(), y.shape(), s.shape())));
    }
    let plane: Vec<f64> = x
        .data()
        .iter()
        .zip(y.data())
        .zip(s.data())
        .map(|((a, b), c)| a.max(*b).max(*c))
        .collect();
    let (h, w) = (x.shape()[x.shape().len() - 2], x.shape()[x.shape().len() - 1]);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new(&[3, h, w], data)
}

/// Draws a `size × size` phantom. Intensities are multiples of 1/255 only
/// after quantisation; the tensors themselves are continuous.
pub fn phantom(size: usize, rng: &mut impl Rng) -> Result<Phantom> {
    if size < 4 {
        return Err(Error::InvalidArgument(format!("phantom size {size} is below 4")));
    }
    let n = size as f64;
    // Outer "head" ellipse, then a few interior structures.
    let mut shapes = vec![Ellipse {
        cy: n / 2.0 + rng.gen_range(-0.05..0.05) * n,
        cx: n / 2.0 + rng.gen_range(-0.05..0.05) * n,
        ry: rng.gen_range(0.36..0.45) * n,
        rx: rng.gen_range(0.30..0.40) * n,
        angle: rng.gen_range(-0.3..0.3),
        levels: [0.35, 0.25, 0.05],
    }];
    let inner = rng.gen_range(2..=4);
    for _ in 0..inner {
        shapes.push(Ellipse {
            cy: n / 2.0 + rng.gen_range(-0.2..0.2) * n,
            cx: n / 2.0 + rng.gen_range(-0.2..0.2) * n,
            ry: rng.gen_range(0.07..0.16) * n,
            rx: rng.gen_range(0.07..0.16) * n,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            levels: [rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.6), rng.gen_range(0.1..0.6)],
        });
    }
    let edge = (n / 16.0).max(1.0);
    let mut planes = [vec![0.0; size * size], vec![0.0; size * size], vec![0.0; size * size]];
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            for e in &shapes {
                let wgt = e.weight(y, x, edge);
                for (m, plane) in planes.iter_mut().enumerate() {
                    plane[i * size + j] += wgt * e.levels[m];
                }
            }
        }
    }
    let [px, py, ps] = planes.map(|p| Tensor::new(&[1, size, size], p.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()));
    let (x, y, s) = (px?, py?, ps?);
    let gt = max_fusion(&x, &y, &s)?;
    Ok(Phantom { x, y, s, gt })
}

/// Writes `count` phantoms as `<dir>/sample_NNN/{x,y,s,gt}.png` plus `modality.txt`.
pub fn write_source_tree(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs = ModalityConfig::ALL;
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let p = phantom(size, &mut rng)?;
        let id = format!("sample_{i:03}");
        let sd = dir.join(&id);
        std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        save_gray(&sd.join("x.png"), &p.x)?;
        save_gray(&sd.join("y.png"), &p.y)?;
        save_gray(&sd.join("s.png"), &p.s)?;
        save_rgb(&sd.join("gt.png"), &p.gt)?;
        let m = sd.join("modality.txt");
        std::fs::write(&m, format!("{}\n", configs[i % configs.len()])).map_err(|e| Error::io(&m, e))?;
        ids.push(id);
    }
    Ok(ids)
}

/// `count` in-memory samples: phantoms of side `size` whose modalities are
/// bicubically downsampled by `scale`.
pub fn toy_samples(count: usize, size: usize, scale: usize, seed: u64) -> Result<Vec<TriModalSample>> {
    if scale == 0 || !size.is_multiple_of(scale) {
        return Err(Error::InvalidArgument(format!("size {size} is not divisible by scale {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lr = size / scale;
    (0..count)
        .map(|i| {
            let p = phantom(size, &mut rng)?;
            let sample = TriModalSample {
                id: format!("toy_{i:03}"),
                x: bicubic_resample(&p.x, lr, lr)?,
                y: bicubic_resample(&p.y, lr, lr)?,
                s: bicubic_resample(&p.s, lr, lr)?,
                gt: p.gt,
                scale,
                modality: ModalityConfig::ALL[i % ModalityConfig::ALL.len()],
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_values_and_fusion() {
        let p = phantom(32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.gt.shape(), &[3, 32, 32]);
        for t in [&p.x, &p.y, &p.s, &p.gt] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for i in 0..32 * 32 {
            let m = p.x.data()[i].max(p.y.data()[i]).max(p.s.data()[i]);
            for c in 0..3 {
                assert_eq!(p.gt.data()[c * 1024 + i], m);
            }
        }
        assert!(p.gt.data().iter().any(|&v| v > 0.2));
    }

    #[test]
    fn phantoms_are_seeded() {
        let a = phantom(16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = phantom(16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let c = phantom(16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn source_tree_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let ids = write_source_tree(tmp.path(), 3, 16, 4).unwrap();
        assert_eq!(ids.len(), 3);
        for id in &ids {
            for f in ["x.png", "y.png", "s.png", "gt.png", "modality.txt"] {
                assert!(tmp.path().join(id).join(f).is_file());
            }
        }
    }
}
