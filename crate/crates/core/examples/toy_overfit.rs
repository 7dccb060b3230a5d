//! Trains on four synthetic phantoms and reports fusion quality on them.
//!
//! `cargo run --release -p tfs-core --example toy_overfit -- [steps] [seed] [key=value ...]`

use std::time::Instant;

use tfs_core::metrics::{psnr, ssim_metric};
use tfs_core::pipeline::config::TrainConfig;
use tfs_core::pipeline::fuse::Fuser;
use tfs_core::pipeline::image_io::quantize;
use tfs_core::pipeline::synthetic::toy_samples;
use tfs_core::pipeline::train::{smoothed_loss, train, TrainOptions, Trainer, TrainingData};

fn main() -> tfs_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut text = format!("profile = toy\ntotal_steps = {steps}\nseed = {seed}\n");
    for kv in args.iter().skip(3) {
        text.push_str(kv);
        text.push('\n');
    }
    let config = TrainConfig::parse(&text)?;
    let samples = toy_samples(4, 32, 4, seed)?;
    let data = TrainingData::from_samples(&samples)?;
    let start = Instant::now();
    let out = train(Trainer::new(config.clone())?, &data, &TrainOptions::default(), |r| {
        if r.step % 100 == 0 {
            println!("{}", r.to_line());
        }
    })?;
    println!("trained in {:.1}s, smoothed loss {:.4}", start.elapsed().as_secs_f64(), smoothed_loss(&out.log, 100).unwrap());
    if std::env::var_os("TOY_DIAG").is_some() {
        let init = Trainer::new(config.clone())?;
        for ((name, a), (_, b)) in init.net().params().iter().zip(out.trainer.net().params().iter()) {
            let rms = |v: &mut dyn Iterator<Item = f64>, n: usize| (v.map(|x| x * x).sum::<f64>() / n as f64).sqrt();
            let n = a.numel();
            let moved = rms(&mut a.data().iter().zip(b.data()).map(|(x, y)| x - y), n);
            println!("  {name:32} n={n:6} init_rms={:.4} moved_rms={moved:.4}", rms(&mut a.data().iter().copied(), n));
        }
    }
    let fuser = Fuser::from_parts(out.trainer.net().clone(), &config)?;
    for s in &samples {
        let f = fuser.fuse(&s.x, &s.y, &s.s, seed)?;
        let q = |t: &tfs_core::Tensor| t.map(|v| quantize(v) as f64);
        let (p, g) = (q(&f.image), q(&s.gt));
        let up = tfs_core::diffusion::upsample_modalities(&s.x, &s.y, &s.s, s.scale)?;
        let n = up.numel() / 3;
        let plane: Vec<f64> = (0..n).map(|i| up.data()[i].max(up.data()[n + i]).max(up.data()[2 * n + i])).collect();
        let naive = tfs_core::Tensor::new(s.gt.shape(), plane.repeat(3))?;
        println!("  bicubic max baseline PSNR {:.2}", psnr(&q(&naive), &g, 255.0)?);
        println!("{}: PSNR {:.2} SSIM {:.4}", s.id, psnr(&p, &g, 255.0)?, ssim_metric(&p, &g, 255.0)?);
    }
    Ok(())
}
