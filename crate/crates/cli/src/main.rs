use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use tfs_core::metrics::{evaluate_set, EvalOptions, DEFAULT_RANGE};
use tfs_core::pipeline::ablate::{run_ablation, AblationOptions};
use tfs_core::pipeline::checkpoint::Checkpoint;
use tfs_core::pipeline::config::TrainConfig;
use tfs_core::pipeline::dataset::{build_dataset, load_split, DatasetManifest, DatasetOptions, DEFAULT_SPLIT, SUPPORTED_SCALES};
use tfs_core::pipeline::fuse::fuse_files;
use tfs_core::pipeline::synthetic::write_source_tree;
use tfs_core::pipeline::train::{train, TrainOptions, Trainer, TrainingData, LAST_CHECKPOINT};
use tfs_core::{Error, Result};

/// Tri-modal medical image fusion and super-resolution with a conditional
/// denoising diffusion model.
#[derive(Parser, Debug)]
#[command(name = "trifuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Downsample a source tree into per-scale inputs with a seeded split.
    BuildDataset(BuildArgs),
    /// Train on the train split of a dataset.
    Train(TrainArgs),
    /// Fuse three low-resolution modality images with a checkpoint.
    Fuse(FuseArgs),
    /// Score a directory of results against same-named ground truths.
    Eval(EvalArgs),
    /// Train and evaluate the full model and both ablation variants.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Source directory with `<id>/{x,y,s,gt}.png`.
    #[arg(long, required_unless_present = "synthetic")]
    src: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Generate this many synthetic phantoms into `<out>/source` first.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Side length of synthetic phantoms.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = SUPPORTED_SCALES)]
    scales: Vec<usize>,
    /// train,val,test ratio.
    #[arg(long, value_delimiter = ',', num_args = 1, default_values_t = DEFAULT_SPLIT)]
    split: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Overrides for individual config keys; unset flags keep the file/profile value.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given: desk, toy or paper.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Train without the PSF loss.
    #[arg(long)]
    no_psf: bool,
    /// Train without the TMFA block.
    #[arg(long)]
    no_tmfa: bool,
    #[arg(long)]
    tmfa_reduction: Option<usize>,
    #[arg(long)]
    noise_weight: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated channel widths per U-Net level.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    eval_split: Option<String>,
}

impl ConfigArgs {
    /// Config from `--config` or `--profile` (desk when neither), without overrides.
    fn base(&self) -> Result<TrainConfig> {
        let mut text = match &self.config {
            Some(path) => std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?,
            None => String::new(),
        };
        if let Some(p) = &self.profile {
            if self.config.is_some() {
                return Err(Error::InvalidArgument("--profile and --config are exclusive".into()));
            }
            text.push_str(&format!("profile = {p}\n"));
        }
        TrainConfig::parse(&text)
    }

    fn has_base(&self) -> bool {
        self.config.is_some() || self.profile.is_some()
    }

    /// Applies the explicitly given flags to `cfg` and validates the result.
    fn apply(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        let overrides = [
            ("diffusion_steps", self.diffusion_steps.map(|v| v.to_string())),
            ("beta_start", self.beta_start.map(|v| v.to_string())),
            ("beta_end", self.beta_end.map(|v| v.to_string())),
            ("lambda1", self.lambda1.map(|v| v.to_string())),
            ("lambda2", self.lambda2.map(|v| v.to_string())),
            ("psf_enabled", self.no_psf.then(|| "false".into())),
            ("tmfa_enabled", self.no_tmfa.then(|| "false".into())),
            ("tmfa_reduction", self.tmfa_reduction.map(|v| v.to_string())),
            ("noise_weight", self.noise_weight.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("total_steps", self.total_steps.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("widths", self.widths.clone()),
            ("scale", self.scale.map(|v| v.to_string())),
            ("checkpoint_every", self.checkpoint_every.map(|v| v.to_string())),
            ("eval_split", self.eval_split.clone()),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v).map_err(|message| Error::Config {
                    line: 0,
                    message: format!("--{}: {message}", key.replace('_', "-")),
                })?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&self) -> Result<TrainConfig> {
        self.apply(self.base()?)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory built by `build-dataset`.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for checkpoints and the loss log.
    #[arg(long)]
    run_dir: PathBuf,
    /// Continue from `<run-dir>/last.ckpt`.
    #[arg(long)]
    resume: bool,
    /// Continue from this checkpoint.
    #[arg(long, conflicts_with = "resume")]
    resume_from: Option<PathBuf>,
    /// Print every n-th loss line.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    s: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output RGB PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Pixel value range of the images.
    #[arg(long, default_value_t = DEFAULT_RANGE)]
    range: f64,
    /// Skip files present on only one side instead of failing.
    #[arg(long)]
    allow_partial: bool,
    /// External command printing one LPIPS value for `<result> <gt>`.
    #[arg(long)]
    lpips_command: Option<String>,
    /// Write `<report>.json` and `<report>.txt`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lpips_command: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn build(args: BuildArgs) -> Result<()> {
    let src = match (args.synthetic, args.src) {
        (Some(n), None) => {
            let dir = args.out.join("source");
            write_source_tree(&dir, n, args.size, args.seed)?;
            dir
        }
        (None, Some(src)) => src,
        (Some(_), Some(_)) => return Err(Error::InvalidArgument("--src and --synthetic are exclusive".into())),
        (None, None) => unreachable!("clap requires one of them"),
    };
    let split_ratio: [usize; 3] = args
        .split
        .try_into()
        .map_err(|v: Vec<usize>| Error::InvalidArgument(format!("--split needs three values, got {}", v.len())))?;
    let opts = DatasetOptions {
        scales: args.scales,
        split_ratio,
        seed: args.seed,
    };
    let m = build_dataset(&src, &args.out, &opts)?;
    println!(
        "{} samples: train {}, val {}, test {}; {} rejected",
        m.samples.len(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len(),
        m.rejected.len()
    );
    for (id, reason) in &m.rejected {
        println!("rejected {id}: {reason}");
    }
    Ok(())
}

fn load_train_split(dataset: &Path, split: &str, scale: usize) -> Result<Vec<tfs_core::pipeline::dataset::TriModalSample>> {
    let manifest = DatasetManifest::load(dataset)?;
    let root = if dataset.is_dir() { dataset } else { dataset.parent().unwrap_or(Path::new(".")) };
    load_split(root, &manifest, split, scale)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let from = args.resume_from.clone().or_else(|| args.resume.then(|| args.run_dir.join(LAST_CHECKPOINT)));
    let trainer = match from {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            let base = if args.config.has_base() { args.config.base()? } else { ck.config()? };
            info!("resuming from {} at step {}", path.display(), ck.step);
            Trainer::resume(&ck, Some(args.config.apply(base)?))?
        }
        None => Trainer::new(args.config.resolve()?)?,
    };
    let samples = load_train_split(&args.dataset, "train", trainer.config().scale)?;
    let data = TrainingData::from_samples(&samples)?;
    info!(
        "training {} parameters on {} samples of {:?}",
        trainer.net().count_parameters(),
        data.len(),
        data.size()
    );
    let every = args.log_every.max(1);
    let outcome = train(trainer, &data, &TrainOptions { run_dir: Some(args.run_dir.clone()) }, |r| {
        if r.step % every == 0 {
            println!("{}", r.to_line());
        }
    })?;
    println!(
        "finished at step {}; checkpoint {}",
        outcome.trainer.step(),
        args.run_dir.join(LAST_CHECKPOINT).display()
    );
    Ok(())
}

fn run_fuse(args: FuseArgs) -> Result<()> {
    let out = fuse_files(&args.checkpoint, &args.x, &args.y, &args.s, args.seed, &args.out)?;
    let total: f64 = out.step_times.iter().map(|d| d.as_secs_f64()).sum();
    println!(
        "wrote {} ({}x{}) in {} steps, {:.3} s",
        args.out.display(),
        out.image.shape()[2],
        out.image.shape()[1],
        out.step_times.len(),
        total
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        range: args.range,
        allow_partial: args.allow_partial,
        lpips_command: args.lpips_command,
    };
    let report = evaluate_set(&args.results, &args.gt, &opts)?;
    print!("{}", report.to_table());
    if let Some(stem) = args.report {
        report.write(&stem)?;
    }
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let train_samples = load_train_split(&args.dataset, "train", cfg.scale)?;
    let eval_samples = load_train_split(&args.dataset, &cfg.eval_split, cfg.scale)?;
    let opts = AblationOptions {
        lpips_command: args.lpips_command,
    };
    let total = cfg.total_steps;
    let summary = run_ablation(&cfg, &train_samples, &eval_samples, &args.out, &opts, |name, step| {
        if step == total || step % 500 == 0 {
            info!("{name}: step {step}/{total}");
        }
    })?;
    print!("{}", summary.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildDataset(a) => build(a),
        Command::Train(a) => run_train(a),
        Command::Fuse(a) => run_fuse(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[E_USAGE]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
