use std::path::Path;
use std::process::{Command, Output};

fn tfs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trifuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tfs(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts a failure with exactly one `error[CODE]: text` line on stderr.
fn fails_with(args: &[&str], code: &str) -> String {
    let out = tfs(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    assert!(lines[0].starts_with(&format!("error[{code}]: ")), "stderr: {err}");
    lines[0].to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 10] = [
    "--profile",
    "toy",
    "--widths",
    "4,4,8,8",
    "--diffusion-steps",
    "4",
    "--scale",
    "4",
    "--checkpoint-every",
    "2",
];

fn dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = ok(&["build-dataset", "--synthetic", "6", "--size", "32", "--split", "4,1,1", "--seed", "3", "--out", s(&data)]);
    assert!(out.starts_with("6 samples: train 4, val 1, test 1"), "{out}");
    data
}

fn train_args<'a>(data: &'a Path, run: &'a Path, steps: &'a str) -> Vec<&'a str> {
    let mut a = vec!["train", "--dataset", s(data), "--run-dir", s(run), "--total-steps", steps, "--log-every", "1"];
    a.extend(TINY);
    a
}

#[test]
fn build_train_resume_fuse_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    assert!(data.join("manifest.json").is_file());

    // Uninterrupted run of 4 steps versus 2 + resume to 4.
    let full = tmp.path().join("full");
    let printed = ok(&train_args(&data, &full, "4"));
    assert_eq!(printed.lines().filter(|l| l.split_whitespace().count() == 4).count(), 4);
    let split = tmp.path().join("split");
    ok(&train_args(&data, &split, "2"));
    let mut resume = train_args(&data, &split, "4");
    resume.push("--resume");
    ok(&resume);
    let log = |d: &Path| std::fs::read_to_string(d.join("loss.log")).unwrap();
    assert_eq!(log(&full).lines().count(), 4);
    assert_eq!(log(&full), log(&split));
    assert_eq!(
        std::fs::read(full.join("last.ckpt")).unwrap(),
        std::fs::read(split.join("last.ckpt")).unwrap()
    );
    assert!(full.join("step_00000002.ckpt").is_file());

    // Fuse one sample twice with the same seed and once with another.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let id = manifest["splits"]["test"][0].as_str().unwrap().to_string();
    let lr = data.join("x4").join(&id);
    let ck = full.join("last.ckpt");
    let results = tmp.path().join("results");
    let fuse = |seed: &str, out: &Path| {
        ok(&[
            "fuse", "--checkpoint", s(&ck), "--x", s(&lr.join("x.png")), "--y", s(&lr.join("y.png")), "--s",
            s(&lr.join("s.png")), "--seed", seed, "--out", s(out),
        ])
    };
    let a = results.join(format!("{id}.png"));
    let b = tmp.path().join("again.png");
    fuse("5", &a);
    fuse("5", &b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let img = image::open(&a).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    // Evaluate against the ground-truth directory, tolerating the other ids.
    let report = tmp.path().join("report");
    let table = ok(&["eval", "--results", s(&results), "--gt", s(&data.join("gt")), "--allow-partial", "--report", s(&report)]);
    assert!(table.lines().next().unwrap().contains("PSNR"));
    assert!(table.contains(&id));
    assert!(report.with_extension("json").is_file());
    fails_with(&["eval", "--results", s(&results), "--gt", s(&data.join("gt"))], "E_UNMATCHED");
}

#[test]
fn ablate_writes_one_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("ablation");
    let mut args = vec!["ablate", "--dataset", s(&data), "--out", s(&out), "--total-steps", "2", "--eval-split", "val"];
    args.extend(TINY);
    let table = ok(&args);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["metric", "baseline", "no-tmfa", "no-psf"]);
    assert!(out.join("ablation.json").is_file());
    assert!(out.join("no-psf").join("report.txt").is_file());
}

#[test]
fn failures_are_single_coded_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    let png = tmp.path().join("nope.png");
    fails_with(
        &["fuse", "--checkpoint", s(&missing), "--x", s(&png), "--y", s(&png), "--s", s(&png), "--out", s(&png)],
        "E_IO",
    );
    fails_with(&["fuse", "--checkpoint"], "E_USAGE");
    fails_with(&["no-such-command"], "E_USAGE");
    let run = tmp.path().join("run");
    let mut bad = train_args(tmp.path(), &run, "2");
    bad.extend(["--lambda1", "1.5"]);
    fails_with(&bad, "E_CONFIG");
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "diffusion_steps = 10\nnot_a_key = 1\n").unwrap();
    let line = fails_with(
        &["train", "--dataset", s(tmp.path()), "--run-dir", s(&run), "--config", s(&cfg)],
        "E_CONFIG",
    );
    assert!(line.contains("line 2"), "{line}");
    fails_with(&["train", "--dataset", s(tmp.path()), "--run-dir", s(&run)], "E_IO");
    let junk = tmp.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    fails_with(
        &["fuse", "--checkpoint", s(&junk), "--x", s(&png), "--y", s(&png), "--s", s(&png), "--out", s(&png)],
        "E_CHECKPOINT",
    );
}

#[test]
fn odd_sizes_get_a_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let run = tmp.path().join("run");
    ok(&train_args(&data, &run, "1"));
    let img = image::GrayImage::from_pixel(3, 3, image::Luma([90]));
    let p = tmp.path().join("odd.png");
    img.save(&p).unwrap();
    let line = fails_with(
        &[
            "fuse", "--checkpoint", s(&run.join("last.ckpt")), "--x", s(&p), "--y", s(&p), "--s", s(&p), "--out",
            s(&tmp.path().join("o.png")),
        ],
        "E_ARG",
    );
    assert!(line.contains("multiples of 2"), "{line}");
}
