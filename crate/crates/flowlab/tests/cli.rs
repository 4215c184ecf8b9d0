//! End-to-end tests through the `flowlab` binary: exit codes, file layout,
//! and determinism of each subcommand. Training fixtures are built once per
//! test process and shared.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn flowlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args(args)
        .env_remove("FLOWLAB_OUT")
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code_of(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    run_dir: PathBuf,
}

impl Fixture {
    fn checkpoint(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }
}

fn train_fixture(config_body: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = dir.path().join("run.json");
    let body = config_body.replace("OUT_DIR", run_dir.to_str().unwrap());
    std::fs::write(&config, body).unwrap();
    let out = flowlab(&["train", config.to_str().unwrap()]);
    assert_eq!(code_of(&out), 0, "fixture training failed: {}", stderr_of(&out));
    Fixture { dir, run_dir }
}

/// Quick 2-D flow run with a mid-run checkpoint, shared across tests.
fn toy_run() -> &'static Fixture {
    static RUN: OnceLock<Fixture> = OnceLock::new();
    RUN.get_or_init(|| {
        train_fixture(
            r#"{
                "dataset": {"kind": "toy2d", "variant": "eight_gaussians", "n": 256},
                "path": {"kind": "linear_ot"},
                "train": {"epochs": 4, "lr": 0.005, "batch_size": 64,
                          "checkpoint_every": 2},
                "output_dir": "OUT_DIR",
                "seed": 11
            }"#,
        )
    })
}

/// Small denoise-mode image run, shared across tests.
fn phantom_run() -> &'static Fixture {
    static RUN: OnceLock<Fixture> = OnceLock::new();
    RUN.get_or_init(|| {
        train_fixture(
            r#"{
                "dataset": {"kind": "phantoms", "n": 48, "size": 8},
                "path": {"kind": "linear_ot"},
                "train": {"epochs": 2, "lr": 0.005, "batch_size": 16,
                          "mode": "denoise", "noise_power": 0.1},
                "output_dir": "OUT_DIR",
                "seed": 5
            }"#,
        )
    })
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn missing_config_exits_one_naming_the_path() {
    let out = flowlab(&["train", "/no/such/config.json"]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("/no/such/config.json"), "{}", stderr_of(&out));
}

#[test]
fn bad_usage_exits_one() {
    let out = flowlab(&["sample"]);
    assert_eq!(code_of(&out), 1);
    let out = flowlab(&["frobnicate"]);
    assert_eq!(code_of(&out), 1);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code_of(&flowlab(&["--help"])), 0);
    assert_eq!(code_of(&flowlab(&["--version"])), 0);
}

#[test]
fn train_writes_checkpoints_log_resolved_config_and_manifest() {
    let run = toy_run();
    for name in [
        "resolved_config.json",
        "train_log.jsonl",
        "manifest.json",
        "checkpoint_0002.ckpt",
        "checkpoint_0004.ckpt",
    ] {
        assert!(run.run_dir.join(name).exists(), "missing {name}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&read(&run.run_dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 11);
    let digests = manifest["checkpoints"].as_object().unwrap();
    assert_eq!(digests.len(), 2);
    for digest in digests.values() {
        let hex = digest.as_str().unwrap();
        assert_eq!(hex.len(), 64);
        assert!(hex.chars().all(|c| c.is_ascii_hexdigit()));
    }

    // One header line plus one record per epoch.
    let log = read(&run.run_dir.join("train_log.jsonl"));
    assert_eq!(log.lines().count(), 5);

    // The resolved config reproduces the run byte for byte.
    let rerun_dir = tempfile::tempdir().unwrap();
    let resolved: serde_json::Value =
        serde_json::from_str(&read(&run.run_dir.join("resolved_config.json"))).unwrap();
    let mut patched = resolved.clone();
    patched["output_dir"] = serde_json::json!(rerun_dir.path().join("run"));
    let cfg2 = rerun_dir.path().join("rerun.json");
    std::fs::write(&cfg2, serde_json::to_string(&patched).unwrap()).unwrap();
    let out = flowlab(&["train", cfg2.to_str().unwrap()]);
    assert_eq!(code_of(&out), 0, "{}", stderr_of(&out));
    let a = std::fs::read(run.checkpoint("checkpoint_0004.ckpt")).unwrap();
    let b = std::fs::read(rerun_dir.path().join("run/checkpoint_0004.ckpt")).unwrap();
    assert!(a == b, "retraining from the resolved config changed the checkpoint");
}

#[test]
fn sample_works_at_one_and_fifty_steps_and_is_seed_deterministic() {
    let run = toy_run();
    let ckpt = run.checkpoint("checkpoint_0004.ckpt");
    let dir = tempfile::tempdir().unwrap();

    for (steps, sub) in [("1", "a"), ("50", "b")] {
        let out_dir = dir.path().join(sub);
        let out = flowlab(&[
            "sample",
            ckpt.to_str().unwrap(),
            "--steps",
            steps,
            "--count",
            "8",
            "--seed",
            "3",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code_of(&out), 0, "steps={steps}: {}", stderr_of(&out));
        let csv = read(&out_dir.join("samples.csv"));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("x,y,label"));
        assert_eq!(lines.count(), 8);
        assert!(out_dir.join("manifest.json").exists());
    }

    // Same seed, same bytes.
    let out_dir = dir.path().join("c");
    let args = [
        "sample",
        ckpt.to_str().unwrap(),
        "--steps",
        "50",
        "--count",
        "8",
        "--seed",
        "3",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ];
    assert_eq!(code_of(&flowlab(&args)), 0);
    assert_eq!(
        read(&dir.path().join("b/samples.csv")),
        read(&out_dir.join("samples.csv"))
    );
}

#[test]
fn sample_writes_trajectories_on_request() {
    let run = toy_run();
    let dir = tempfile::tempdir().unwrap();
    let out = flowlab(&[
        "sample",
        run.checkpoint("checkpoint_0004.ckpt").to_str().unwrap(),
        "--steps",
        "4",
        "--count",
        "3",
        "--trajectories",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 0, "{}", stderr_of(&out));
    let csv = read(&dir.path().join("trajectories.csv"));
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("sample_id,step,t,"), "{header}");
    // 3 samples, 5 recorded states each (initial plus one per step).
    assert_eq!(lines.count(), 15);
}

#[test]
fn sample_rejects_conditioning_the_checkpoint_lacks() {
    let run = toy_run();
    let ckpt = run.checkpoint("checkpoint_0004.ckpt");
    let dir = tempfile::tempdir().unwrap();
    let out = flowlab(&[
        "sample",
        ckpt.to_str().unwrap(),
        "--class",
        "3",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("class"), "{}", stderr_of(&out));
}

#[test]
fn sample_rejects_diffusion_samplers_on_flow_checkpoints() {
    let run = toy_run();
    let dir = tempfile::tempdir().unwrap();
    let out = flowlab(&[
        "sample",
        run.checkpoint("checkpoint_0004.ckpt").to_str().unwrap(),
        "--family",
        "ddim",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 1);
}

#[test]
fn eval_builds_the_full_comparison_grid() {
    let run = toy_run();
    let dir = tempfile::tempdir().unwrap();
    let out = flowlab(&[
        "eval",
        run.checkpoint("checkpoint_0002.ckpt").to_str().unwrap(),
        run.checkpoint("checkpoint_0004.ckpt").to_str().unwrap(),
        "--gen",
        "eight_gaussians:256",
        "--steps",
        "1,10,50",
        "--count",
        "64",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 0, "{}", stderr_of(&out));

    let csv = read(&dir.path().join("eval_report.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("checkpoint,metric,value,n_real,n_generated,config_digest")
    );
    let rows: Vec<&str> = lines.collect();
    // 2 checkpoints x 3 step counts x 2 default metrics.
    assert_eq!(rows.len(), 12);
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 6, "{row}");
        let value: f64 = fields[2].parse().unwrap();
        assert!(value.is_finite(), "{row}");
        assert_eq!(fields[4], "64", "{row}");
    }
    assert_eq!(rows.iter().filter(|r| r.starts_with("checkpoint_0002,")).count(), 6);

    for stem in ["checkpoint_0002", "checkpoint_0004"] {
        let report: serde_json::Value =
            serde_json::from_str(&read(&dir.path().join(format!("eval_{stem}.json")))).unwrap();
        assert_eq!(report["entries"].as_array().unwrap().len(), 6);
        assert!(report["provenance"]["checkpoint"]
            .as_str()
            .unwrap()
            .starts_with(&format!("{stem}@sha256:")));
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("manifest.json"))).unwrap();
    assert_eq!(manifest["checkpoints"].as_object().unwrap().len(), 2);
}

#[test]
fn eval_is_deterministic_across_reruns() {
    let run = toy_run();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let out = flowlab(&[
            "eval",
            run.checkpoint("checkpoint_0004.ckpt").to_str().unwrap(),
            "--gen",
            "eight_gaussians:128",
            "--steps",
            "5",
            "--count",
            "32",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code_of(&out), 0, "{}", stderr_of(&out));
    }
    assert_eq!(
        read(&dirs[0].path().join("eval_report.csv")),
        read(&dirs[1].path().join("eval_report.csv"))
    );
    assert_eq!(
        read(&dirs[0].path().join("eval_checkpoint_0004.json")),
        read(&dirs[1].path().join("eval_checkpoint_0004.json"))
    );
}

#[test]
fn eval_requires_a_reference_dataset() {
    let run = toy_run();
    let dir = tempfile::tempdir().unwrap();
    let out = flowlab(&[
        "eval",
        run.checkpoint("checkpoint_0004.ckpt").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("--data or --gen"), "{}", stderr_of(&out));
}

#[test]
fn eval_kde_curves_integrate_to_one() {
    let run = phantom_run();
    let dir = tempfile::tempdir().unwrap();
    let out = flowlab(&[
        "eval",
        run.checkpoint("checkpoint_0002.ckpt").to_str().unwrap(),
        "--gen",
        "phantoms:32:8",
        "--steps",
        "1,4",
        "--metrics",
        "intensity_shift",
        "--count",
        "8",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 0, "{}", stderr_of(&out));

    let csv = read(&dir.path().join("kde_checkpoint_0002.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("grid,real_density,generated_density"));
    let mut grid = Vec::new();
    let mut real = Vec::new();
    let mut gen = Vec::new();
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        grid.push(f[0]);
        real.push(f[1]);
        gen.push(f[2]);
    }
    assert_eq!(grid.len(), 257);
    let integral = |y: &[f64]| -> f64 {
        (1..grid.len())
            .map(|i| 0.5 * (y[i] + y[i - 1]) * (grid[i] - grid[i - 1]))
            .sum()
    };
    let (ir, ig) = (integral(&real), integral(&gen));
    assert!((ir - 1.0).abs() < 0.01, "real KDE integrates to {ir}");
    assert!((ig - 1.0).abs() < 0.01, "generated KDE integrates to {ig}");
}

#[test]
fn denoise_reports_per_image_quality_and_writes_outputs() {
    let run = phantom_run();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = run.checkpoint("checkpoint_0002.ckpt");
    let args = [
        "denoise",
        ckpt.to_str().unwrap(),
        "--gen",
        "phantoms:40:8",
        "--noise-power",
        "0.1",
        "--steps",
        "10",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ];
    let out = flowlab(&args);
    assert_eq!(code_of(&out), 0, "{}", stderr_of(&out));

    let csv = read(&dir.path().join("denoise_metrics.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("image,psnr_noisy,ssim_noisy,snr_noisy,psnr_denoised,ssim_denoised,snr_denoised")
    );
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 7, "{row}");
        for v in &fields[1..] {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{row}");
        }
    }

    let index: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("denoised/index.json"))).unwrap();
    assert_eq!(index["items"].as_array().unwrap().len(), rows.len());
    assert!(dir.path().join("denoised/img_00000.pgm").exists());

    // Same invocation, same metric bytes.
    let dir2 = tempfile::tempdir().unwrap();
    let mut args2: Vec<&str> = args.to_vec();
    let pos = args2.len() - 1;
    let dir2_str = dir2.path().to_str().unwrap().to_string();
    args2[pos] = &dir2_str;
    assert_eq!(code_of(&flowlab(&args2)), 0);
    assert_eq!(csv, read(&dir2.path().join("denoise_metrics.csv")));
}

#[test]
fn denoise_rejects_generation_checkpoints_and_bad_noise_flags() {
    let toy = toy_run();
    let phantoms = phantom_run();
    let dir = tempfile::tempdir().unwrap();

    let out = flowlab(&[
        "denoise",
        toy.checkpoint("checkpoint_0004.ckpt").to_str().unwrap(),
        "--gen",
        "phantoms:8:8",
        "--noise-power",
        "0.1",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("denoise"), "{}", stderr_of(&out));

    // Neither corruption source given.
    let out = flowlab(&[
        "denoise",
        phantoms.checkpoint("checkpoint_0002.ckpt").to_str().unwrap(),
        "--gen",
        "phantoms:8:8",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("--noisy"), "{}", stderr_of(&out));
}

#[test]
fn out_dir_falls_back_to_the_environment() {
    let run = toy_run();
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args([
            "sample",
            run.checkpoint("checkpoint_0004.ckpt").to_str().unwrap(),
            "--steps",
            "2",
            "--count",
            "4",
        ])
        .env("FLOWLAB_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("samples.csv").exists());

    // No flag and no environment variable: a config error.
    let out = flowlab(&[
        "sample",
        run.checkpoint("checkpoint_0004.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("FLOWLAB_OUT"), "{}", stderr_of(&out));
}

#[test]
fn eval_accepts_files_datasets() {
    let run = toy_run();
    let dir = tempfile::tempdir().unwrap();

    // Dump a reference set through the sample command, then evaluate
    // against that file.
    let data_dir = dir.path().join("data");
    let out = flowlab(&[
        "sample",
        run.checkpoint("checkpoint_0004.ckpt").to_str().unwrap(),
        "--steps",
        "50",
        "--count",
        "32",
        "--out-dir",
        data_dir.to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 0, "{}", stderr_of(&out));

    let eval_dir = dir.path().join("eval");
    let out = flowlab(&[
        "eval",
        run.checkpoint("checkpoint_0004.ckpt").to_str().unwrap(),
        "--data",
        data_dir.join("samples.csv").to_str().unwrap(),
        "--steps",
        "5",
        "--metrics",
        "mmd2",
        "--count",
        "16",
        "--out-dir",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 0, "{}", stderr_of(&out));
    let csv = read(&eval_dir.join("eval_report.csv"));
    assert_eq!(csv.lines().count(), 2);
}
