//! End-to-end command-line tests: pipelines run through the real binary with
//! files on disk, checking determinism, exit codes, and output contracts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_demres")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("DEMRES_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("DEMRES_DATA_DIR", dir)
        .output()
        .expect("binary runs")
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("demres-cli-{tag}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_is_byte_deterministic_and_emits_config() {
    let dir = tmp_dir("synth");
    let a = dir.join("a.dem");
    let b = dir.join("b.dem");
    for (path, seed) in [(&a, "9"), (&b, "9")] {
        let out = run(&[
            "synth",
            "--rows",
            "48",
            "--cols",
            "32",
            "--seed",
            seed,
            "--output",
            path.to_str().unwrap(),
        ]);
        assert_success(&out);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("a.dem.run.json")).unwrap()).unwrap();
    assert_eq!(config["command"], "synth");
    assert_eq!(config["seed"], 9);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn mask_gen_runs_twice_identically() {
    let dir = tmp_dir("mask");
    let a = dir.join("m1.asc");
    let b = dir.join("m2.asc");
    for path in [&a, &b] {
        let out = run(&[
            "mask-gen",
            "--preset",
            "M-423",
            "--rows",
            "96",
            "--cols",
            "96",
            "--seed",
            "1",
            "--output",
            path.to_str().unwrap(),
        ]);
        assert_success(&out);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn degrade_scale_8_emits_12x12_from_96() {
    let dir = tmp_dir("degrade");
    let hq = dir.join("hq.dem");
    assert_success(&run(&[
        "synth",
        "--rows",
        "96",
        "--cols",
        "96",
        "--seed",
        "3",
        "--output",
        hq.to_str().unwrap(),
    ]));
    let lq = dir.join("lq.dem");
    assert_success(&run(&[
        "degrade",
        "--input",
        hq.to_str().unwrap(),
        "--scale",
        "8",
        "--preset",
        "M-311",
        "--seed",
        "5",
        "--output",
        lq.to_str().unwrap(),
    ]));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("lq.dem.json")).unwrap()).unwrap();
    assert_eq!(sidecar["rows"], 12);
    assert_eq!(sidecar["cols"], 12);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn simulate_sde_terminal_std_matches_lambda() {
    let dir = tmp_dir("sde");
    let csv = dir.join("sde.csv");
    let out = run(&[
        "simulate-sde",
        "--t",
        "100",
        "--lambda",
        "0.2",
        "--paths",
        "20000",
        "--seed",
        "2",
        "--output",
        csv.to_str().unwrap(),
    ]);
    assert_success(&out);
    let text = fs::read_to_string(&csv).unwrap();
    let last = text.lines().last().unwrap();
    let fields: Vec<&str> = last.split(',').collect();
    assert_eq!(fields[0], "100");
    let std: f64 = fields[2].parse().unwrap();
    assert!(
        (std - 0.2).abs() < 0.02 * 0.2,
        "terminal std {std} should be within 2% of 0.2"
    );
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_restore_evaluate_pipeline() {
    let dir = tmp_dir("pipeline");
    let hq = dir.join("terrain.dem");
    assert_success(&run(&[
        "synth",
        "--rows",
        "64",
        "--cols",
        "32",
        "--seed",
        "4",
        "--output",
        hq.to_str().unwrap(),
    ]));

    // Tiny training run: 3 steps on 32x32 tiles, short schedule.
    let out_dir = dir.join("run");
    let out = run(&[
        "train",
        "--input",
        hq.to_str().unwrap(),
        "--tile",
        "32",
        "--train-fraction",
        "1.0",
        "--scale",
        "2",
        "--preset",
        "M-311",
        "--iterations",
        "3",
        "--batch-size",
        "2",
        "--lr",
        "1e-3",
        "--steps",
        "4",
        "--seed",
        "6",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let ckpt = out_dir.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(out_dir.join("resolved_config.json").exists());
    let loss = fs::read_to_string(out_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 3);

    // Degrade a fresh tile and restore it with the checkpoint.
    let hq2 = dir.join("eval_hq.dem");
    assert_success(&run(&[
        "synth",
        "--rows",
        "32",
        "--cols",
        "32",
        "--seed",
        "14",
        "--output",
        hq2.to_str().unwrap(),
    ]));
    let lq = dir.join("eval_lq.dem");
    assert_success(&run(&[
        "degrade",
        "--input",
        hq2.to_str().unwrap(),
        "--scale",
        "2",
        "--preset",
        "M-311",
        "--seed",
        "15",
        "--output",
        lq.to_str().unwrap(),
    ]));
    let restored = dir.join("restored.dem");
    assert_success(&run(&[
        "restore",
        "--input",
        lq.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scale",
        "2",
        "--seed",
        "16",
        "--output",
        restored.to_str().unwrap(),
    ]));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("restored.dem.json")).unwrap()).unwrap();
    assert_eq!(sidecar["rows"], 32);

    // Determinism across identical restore invocations.
    let restored2 = dir.join("restored2.dem");
    assert_success(&run(&[
        "restore",
        "--input",
        lq.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scale",
        "2",
        "--seed",
        "16",
        "--output",
        restored2.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(&restored).unwrap(), fs::read(&restored2).unwrap());

    // Score both the restoration and the bicubic baseline; emit heatmaps.
    let csv = dir.join("scores.csv");
    let heat = dir.join("heat");
    let out = run(&[
        "evaluate",
        "--pred",
        restored.to_str().unwrap(),
        "--gt",
        hq2.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--report",
        dir.join("report.json").to_str().unwrap(),
        "--heatmap-dir",
        heat.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
    assert!(heat.join("eval_hq.dem.err.png").exists());

    let base_csv = dir.join("base.csv");
    let out = run(&[
        "evaluate",
        "--baseline-of",
        lq.to_str().unwrap(),
        "--gt",
        hq2.to_str().unwrap(),
        "--scale",
        "2",
        "--csv",
        base_csv.to_str().unwrap(),
    ]);
    assert_success(&out);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn exit_codes_follow_contract() {
    // Usage error: unknown flag.
    let out = run(&["synth", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));

    // Data error: missing input file.
    let dir = tmp_dir("exitcodes");
    let out = run(&[
        "degrade",
        "--input",
        dir.join("missing.dem").to_str().unwrap(),
        "--output",
        dir.join("out.dem").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Identical-inputs evaluate succeeds with the PSNR cap.
    let hq = dir.join("t.dem");
    assert_success(&run(&[
        "synth",
        "--rows",
        "16",
        "--cols",
        "16",
        "--seed",
        "1",
        "--output",
        hq.to_str().unwrap(),
    ]));
    let out = run(&[
        "evaluate",
        "--pred",
        hq.to_str().unwrap(),
        "--gt",
        hq.to_str().unwrap(),
        "--csv",
        dir.join("id.csv").to_str().unwrap(),
    ]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("psnr=99.00"), "stdout: {stdout}");
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn data_dir_env_resolves_relative_paths() {
    let dir = tmp_dir("envdir");
    let out = run_in(
        &dir,
        &[
            "synth",
            "--rows",
            "16",
            "--cols",
            "16",
            "--seed",
            "2",
            "--output",
            "env_terrain.dem",
        ],
    );
    assert_success(&out);
    assert!(dir.join("env_terrain.dem").exists());
    fs::remove_dir_all(&dir).ok();
}
