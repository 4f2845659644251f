use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use semcom::harness::{ExperimentConfig, RunMetrics};

const SMALL: &str = r#"{
  "data": {"n": 600, "d": 4, "mixer": {"dim_x1": 12, "dim_x2": 10}},
  "n_train": 400,
  "model": {"encoder_hidden": [8], "feature_dim": 4},
  "pretrain": {"epochs": 3, "partition": {"k_shared": 2, "k_unique": 2}},
  "finetune": {"epochs": 6, "lr": 0.2, "batch_size": 32},
  "seeds": [5]
}"#;

fn semcom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semcom"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn csv_column(text: &str, name: &str) -> Vec<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(col).unwrap().to_string())
        .collect()
}

#[test]
fn config_merges_file_set_and_flags() {
    let dir = workdir();
    let out = ok(&semcom(
        dir.path(),
        &[
            "-c",
            "small.json",
            "--set",
            "finetune.lr=0.05",
            "--set",
            "policy.calibrate_on=eval",
            "--seed",
            "9",
            "--eval-snr",
            "0,20",
            "--alpha",
            "0.1",
            "config",
        ],
    ));
    let cfg = ExperimentConfig::from_json(&out).unwrap();
    assert_eq!(cfg.n_train, 400);
    assert_eq!(cfg.finetune.lr, 0.05);
    assert_eq!(cfg.seeds, vec![9]);
    assert_eq!(cfg.policy.alpha, 0.1);
    assert_eq!(cfg.eval_link().label(), "dyn[0:20]");
    // the training link keeps the default
    assert_eq!(cfg.channel.label(), "10");
    assert_eq!(
        cfg.model.head_hidden,
        ExperimentConfig::default().model.head_hidden
    );
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = workdir();
    for args in [
        &["-c", "small.json", "--set", "n_train=600", "config"][..],
        &["-c", "small.json", "--snr", "loud", "config"],
        &[
            "-c",
            "small.json",
            "--set",
            "policy.calibrate_on=sometimes",
            "config",
        ],
        &["-c", "small.json", "--set", "no_equals_sign", "config"],
        &["-c", "small.json", "--alpha", "1.5", "config"],
    ] {
        let out = semcom(dir.path(), args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    fs::write(dir.path().join("broken.json"), "{\"n_train\": ").unwrap();
    assert_eq!(
        semcom(dir.path(), &["-c", "broken.json", "config"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = workdir();
    let out = semcom(
        dir.path(),
        &[
            "-c",
            "small.json",
            "--no-pretrain",
            "--set",
            "finetune.lr=1e200",
            "finetune",
            "-o",
            "run",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune"));
}

#[test]
fn stages_chain_and_agree_with_the_pipeline() {
    let dir = workdir();
    let base = ["-c", "small.json"];
    let run = |extra: &[&str]| ok(&semcom(dir.path(), &[&base[..], extra].concat()));

    run(&["gen-data", "-o", "data.json"]);
    let data = semcom::synthdata::SyntheticDataset::load(dir.path().join("data.json")).unwrap();
    assert_eq!(data.len(), 600);

    run(&["pretrain", "-o", "pre"]);
    run(&["finetune", "--encoders", "pre/encoders.ckpt", "-o", "run"]);
    run(&[
        "calibrate",
        "--model",
        "run/model.ckpt",
        "-o",
        "policy.json",
    ]);
    let eval: serde_json::Value = serde_json::from_str(&run(&[
        "evaluate",
        "--model",
        "run/model.ckpt",
        "--policy",
        "policy.json",
    ]))
    .unwrap();
    let metrics: RunMetrics =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(
        eval["report"]["accuracy"].as_f64().unwrap(),
        metrics.final_accuracy
    );
    assert_eq!(
        eval["cost"]["retx_ratio"].as_f64().unwrap(),
        metrics.c_infer.retx_ratio
    );

    // staged run and the one-shot pipeline write the same model
    run(&["run", "-o", "whole"]);
    assert_eq!(
        fs::read(dir.path().join("run/model.ckpt")).unwrap(),
        fs::read(dir.path().join("whole/seed_5/model.ckpt")).unwrap()
    );

    let csv = run(&[
        "infer",
        "--model",
        "run/model.ckpt",
        "--policy",
        "policy.json",
    ]);
    let labels = csv_column(&csv, "label");
    let predicted = csv_column(&csv, "predicted");
    assert_eq!(labels.len(), 200);
    let correct = labels
        .iter()
        .zip(&predicted)
        .filter(|(a, b)| a == b)
        .count();
    assert_eq!(correct as f64 / 200.0, metrics.final_accuracy);
    let attempts = csv_column(&csv, "attempts_0");
    assert!(attempts
        .iter()
        .all(|a| (1..=4).contains(&a.parse::<usize>().unwrap())));

    let probe: semcom::infobounds::ProbeReport =
        serde_json::from_str(&run(&["mi-probe", "--encoders", "pre/encoders.ckpt"])).unwrap();
    assert_eq!(probe.bins, 8);
    assert!(probe.i_wall > 0.0);
}

#[test]
fn mismatched_or_damaged_checkpoints_are_refused() {
    let dir = workdir();
    ok(&semcom(
        dir.path(),
        &["-c", "small.json", "pretrain", "-o", "pre"],
    ));
    let out = semcom(
        dir.path(),
        &[
            "-c",
            "small.json",
            "--set",
            "model.encoder_hidden=[6]",
            "finetune",
            "--encoders",
            "pre/encoders.ckpt",
            "-o",
            "x",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("architecture mismatch"));
    assert!(!dir.path().join("x").exists());

    let bytes = fs::read(dir.path().join("pre/encoders.ckpt")).unwrap();
    fs::write(dir.path().join("cut.ckpt"), &bytes[..bytes.len() - 9]).unwrap();
    let out = semcom(
        dir.path(),
        &["-c", "small.json", "mi-probe", "--encoders", "cut.ckpt"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint error"));
}

#[test]
fn pipeline_runs_are_byte_identical() {
    let dir = workdir();
    let args = ["-c", "small.json", "--seeds", "1,2", "--snr", "0,20"];
    let a = ok(&semcom(
        dir.path(),
        &[&args[..], &["run", "-o", "a"]].concat(),
    ));
    let b = ok(&semcom(
        dir.path(),
        &[&args[..], &["run", "-o", "b"]].concat(),
    ));
    assert_eq!(a, b);
    let mut files = 0;
    for seed in ["seed_1", "seed_2"] {
        for entry in fs::read_dir(dir.path().join("a").join(seed)).unwrap() {
            let name = entry.unwrap().file_name();
            let left = fs::read(dir.path().join("a").join(seed).join(&name)).unwrap();
            let mut right = fs::read(dir.path().join("b").join(seed).join(&name)).unwrap();
            if name == "config.json" {
                // the snapshot records where it was written
                let text = String::from_utf8(right).unwrap();
                right = text
                    .replace(r#""output_dir": "b""#, r#""output_dir": "a""#)
                    .into_bytes();
            }
            assert!(left == right, "{seed}/{name:?} differs");
            files += 1;
        }
    }
    assert!(files >= 12);
}

#[test]
fn no_retx_matches_zero_retries() {
    let dir = workdir();
    let a = ok(&semcom(
        dir.path(),
        &["-c", "small.json", "--no-retx", "run"],
    ));
    let b = ok(&semcom(
        dir.path(),
        &["-c", "small.json", "--n-max", "0", "run"],
    ));
    let strip = |s: &str| {
        csv_column(s, "final_accuracy").join(" ") + &csv_column(s, "symbols_per_sample").join(" ")
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn sweep_covers_the_snr_grid() {
    let dir = workdir();
    let out = ok(&semcom(
        dir.path(),
        &["-c", "small.json", "--seeds", "0,1", "sweep"],
    ));
    let snr = csv_column(&out, "snr");
    assert_eq!(
        snr,
        ["0", "10", "20", "dyn[0:20]", "0", "10", "20", "dyn[0:20]"]
    );
    assert_eq!(
        out,
        ok(&semcom(
            dir.path(),
            &["-c", "small.json", "--seeds", "0,1", "sweep"]
        ))
    );
}

#[test]
fn verify_bounds_reports_clean_suite() {
    let dir = workdir();
    let out = ok(&semcom(
        dir.path(),
        &[
            "--seed",
            "4",
            "verify-bounds",
            "--chains",
            "30",
            "--templates",
            "8",
        ],
    ));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["max_identity_gap"].as_f64().unwrap() <= 1e-10);
    assert!(v["min_bound_slack"].as_f64().unwrap() >= -1e-9);
    assert_eq!(v["noiseless_templates"], 4);
}
