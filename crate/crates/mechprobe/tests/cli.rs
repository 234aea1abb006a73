// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

fn mechprobe(args: &[&str], work: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mechprobe"))
        .args(args)
        .arg("--work-dir")
        .arg(work)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn repro_tables_print_and_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let o = mechprobe(&["repro-tables"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("94.92"));
    assert!(out.contains("92.94") || out.contains("92.95"));
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "gen",
        "train",
        "trace",
        "probe",
        "entropy",
        "prune-heads",
        "prune-layers",
        "flow-check",
        "correlate",
        "robustness",
        "heatmap",
        "repro-tables",
    ] {
        let o = mechprobe(&[sub, "--help"], dir.path());
        assert_eq!(code(&o), 0, "{sub}");
        assert!(!o.stdout.is_empty(), "{sub}");
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&mechprobe(&["probe", "--no-such-flag"], dir.path())),
        1
    );
    assert_eq!(code(&mechprobe(&["frobnicate"], dir.path())), 1);

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": {"n_layers": 2, "bogus": 1}}"#).unwrap();
    let o = mechprobe(
        &["--config", cfg.to_str().unwrap(), "repro-tables"],
        dir.path(),
    );
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));

    let o = mechprobe(
        &[
            "--config",
            dir.path().join("absent.json").to_str().unwrap(),
            "repro-tables",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["probe", "train", "trace", "entropy", "flow-check"] {
        let o = mechprobe(&[sub], dir.path());
        assert_eq!(code(&o), 2, "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(
            String::from_utf8_lossy(&o.stderr).starts_with("error:"),
            "{sub}"
        );
    }
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = mechprobe(
            &[
                "gen",
                "--task",
                "chain",
                "--n",
                "200",
                "--seed",
                "9",
                "--chain-depth",
                "1",
                "--out",
                out.to_str().unwrap(),
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 200);
}

#[test]
fn corrupted_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train.jsonl");
    assert_eq!(
        code(&mechprobe(
            &["gen", "--n", "20", "--out", out.to_str().unwrap()],
            dir.path()
        )),
        0
    );
    let mut text = std::fs::read_to_string(&out).unwrap();
    text.insert_str(0, "{not json}\n");
    std::fs::write(&out, text).unwrap();
    let o = mechprobe(&["train"], dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
