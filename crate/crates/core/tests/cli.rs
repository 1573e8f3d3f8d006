use std::fs;
use std::process::{Command, Output};

use mskd::checkpoint::load_checkpoint;
use mskd::data::{load_dataset, read_metrics, MetricsRecord};

fn mskd(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mskd"))
        .current_dir(dir)
        .env_remove("MSKD_SEED")
        .args(args)
        .output()
        .unwrap()
}

const CONFIG: &str = "num_epochs = 2\nnum_identities = 6\ninstances_per_identity = 8\nquery_per_identity = 1\ngallery_per_identity = 2\n";

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mskd(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(mskd(dir.path(), &["gen-data", "--out", "x"]).status.code(), Some(1));
    fs::write(dir.path().join("typo.conf"), "lamda1 = 0.2\n").unwrap();
    let out = mskd(dir.path(), &["gen-data", "--config", "typo.conf", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
    assert_eq!(mskd(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = mskd(dir.path(), &["evaluate", "--ckpt", "missing.ckpt", "--data", "missing.txt"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("bad.ckpt"), b"MSKD-CKPT v9 1 1 2 1 1\n").unwrap();
    fs::write(dir.path().join("run.conf"), CONFIG).unwrap();
    assert!(mskd(dir.path(), &["gen-data", "--config", "run.conf", "--out", "d.txt"]).status.success());
    let out = mskd(dir.path(), &["evaluate", "--ckpt", "bad.ckpt", "--data", "d.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version mismatch"));
}

#[test]
fn full_pipeline_writes_parseable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.conf"), CONFIG).unwrap();
    let ok = |args: &[&str]| {
        let out = mskd(d, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["gen-data", "--config", "run.conf", "--out", "d.txt", "--seed", "3"]);
    assert_eq!(load_dataset(d.join("d.txt")).unwrap().instances.len(), 48);
    ok(&["train-teacher", "--config", "run.conf", "--data", "d.txt", "--out", "t.ckpt", "--metrics", "t.jsonl"]);
    ok(&["train-student", "--config", "run.conf", "--data", "d.txt", "--teacher", "t.ckpt", "--out", "s.ckpt", "--metrics", "s.jsonl"]);
    let eval = ok(&["evaluate", "--ckpt", "s.ckpt", "--data", "d.txt", "--report", "r.jsonl"]);

    load_checkpoint(d.join("s.ckpt")).unwrap();
    assert!(d.join("t.ckpt.opt").exists());
    let teacher_log = read_metrics(d.join("t.jsonl")).unwrap();
    assert_eq!(teacher_log.len(), 2);
    assert!(matches!(&teacher_log[0], MetricsRecord::Epoch(r) if r.phase == "teacher" && r.epoch == 0));
    let report = read_metrics(d.join("r.jsonl")).unwrap();
    assert!(matches!(&report[..], [MetricsRecord::Evaluation(_)]));
    let printed = String::from_utf8(eval.stdout).unwrap();
    assert_eq!(MetricsRecord::from_json(printed.trim()).unwrap(), report[0]);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mskd(dir.path(), &["gradcheck", "--trials", "20"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with(" ok")).count(), 5);
}
