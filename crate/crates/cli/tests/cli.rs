use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ecnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn ecnet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL: &str = "epochs=1\ntrain_size=64\ntest_size=32\nbatch_size=16\n";

#[test]
fn train_then_eval_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();

    let o = ecnet(
        &["train", "--config", "small.cfg", "--seed", "7", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in ["metrics.csv", "clipping.csv", "checkpoint.json", "config.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2);

    let o = ecnet(&["eval", "--out", "run", "--protocol", "fixed"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(run.join("eval_fixed.csv")).unwrap();
    let mut lines = csv.lines();
    let width = lines.next().unwrap().split(',').count();
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.split(',').count() == width));

    let o = ecnet(&["eval", "--out", "run", "--protocol", "eta"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(run.join("eval_eta.csv").exists());
}

#[test]
fn gen_data_round_trips_through_records_source() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let o = ecnet(&["gen-data", "--config", "small.cfg", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let train = fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 64);

    let cfg = "data=records\ntrain_path=data/train.jsonl\ntest_path=data/test.jsonl\nepochs=1\nbatch_size=16\n";
    fs::write(dir.path().join("rec.cfg"), cfg).unwrap();
    let o = ecnet(&["train", "--config", "rec.cfg", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn check_passes_and_fault_injection_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecnet(&["check"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = ecnet(&["check", "--inject-fault", "clip-margin"], dir.path());
    assert_eq!(code(&o), 4);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("FAIL\thypmath\tboundary_margin_overshoot"), "{out}");
}

#[test]
fn exit_codes_for_bad_config_and_data() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "no_such_key=1\n").unwrap();
    let o = ecnet(&["train", "--config", "bad.cfg", "--out", "r"], dir.path());
    assert_eq!(code(&o), 2);

    fs::write(dir.path().join("neg.cfg"), "lr=-1\n").unwrap();
    let o = ecnet(&["train", "--config", "neg.cfg", "--out", "r"], dir.path());
    assert_eq!(code(&o), 2);

    let cfg = "data=records\ntrain_path=missing.jsonl\ntest_path=missing.jsonl\n";
    fs::write(dir.path().join("miss.cfg"), cfg).unwrap();
    let o = ecnet(&["train", "--config", "miss.cfg", "--out", "r"], dir.path());
    assert_eq!(code(&o), 3);

    fs::write(dir.path().join("broken.jsonl"), "{\"id\": \n").unwrap();
    let cfg = "data=records\ntrain_path=broken.jsonl\ntest_path=broken.jsonl\n";
    fs::write(dir.path().join("broken.cfg"), cfg).unwrap();
    let o = ecnet(&["train", "--config", "broken.cfg", "--out", "r"], dir.path());
    assert_eq!(code(&o), 3);

    let o = ecnet(&["eval", "--out", "nowhere"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn bench_reports_each_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecnet(&["bench", "--iters", "100"], dir.path());
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    for k in ["exp0", "log0", "mobius_add", "distance"] {
        assert!(out.contains(k));
    }
}
