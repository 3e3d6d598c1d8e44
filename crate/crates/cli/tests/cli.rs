use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use crlsc_core::pqkb::kb_load;
use crlsc_core::trainer::{save_dataset, Dataset, SyntheticDatasetSpec};

fn crlsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crlsc")).args(args).arg("--log-level").arg("warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = crlsc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn run_dir(stdout: &str) -> PathBuf {
    let line = stdout.lines().find(|l| l.starts_with("run ")).unwrap();
    PathBuf::from(line.rsplit(" in ").next().unwrap())
}

fn value(stdout: &str, key: &str) -> String {
    let prefix = format!("{key} = ");
    stdout.lines().find_map(|l| l.strip_prefix(&prefix)).unwrap_or_else(|| panic!("{key} missing")).to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn build_kb_from_a_dataset_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::synthetic(&SyntheticDatasetSpec::default().with_samples(5, 34)).unwrap();
    let ds = ds.subset(&(0..100).collect::<Vec<_>>());
    let data = dir.path().join("data.crds");
    save_dataset(&ds, &data).unwrap();

    let kb1 = dir.path().join("a.crkb");
    let out = ok(&["build-kb", "--dataset", s(&data), "--kb", s(&kb1), "--out", s(dir.path())]);
    assert_eq!(value(&out, "N"), "100");
    let (d, m, k): (usize, usize, usize) =
        (value(&out, "d").parse().unwrap(), value(&out, "m").parse().unwrap(), value(&out, "k*").parse().unwrap());
    assert_eq!(value(&out, "codebook scalars (m*d*k*)"), (m * (d / m) * k).to_string());
    assert_eq!(value(&out, "code bytes"), (100 * m).to_string());
    assert_eq!(value(&out, "file bytes"), fs::metadata(&kb1).unwrap().len().to_string());
    assert_eq!(kb_load(&kb1).unwrap().len(), 100);

    let kb2 = dir.path().join("b.crkb");
    let again = ok(&["build-kb", "--dataset", s(&data), "--kb", s(&kb2), "--out", s(dir.path())]);
    assert_eq!(fs::read(&kb1).unwrap(), fs::read(&kb2).unwrap());
    assert_eq!(value(&out, "sha256"), value(&again, "sha256"));
}

#[test]
fn train_encoder_from_file_or_address_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("skb.crkb");
    ok(&["build-kb", "--kb", s(&kb), "--out", s(dir.path()), "--set", "skb.per_class=30"]);

    let mut server = Command::new(env!("CARGO_BIN_EXE_crlsc"))
        .args(["serve", "--kb", s(&kb), "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let common = ["--set", "noise.var=0", "--set", "train.epochs=3", "--set", "data.per_class=20", "--seed", "5"];
    let local_root = dir.path().join("local");
    let remote_root = dir.path().join("remote");
    let mut a = vec!["train-encoder", "--skb", s(&kb), "--out", s(&local_root)];
    a.extend(common);
    let mut b = vec!["train-encoder", "--skb", addr.as_str(), "--out", s(&remote_root)];
    b.extend(common);
    let la = run_dir(&ok(&a));
    let lb = run_dir(&ok(&b));
    server.kill().unwrap();
    server.wait().unwrap();

    let ma = fs::read(la.join("metrics.jsonl")).unwrap();
    assert!(!ma.is_empty());
    assert_eq!(ma, fs::read(lb.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(la.join("encoder.cren")).unwrap(), fs::read(lb.join("encoder.cren")).unwrap());
}

#[test]
fn eval_prints_top1_and_top5() {
    let dir = tempfile::tempdir().unwrap();
    let root = s(dir.path());
    let small = ["--set", "train.epochs=2", "--set", "data.per_class=20", "--set", "probe.epochs=10"];
    let mut args = vec!["train-encoder", "--out", root];
    args.extend(small);
    let enc = run_dir(&ok(&args)).join("encoder.cren");
    let mut args = vec!["eval", "--encoder", s(&enc), "--out", root];
    args.extend(small);
    let out = ok(&args);
    let top1: f64 = value(&out, "top1").parse().unwrap();
    let top5: f64 = value(&out, "top5").parse().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert!(top5 >= top1);
}

const ZERO: [&str; 10] = [
    "--set",
    "train.epochs=0",
    "--set",
    "codec.epochs=0",
    "--set",
    "probe.epochs=1",
    "--set",
    "data.per_class=12",
    "--set",
    "skb.per_class=12",
];

#[test]
fn zero_epoch_e2e_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["e2e", "--out", s(dir.path())];
    args.extend(ZERO);
    let run = run_dir(&ok(&args));
    for f in [
        "config.txt",
        "skb.crkb",
        "encoder.cren",
        "pkb.crkb",
        "codebook.crvq",
        "decoder.crde",
        "metrics.jsonl",
        "timings.jsonl",
        "summary.json",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(kb_load(run.join("pkb.crkb")).unwrap().len(), 36);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pkb"]["n"], 36);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["e2e", "--out", s(dir.path()), "--seed", "11"];
    args.extend(ZERO);
    args.extend(["--set", "train.epochs=2", "--set", "codec.epochs=2"]);
    let first = run_dir(&ok(&args));
    let echoed = first.join("config.txt");
    let other = dir.path().join("again");
    let second = run_dir(&ok(&["e2e", "--config", s(&echoed), "--out", s(&other)]));
    assert_eq!(first.file_name(), second.file_name());
    for f in ["metrics.jsonl", "summary.json", "skb.crkb", "codebook.crvq"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    let third = run_dir(&ok(&["e2e", "--config", s(&echoed), "--seed", "12", "--out", s(&other)]));
    assert_ne!(first.file_name(), third.file_name());
}

#[test]
fn zero_epoch_transfer_demo() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["transfer-demo", "--out", s(dir.path())];
    args.extend(ZERO);
    let out = ok(&args);
    let run = run_dir(&out);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pkb_entries"], 36);
    assert_eq!(value(&out, "pkb sha256"), report["pkb_sha256"].as_str().unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = crlsc(&["e2e", "--set", "no.such.key=1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));
    assert_eq!(crlsc(&["e2e", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(crlsc(&["e2e", "--set", "train.tau=-1", "--out", s(dir.path())]).status.code(), Some(2));
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "train.epochs = 3\nnot a pair\n").unwrap();
    assert_eq!(crlsc(&["e2e", "--config", s(&cfg), "--out", s(dir.path())]).status.code(), Some(2));
    let missing = dir.path().join("missing.cren");
    assert_eq!(crlsc(&["eval", "--encoder", s(&missing), "--out", s(dir.path())]).status.code(), Some(1));
    assert_eq!(crlsc(&["train-encoder", "--skb", "127.0.0.1:1", "--out", s(dir.path())]).status.code(), Some(1));
}
