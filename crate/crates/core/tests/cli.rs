use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lat")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lat(args);
    assert!(
        out.status.success(),
        "lat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    lat(args).status.code().unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// Small dataset and a one-epoch checkpoint in `dir`.
fn fixture(dir: &Path) -> (String, String) {
    let data = p(dir, "data.bin");
    let ckpt = p(dir, "model.ckpt");
    ok(&["gen", "--items", "24", "--dim", "8", "--tokens-a", "3", "--tokens-b", "5", "--seed", "3", "--out", &data]);
    ok(&[
        "train", "--data", &data, "--out", &ckpt, "--epochs", "1", "--batch", "8", "--depth", "1", "--heads", "2",
        "--holdout", "8",
    ]);
    (data, ckpt)
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (p(dir.path(), "a.bin"), p(dir.path(), "b.bin"));
    let csv = p(dir.path(), "a.csv");
    ok(&["gen", "--items", "10", "--dim", "4", "--tokens-a", "2", "--tokens-b", "3", "--out", &a, "--csv", &csv]);
    ok(&["gen", "--items", "10", "--dim", "4", "--tokens-a", "2", "--tokens-b", "3", "--out", &b]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(fs::read_to_string(&csv).unwrap().lines().count() > 10);
    let manifest = fs::read_to_string(format!("{a}.manifest")).unwrap();
    assert!(manifest.contains("subcommand=gen"));
    assert!(manifest.contains("items=10"));
}

#[test]
fn gen_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "x.bin");
    assert_eq!(code(&["gen", "--items", "0", "--out", &out]), 2);
    assert_eq!(code(&["gen", "--mapping", "spiral", "--out", &out]), 2);
    assert_eq!(code(&["gen", "--bogus"]), 2);
    assert!(!Path::new(&out).exists());
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = fixture(dir.path());
    let history = fs::read_to_string(format!("{ckpt}.history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,mean_total,mean_inter,mean_intra,mean_global,mean_token");
    assert_eq!(lines.len(), 2);
    let manifest = fs::read_to_string(format!("{ckpt}.manifest")).unwrap();
    assert!(manifest.contains("subcommand=train"));
    assert!(manifest.contains("duration-ms="));
    assert!(fs::metadata(&ckpt).unwrap().len() > 0);
}

#[test]
fn train_rejects_invalid_options() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let out = p(dir.path(), "bad.ckpt");
    assert_eq!(code(&["train", "--data", &data, "--out", &out, "--method", "rnn"]), 2);
    assert_eq!(code(&["train", "--data", &data, "--out", &out, "--batch", "1"]), 2);
    assert_eq!(code(&["train", "--data", &data, "--out", &out, "--heads", "3"]), 2);
    assert_eq!(code(&["train", "--data", &p(dir.path(), "missing.bin"), "--out", &out]), 3);
}

#[test]
fn resume_continues_training() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let more = p(dir.path(), "more.ckpt");
    ok(&["train", "--data", &data, "--out", &more, "--resume", &ckpt, "--epochs", "2"]);
    let history = fs::read_to_string(format!("{more}.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn eval_prints_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let report = p(dir.path(), "report.csv");
    let stdout = ok(&["eval", "--checkpoint", &ckpt, "--data", &data, "--holdout", "8", "--out", &report]);
    assert!(stdout.contains("T2V") && stdout.contains("V2T"));
    assert!(stdout.contains("gallery 8"));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("metric,value\n"));
    for key in ["T2V_R@1", "T2V_MedR", "V2T_R@10"] {
        assert!(csv.contains(key), "{key} missing");
    }
}

#[test]
fn eval_rejects_incompatible_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = fixture(dir.path());
    let other = p(dir.path(), "other.bin");
    ok(&["gen", "--items", "8", "--dim", "4", "--tokens-a", "3", "--tokens-b", "5", "--out", &other]);
    let out = p(dir.path(), "r.csv");
    let res = lat(&["eval", "--checkpoint", &ckpt, "--data", &other, "--out", &out]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("d=8"));
    assert_eq!(code(&["eval", "--checkpoint", &p(dir.path(), "nope"), "--data", &other, "--out", &out]), 3);
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", &p(dir.path(), "junk.ckpt"), "--data", &other, "--out", &out]), 3);
}

#[test]
fn diagnose_writes_symmetric_table() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let out = p(dir.path(), "sim.csv");
    let stdout = ok(&["diagnose", "--checkpoint", &ckpt, "--data", &data, "--items", "3", "--out", &out]);
    assert!(stdout.contains("matched"));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<String>> = text.lines().map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 13);
    let m: Vec<Vec<f64>> = rows[1..].iter().map(|r| r[1..].iter().map(|x| x.parse().unwrap()).collect()).collect();
    for i in 0..12 {
        assert!((m[i][i] - 1.0).abs() < 1e-9);
        for j in 0..12 {
            assert_eq!(m[i][j], m[j][i]);
        }
    }
}

#[test]
fn project_writes_labelled_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let out = p(dir.path(), "mds.csv");
    let svg = p(dir.path(), "mds.svg");
    ok(&[
        "project", "--checkpoint", &ckpt, "--data", &data, "--items", "5", "--groups", "T,GT", "--out", &out, "--svg",
        &svg,
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,group,x,y");
    assert_eq!(lines.len(), 11);
    assert!(lines[1..].iter().all(|l| l.contains(",T,") || l.contains(",GT,")));
    assert!(fs::read_to_string(&svg).unwrap().contains("<svg"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: PathBuf = dir.path().join("gen.conf");
    fs::write(&cfg, "# synthetic set\nitems = 12\ndim=4\ntokens-a=2\ntokens-b=3\nseed=5\n").unwrap();
    let (a, b) = (p(dir.path(), "a.bin"), p(dir.path(), "b.bin"));
    let cfg = cfg.to_str().unwrap();
    ok(&["gen", "--config", cfg, "--out", &a]);
    ok(&["gen", "--config", cfg, "--items", "6", "--out", &b]);
    assert!(fs::read_to_string(format!("{a}.manifest")).unwrap().contains("items=12"));
    assert!(fs::read_to_string(format!("{b}.manifest")).unwrap().contains("items=6"));
    assert!(fs::read_to_string(format!("{b}.manifest")).unwrap().contains("seed=5"));

    fs::write(dir.path().join("bad.conf"), "items 12\n").unwrap();
    assert_eq!(code(&["gen", "--config", &p(dir.path(), "bad.conf"), "--out", &a]), 2);
}
