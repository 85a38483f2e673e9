use std::path::Path;
use std::process::Command;

fn dale() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dale"));
    c.env("RUST_LOG", "warn");
    c
}

fn small_run(out: &Path, extra: &[&str]) -> std::process::Output {
    dale()
        .args(["train", "--dataset", "blobs", "--method", "dale", "--epsilon", "0.2"])
        .args(["--set", "data.n=80", "--set", "train.epochs=3", "--set", "model.hidden=4"])
        .args(["--set", "eval.pgd_steps=3", "--noise-coef", "0.01"])
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn rerun_from_summary_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = small_run(&a, &["--seed", "5"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = dale()
        .arg("train")
        .arg("--config")
        .arg(a.join("summary.json"))
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    assert!(second.status.success(), "{}", String::from_utf8_lossy(&second.stderr));
    let ha = std::fs::read(a.join("history.csv")).unwrap();
    let hb = std::fs::read(b.join("history.csv")).unwrap();
    assert_eq!(ha, hb);
    let sa: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    let sb: serde_json::Value = serde_json::from_slice(&std::fs::read(b.join("summary.json")).unwrap()).unwrap();
    assert_eq!(sa["input_hash"], sb["input_hash"]);
    assert_eq!(sa["config"]["seed"], "5");
}

#[test]
fn erm_history_has_zero_nu() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path(), &["--set", "method=erm"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,clean_loss,robust_loss,nu,slack,clean_acc,robust_acc");
    for line in lines {
        assert_eq!(line.split(',').nth(3).unwrap(), "0");
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "train.epochs = 2\ndual.rho = 0.9\n").unwrap();
    let out = small_run(dir.path(), &["--config", cfg.to_str().unwrap(), "--rho", "0.4"]);
    assert!(out.status.success());
    let s: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    // flags given before --config in small_run still win over the file
    assert_eq!(s["config"]["dual.rho"], "0.4");
    assert_eq!(s["config"]["train.epochs"], "3");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = small_run(dir.path(), &["--set", "no.such=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_value = small_run(dir.path(), &["--set", "train.epochs=zero"]);
    assert_eq!(bad_value.status.code(), Some(2));
    let no_data = dale()
        .args(["train", "--dataset", "mnist", "--set"])
        .arg(format!("data.mnist_dir={}", dir.path().join("missing").display()))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(no_data.status.code(), Some(3));
    let diverge = small_run(dir.path(), &["--set", "train.lr=1e300", "--set", "method=erm"]);
    assert_eq!(diverge.status.code(), Some(4));
    let s: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["status"], "error");
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dale()
        .args(["sweep-rho", "--dataset", "blobs", "--epsilon", "0.1"])
        .args(["--set", "data.n=40", "--set", "train.epochs=1", "--set", "model.hidden=3"])
        .args(["--set", "sweep.rho=0.1,0.5", "--set", "sweep.seeds=0", "--set", "eval.pgd_steps=2"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("rho_sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rho,clean_acc,fgsm_acc,pgd_acc");
    assert_eq!(lines.len(), 3);
    assert!(dir.path().join("rho_0.1_seed_0/summary.json").exists());
}

#[test]
fn oracle_and_pca_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dale().args(["oracle", "--set", "oracle.nodes=11"]).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("oracle_oversmoothed.csv")).unwrap();
    assert!(csv.starts_with("c0,loss,density\n"));
    let out = dale()
        .args(["pca", "--dataset", "moons", "--set", "data.n=60", "--set", "train.epochs=1"])
        .args(["--set", "pca.examples=5", "--set", "model.hidden=3", "--epsilon", "0.1"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("pca.csv")).unwrap();
    assert!(csv.starts_with("pc1,pc2,method\n"));
    assert_eq!(csv.lines().count(), 11);
}
