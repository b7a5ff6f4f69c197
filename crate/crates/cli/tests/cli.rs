use std::path::Path;
use std::process::{Command, Output};

const QUICK: &[&str] = &[
    "--train.epochs=2",
    "--train.batch=50",
    "--data.n_per_class=60",
    "--data.test_per_class=30",
    "--eval.size=60",
    "--eval.probe_size=16",
    "--eval.final_pgd_restarts=1",
    "--eval.landscape_n=4",
    "--eval.landscape_samples=8",
];

fn slatlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slatlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(QUICK)
        .output()
        .expect("binary runs")
}

fn summary(dir: &Path, file: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(file)).unwrap()).unwrap()
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = slatlab(&["train", "--seed", "3"], dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["metrics.csv", "summary.json", "final.ckpt", "landscape_slat.csv"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    assert!(a.join("timing.json").exists());
    let s = summary(&a, "summary.json");
    assert_eq!(s["method"], "slat");
    assert_eq!(s["seed"], 3);
}

#[test]
fn eval_only_reuses_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(slatlab(&["train", "--train.method=fgsm_at"], &run).status.success());
    let trained = summary(&run, "summary.json");
    let ckpt = run.join("final.ckpt");
    let out = slatlab(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--train.method=fgsm_at"], &run);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let evaluated = summary(&run, "eval_summary.json");
    assert_eq!(evaluated["clean_acc"], trained["clean_acc"]);
    assert_eq!(evaluated["final_pgd_acc"], trained["final_pgd_acc"]);
}

#[test]
fn landscape_prints_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(slatlab(&["train"], &run).status.success());
    let out = slatlab(&["landscape", "--ckpt", run.join("final.ckpt").to_str().unwrap()], &run);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("adv\\rand,"));
}

#[test]
fn sweep_merges_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = slatlab(&["sweep", "--param", "train.epsilon", "--values", "0.05,1/10"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn unknown_key_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = slatlab(&["train", "--train.epsilonn=0.1"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `train.epsilonn`"));
}

#[test]
fn diverging_run_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = slatlab(&["train", "--train.lr_max=1e200"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite gradient"));
    // Records collected before the failure are kept.
    assert!(tmp.path().join("metrics.csv").exists());
}

#[test]
fn config_file_and_overrides_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.ini");
    std::fs::write(&cfg, "# toy run\ntrain.method = standard\nseed = 5\n").unwrap();
    let out = slatlab(&["train", "--config", cfg.to_str().unwrap(), "--seed", "6"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(tmp.path(), "summary.json");
    assert_eq!(s["method"], "standard");
    assert_eq!(s["seed"], 6);
}
