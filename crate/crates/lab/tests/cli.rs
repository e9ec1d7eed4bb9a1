use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
schema_version = 1
experiment = "sweep"
seed = 11
output_dir = "out"

[model]
family = "mlp"
widths = [24, 16]

[data]
source = "synthetic"
num_classes = 3
synthetic_train = 240
synthetic_test = 60
synthetic_shape = [8]
synthetic_separation = 2.5
noise = 0.2
val_fraction = 0.25

[train]
epochs = 2
batch_size = 32
lr = 0.05

[prune]
fraction = 0.2
wall = 0.5
"#;

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdd-lab"))
        .current_dir(dir)
        .env("SDD_LAB_THREADS", "1")
        .args(args)
        .output()
        .unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    dir
}

#[test]
fn sweep_to_half_sparsity_writes_five_rows() {
    let dir = setup(CONFIG);
    let out = lab(dir.path(), &["sweep", "--config", "exp.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let seed_dir = dir.path().join("out/seed-11");
    let csv = std::fs::read_to_string(seed_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let sparsities: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(sparsities, ["0.000000", "0.200000", "0.360000", "0.488000", "0.590400"]);
    assert!(seed_dir.join("best.ckpt").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seed_dir.join("summary.json")).unwrap()).unwrap();
    let last_flops: u64 = rows.last().unwrap().split(',').nth(6).unwrap().parse().unwrap();
    assert_eq!(summary["flops_cumulative"].as_u64(), Some(last_flops));

    let report = lab(dir.path(), &["report", "out/seed-11/sweep.csv"]);
    assert!(report.status.success());
    let r: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert_eq!(r["best_round"], summary["best_round"]);

    let ent = lab(dir.path(), &["entropy", "--checkpoint", "out/seed-11/best.ckpt", "--config", "exp.toml"]);
    assert!(ent.status.success(), "{}", String::from_utf8_lossy(&ent.stderr));
    let e: serde_json::Value = serde_json::from_slice(&ent.stdout).unwrap();
    let avg = e["average"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&avg));
}

#[test]
fn same_seed_gives_identical_csv() {
    let a = setup(CONFIG);
    let b = setup(CONFIG);
    for d in [&a, &b] {
        assert!(lab(d.path(), &["sweep", "--config", "exp.toml", "--prune.wall", "0.4"]).status.success());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("out/seed-11/sweep.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let ckpt = |d: &tempfile::TempDir| std::fs::read(d.path().join("out/seed-11/best.ckpt")).unwrap();
    assert_eq!(ckpt(&a), ckpt(&b));
}

#[test]
fn replicas_get_their_own_directories() {
    let dir = setup(&CONFIG.replace("seed = 11", "seed = 11\nreplicas = [12]"));
    let out = lab(dir.path(), &["train", "--config", "exp.toml", "--train.epochs=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for s in [11, 12] {
        let d = dir.path().join(format!("out/seed-{s}"));
        assert!(d.join("dense.ckpt").exists());
        assert_eq!(std::fs::read_to_string(d.join("dense.csv")).unwrap().lines().count(), 2);
    }
}

#[test]
fn distill_from_a_trained_teacher() {
    let dir = setup(&format!(
        "{}\n[distill]\nteacher = \"out/seed-{{seed}}/dense.ckpt\"\n",
        CONFIG.replace("experiment = \"sweep\"", "experiment = \"distill\"")
    ));
    assert!(lab(dir.path(), &["train", "--config", "exp.toml"]).status.success());
    let out = lab(dir.path(), &["distill", "--config", "exp.toml", "--prune.wall", "0.3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/seed-11/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn early_stop_never_exceeds_its_guard() {
    let dir = setup(&format!(
        "{}\n[early_stop]\nentropy_threshold = 0.8\naccuracy_threshold = 0.95\nmax_rounds = 4\n",
        CONFIG.replace("experiment = \"sweep\"", "experiment = \"early-stop\"")
    ));
    let out = lab(dir.path(), &["early-stop", "--config", "exp.toml", "--train.epochs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rounds = s["rounds_run"].as_u64().unwrap();
    assert!((1..=4).contains(&rounds));
    assert!(s["returned_round"].as_u64().unwrap() <= rounds);
    let csv = std::fs::read_to_string(dir.path().join("out/seed-11/early_stop.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, rounds + 2);
    assert!(dir.path().join("out/seed-11/returned.ckpt").exists());
}

#[test]
fn exit_codes() {
    let dir = setup(CONFIG);
    let out = lab(dir.path(), &["sweep", "--config", "exp.toml", "--train.lr", "-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));

    let out = lab(dir.path(), &["sweep", "--config", "exp.toml", "--train.bogus", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = lab(dir.path(), &["distill", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(1));

    let out = lab(dir.path(), &["sweep", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(2));

    let out = lab(dir.path(), &["report", "nothing.csv"]);
    assert_eq!(out.status.code(), Some(2));

    let out = lab(dir.path(), &["sweep", "--config", "exp.toml", "--train.lr", "1e30", "--prune.wall", "0.3"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = Command::new(env!("CARGO_BIN_EXE_sdd-lab"))
        .current_dir(dir.path())
        .env("SDD_LAB_THREADS", "zero")
        .args(["report", "x.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
