use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: &str = r#"
preset = "toy"
[dataset]
n_train = 32
n_val = 8
n_test = 64
[prior]
epochs = 2
[training]
batch_size = 16
stage1_epochs = 3
stage2_epochs = 2
[downstream]
head_epochs = 4
[downstream.chest]
n_train = 16
n_eval = 8
epochs = 2
"#;

fn csifm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csifm"))
        .args(args)
        .env("CSIFM_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = csifm(root, args);
    assert!(
        out.status.success(),
        "csifm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Shared run: datasets plus fully pretrained `none` and `plain_mae` encoders.
struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let config = write_config(tmp.path(), SMALL);
        let c = config.to_str().unwrap();
        ok(&root, &["generate", c]);
        ok(&root, &["pretrain", c]);
        ok(&root, &["pretrain", c, "--ablation", "plain_mae"]);
        Fixture { _tmp: tmp, root, config }
    })
}

fn stage2(root: &Path, ablation: &str) -> PathBuf {
    root.join("pretrain").join(ablation).join("stage2.ck")
}

#[test]
fn generate_is_byte_identical_and_splits_are_disjoint() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&a, &["generate", config.to_str().unwrap()]);
    ok(&b, &["generate", config.to_str().unwrap()]);
    let mut ids = Vec::new();
    for (split, n) in [("train", 32), ("val", 8), ("test", 64)] {
        let file = format!("data/{split}.csids");
        assert_eq!(read(&a.join(&file)), read(&b.join(&file)), "{split} differs between runs");
        let manifest = format!("data/{split}.manifest.json");
        let m: serde_json::Value = serde_json::from_slice(&read(&a.join(&manifest))).unwrap();
        assert_eq!(m["sample_count"].as_u64(), Some(n), "{split} count");
        let scen: Vec<u64> = m["scenario_ids"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        ids.push(scen);
    }
    assert_eq!(ids[0], ids[1], "train and val share the seen scenarios");
    assert!(ids[2].iter().all(|s| !ids[0].contains(s)), "test scenarios must be unseen");
}

#[test]
fn stage2_before_stage1_is_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let c = config.to_str().unwrap();
    let root = tmp.path().join("run");
    ok(&root, &["generate", c]);
    let out = csifm(&root, &["pretrain", c, "--stage", "stage2", "--ablation", "no_pa"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage1"));
}

#[test]
fn plain_mae_neither_creates_nor_reads_param_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let c = config.to_str().unwrap();
    let root = tmp.path().join("run");
    ok(&root, &["generate", c]);
    ok(&root, &["pretrain", c, "--stage", "stage1", "--ablation", "plain_mae"]);
    assert!(!root.join("pretrain/param.ck").exists());
    std::fs::write(root.join("pretrain/param.ck"), b"garbage").unwrap();
    ok(&root, &["pretrain", c, "--stage", "stage2", "--ablation", "plain_mae"]);
    assert!(stage2(&root, "plain_mae").exists());
}

#[test]
fn resumed_stage_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let c = config.to_str().unwrap();
    let root = tmp.path().join("run");
    let dir = root.join("pretrain/plain_mae");
    ok(&root, &["generate", c]);
    ok(&root, &["pretrain", c, "--stage", "stage1", "--ablation", "plain_mae"]);
    let reference = read(&dir.join("stage1.ck"));
    for name in ["stage1_epoch002.ck", "stage1_epoch003.ck", "stage1.ck"] {
        std::fs::remove_file(dir.join(name)).unwrap();
    }
    let out = ok(&root, &["pretrain", c, "--stage", "stage1", "--ablation", "plain_mae"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resuming after epoch 1"));
    assert_eq!(read(&dir.join("stage1.ck")), reference);
    assert_eq!(read(&dir.join("stage1_epoch003.ck")), reference);
    let log = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [1, 2, 3]);
}

#[test]
fn completed_stage_is_skipped_and_foreign_config_rejected() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    std::fs::create_dir_all(root.join("pretrain/none")).unwrap();
    std::fs::create_dir_all(root.join("data")).unwrap();
    std::fs::copy(f.root.join("data/train.csids"), root.join("data/train.csids")).unwrap();
    std::fs::copy(stage2(&f.root, "none"), stage2(&root, "none")).unwrap();
    let out = ok(&root, &["pretrain", f.config.to_str().unwrap(), "--stage", "stage2"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("already complete"));
    let other = write_config(tmp.path(), &SMALL.replace("head_epochs = 4", "head_epochs = 5"));
    let out = csifm(&root, &["pretrain", other.to_str().unwrap(), "--stage", "stage2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_all_tasks_is_deterministic_and_pairs_head_configs() {
    let f = fixture();
    let c = f.config.to_str().unwrap();
    let none = stage2(&f.root, "none");
    let plain = stage2(&f.root, "plain_mae");
    let args = ["eval", c, "--encoder", none.to_str().unwrap(), "--encoder", plain.to_str().unwrap()];
    let tmp = tempfile::tempdir().unwrap();
    let roots = [tmp.path().join("a"), tmp.path().join("b")];
    for r in &roots {
        std::fs::create_dir_all(r.join("data")).unwrap();
        std::fs::copy(f.root.join("data/test.csids"), r.join("data/test.csids")).unwrap();
        ok(r, &args);
    }
    for name in ["los", "pos", "beam", "chest", "summary"] {
        let file = format!("eval/{name}.csv");
        assert_eq!(read(&roots[0].join(&file)), read(&roots[1].join(&file)), "{file} differs");
    }
    let text = std::fs::read_to_string(roots[0].join("eval/los.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |n: &str| header.iter().position(|h| *h == n).unwrap();
    let (variant, ratio, snr, hash) = (col("variant"), col("ratio"), col("snr"), col("head_config_hash"));
    let mut cells = std::collections::BTreeMap::<(String, String), Vec<(String, String)>>::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        cells
            .entry((f[ratio].into(), f[snr].into()))
            .or_default()
            .push((f[variant].into(), f[hash].into()));
    }
    assert!(!cells.is_empty());
    for (cell, rows) in cells {
        let variants: std::collections::BTreeSet<_> = rows.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(variants.len(), 2, "cell {cell:?} lacks a variant");
        assert!(rows.windows(2).all(|w| w[0].1 == w[1].1), "cell {cell:?} head hashes differ");
    }
    let chest = std::fs::read_to_string(roots[0].join("eval/chest.csv")).unwrap();
    assert!(chest.contains(",ls,") && chest.contains(",supervised,"));
}

#[test]
fn inspect_reads_both_artifact_kinds() {
    let f = fixture();
    let out = ok(&f.root, &["inspect", f.root.join("data/test.csids").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("samples 64"));
    let out = ok(&f.root, &["inspect", stage2(&f.root, "none").to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("stage stage2") && text.contains("encoder."));
}

#[test]
fn exit_codes_for_bad_config_and_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "preset = \"toy\"\nno_such_key = 1\n");
    let out = csifm(tmp.path(), &["generate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let missing = csifm(tmp.path(), &["generate", tmp.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    let usage = csifm(tmp.path(), &["pretrain", "x.toml", "--stage", "stage9"]);
    assert_eq!(usage.status.code(), Some(1));
    let no_encoder = csifm(tmp.path(), &["eval", "x.toml"]);
    assert_eq!(no_encoder.status.code(), Some(1));
    assert_eq!(csifm(tmp.path(), &["--help"]).status.code(), Some(0));
}
