use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn odr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odr")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn demo_spec() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo_synth.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A small city written to `dir/data` plus a run config at `dir/run.json`.
fn setup(dir: &Path, n: usize, days: usize, train: Value) -> PathBuf {
    let mut spec = demo_spec();
    spec["city"]["n_regions"] = json!(n);
    spec["days"] = json!(days);
    let spec_path = dir.join("synth.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let o = odr(&["synth", "--config", spec_path.to_str().unwrap(), "--out", dir.join("data").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = json!({
        "data": {
            "regions": "data/regions.csv",
            "attributes": "data/attributes.csv",
            "vocab": "data/attribute_vocab.csv",
            "trips": "data/trips.csv"
        },
        "output_dir": "out",
        "start": spec["start"],
        "frames": days * 24,
        "preset": "custom",
        "train": train
    });
    let cfg = dir.join("run.json");
    std::fs::write(&cfg, run.to_string()).unwrap();
    cfg
}

fn small_train() -> Value {
    json!({"embed_size": 4, "epochs": 2, "k1": 2, "k2": 2})
}

fn sha(path: &Path) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn synth_writes_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = demo_spec();
    spec["city"]["n_regions"] = json!(4);
    spec["days"] = json!(1);
    let spec_path = dir.path().join("s.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let files = ["regions.csv", "attributes.csv", "attribute_vocab.csv", "trips.csv", "ground_truth_intensity.csv"];
    let mut hashes = Vec::new();
    for out in ["a", "b"] {
        let out = dir.path().join(out);
        let o = odr(&["synth", "--config", spec_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        hashes.push(files.iter().map(|f| sha(&out.join(f))).collect::<Vec<_>>());
    }
    assert_eq!(hashes[0], hashes[1]);
    let regions = std::fs::read_to_string(dir.path().join("a/regions.csv")).unwrap();
    assert_eq!(regions.lines().count(), 5);
}

#[test]
fn synth_rejects_bad_spec_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = demo_spec();
    spec["city"]["n_regions"] = json!(100);
    let p = dir.path().join("s.json");
    std::fs::write(&p, spec.to_string()).unwrap();
    let o = odr(&["synth", "--config", p.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("n_regions"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&odr(&["frobnicate"])), 1);
    assert_eq!(code(&odr(&["train"])), 1);
    assert_eq!(code(&odr(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 4, 2, small_train());
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&odr(&["prepare", "--config", c, "--ablate", "no_such_flag"])), 1);
    assert_eq!(code(&odr(&["prepare", "--config", c, "--preset", "paris"])), 1);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"data":{"regions":"r","attributes":"a","vocab":"v","trips":"t"},"output_dir":"o","extra":1}"#).unwrap();
    assert_eq!(code(&odr(&["prepare", "--config", bad.to_str().unwrap()])), 1);
}

#[test]
fn missing_input_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 4, 2, small_train());
    std::fs::remove_file(dir.path().join("data/trips.csv")).unwrap();
    let o = odr(&["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("trips.csv"), "{}", stderr(&o));
}

#[test]
fn too_many_clusters_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 4, 2, json!({"k2": 9, "embed_size": 4}));
    let o = odr(&["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("k2 = 9"), "{}", stderr(&o));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 6, 3, small_train());
    let c = cfg.to_str().unwrap();

    let o = odr(&["prepare", "--config", c]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let prepared = dir.path().join("out/prepared/k1-2_k2-2_s0");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(prepared.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["split"], json!({"train": 57, "val": 7, "test": 8}));
    for f in ["od_series.json", "cluster_labels.csv", "competition_matrix.csv", "population_levels.csv"] {
        assert!(prepared.join(f).exists(), "{f}");
    }
    let before = sha(&prepared.join("manifest.json"));
    let o = odr(&["prepare", "--config", c]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("up to date"));
    assert_eq!(before, sha(&prepared.join("manifest.json")));

    // Training before preparing another seed is refused.
    assert_eq!(code(&odr(&["train", "--config", c, "--seed", "5"])), 2);

    let o = odr(&["train", "--config", c]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("out/runs/cluster-s0");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,train_loss,val_rmse,val_mae,val_smape,val_pcc");
    assert_eq!(history.lines().count(), 3);
    for f in ["best.ckpt", "best.ckpt.manifest.json", "run_manifest.json", "attention.csv", "attention_history.csv", "metrics_test.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let rm: Value = serde_json::from_str(&std::fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    for s in ["clustering", "init", "negative_sampling", "synth"] {
        assert!(rm["streams"][s].is_u64(), "{s}");
    }

    let o = odr(&["evaluate", "--config", c]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics_eval.json")).unwrap()).unwrap();
    let keys: Vec<&str> = m.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["frames", "mae", "model", "pcc", "rmse", "seed", "smape", "variant"]);
    assert_eq!(m["variant"], "cluster");
    assert_eq!(m["frames"], 8);
    assert_eq!(std::fs::read(run.join("metrics_eval.json")).unwrap(), std::fs::read(run.join("metrics_test.json")).unwrap());

    // A checkpoint from a different config is refused.
    let mut other: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    other["train"]["lr"] = json!(0.5);
    let other_path = dir.path().join("other.json");
    std::fs::write(&other_path, other.to_string()).unwrap();
    let ckpt = run.join("best.ckpt");
    let o = odr(&["evaluate", "--config", other_path.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("refused"), "{}", stderr(&o));

    let o = odr(&["baseline", "--config", c]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for b in ["ha", "gm", "iom", "rm"] {
        let m: Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("out/baselines/metrics_{b}.json"))).unwrap()).unwrap();
        assert_eq!(m["model"], b);
        for k in ["rmse", "mae", "smape", "pcc"] {
            assert!(m[k].is_f64(), "{b} {k}");
        }
    }

    let out = dir.path().join("att.csv");
    let o = odr(&["dump-attention", "--config", c, "--hours", "0,8,17", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut sums = std::collections::BTreeMap::<usize, f64>::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *sums.entry(f[0].parse().unwrap()).or_default() += f[3].parse::<f64>().unwrap();
    }
    assert_eq!(sums.keys().copied().collect::<Vec<_>>(), vec![0, 8, 17]);
    for s in sums.values() {
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert_eq!(code(&odr(&["dump-attention", "--config", c, "--hours", "24", "--out", out.to_str().unwrap()])), 1);
}

#[test]
fn train_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 5, 2, small_train());
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&odr(&["prepare", "--config", c])), 0);
    let run = dir.path().join("out/runs/edge-no_pop-s0");
    let mut seen = Vec::new();
    for _ in 0..2 {
        let o = odr(&["train", "--config", c, "--variant", "edge", "--ablate", "no_pop"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        seen.push((sha(&run.join("history.csv")), sha(&run.join("best.ckpt")), sha(&run.join("attention_history.csv"))));
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 4, 2, json!({"embed_size": 4, "epochs": 3, "k1": 2, "k2": 2, "lr": 1e300}));
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&odr(&["prepare", "--config", c])), 0);
    let o = odr(&["train", "--config", c]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
