use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const SMALL: &str = r#"{
  "seed": 7,
  "data": { "train_size": 96, "eval_size": 64 },
  "train": { "epochs": 3 },
  "finetune": { "epochs": 1, "lr": 0.01 },
  "probe": { "shard_fraction": 0.25, "runs": 3 },
  "landscape": { "extent": 0.5, "resolution": 5 }
}
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hessquant"))
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).arg("--out").arg(out).output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn error_line(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(err.lines().last().expect("an error line")).expect("error line is JSON")
}

#[test]
fn probe_writes_one_row_per_run_and_layer() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    ok(&run(&["train"], &cfg, &out));
    ok(&run(&["probe"], &cfg, &out));
    let text = fs::read_to_string(out.join("probe_runs.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 2);
    let sens = fs::read_to_string(out.join("sensitivity.csv")).unwrap();
    assert_eq!(sens.lines().count(), 1 + 2);
}

#[test]
fn reversed_allocation_reports_equal_sizes() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    ok(&run(&["train"], &cfg, &out));
    ok(&run(&["probe"], &cfg, &out));
    ok(&run(&["allocate", "--reverse"], &cfg, &out));
    ok(&run(&["allocate"], &cfg, &out));
    let fwd = json(&out.join("allocation.json"));
    let rev = json(&out.join("allocation_reversed.json"));
    assert_eq!(fwd["sizes"], rev["sizes"]);
    let bits = |v: &Value| v["layers"].as_array().unwrap().iter().map(|l| l["bits"].as_u64().unwrap()).collect::<Vec<_>>();
    let (b, r) = (bits(&fwd), bits(&rev));
    assert_ne!(b, r);
    let mut sorted_b = b.clone();
    let mut sorted_r = r.clone();
    sorted_b.sort();
    sorted_r.sort();
    assert_eq!(sorted_b, sorted_r);
}

#[test]
fn explicit_bits_flag_overrides_sensitivity() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    ok(&run(&["allocate", "--bits", "4,2"], &cfg, &out));
    let doc = json(&out.join("allocation.json"));
    assert_eq!(doc["source"], "explicit");
    assert_eq!(doc["layers"][0]["bits"], 4);
    assert_eq!(doc["layers"][1]["bits"], 2);
}

#[test]
fn groups_flag_changes_group_counts() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    ok(&bin().args(["allocate", "--bits", "3,3", "--groups", "2", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap());
    let doc = json(&out.join("allocation.json"));
    assert_eq!(doc["group_counts"]["layer1.attn.wq"], 2);
    assert_eq!(doc["group_counts"]["layer1.ffn.w1"], 2);
}

/// Runs the whole pipeline twice into separate directories and compares
/// every file byte for byte; also checks the stamps.
#[test]
fn pipeline_is_byte_identical_across_runs() {
    let (dir, cfg) = setup(SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["pipeline"], &cfg, &a));
    let single = bin()
        .env("QB_THREADS", "1")
        .args(["pipeline", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    ok(&single);
    let list = |d: &Path| {
        let mut v: Vec<String> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    assert_eq!(list(&a), list(&b));
    for name in list(&a) {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name} differs");
    }

    let hash = sha(&fs::read(&cfg).unwrap());
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["config_hash"], hash);
    assert_eq!(manifest["seed"], 7);
    let listed = manifest["artifacts"].as_array().unwrap();
    assert_eq!(listed.len(), list(&a).len() - 1);
    for entry in listed {
        let bytes = fs::read(a.join(entry["path"].as_str().unwrap())).unwrap();
        assert_eq!(entry["sha256"], sha(&bytes));
    }
    for name in list(&a) {
        if name.ends_with(".json") {
            let v = json(&a.join(&name));
            assert_eq!(v["config_hash"], hash, "{name}");
            assert_eq!(v["seed"], 7, "{name}");
        } else if name.ends_with(".jsonl") {
            for line in fs::read_to_string(a.join(&name)).unwrap().lines() {
                let v: Value = serde_json::from_str(line).unwrap();
                assert_eq!(v["config_hash"], hash, "{name}");
            }
        }
    }
    for name in ["probe_runs.csv", "sensitivity.csv", "allocations.csv", "sizes.csv", "accuracy.csv", "kl.csv", "metadata.json"] {
        assert!(a.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn rerunning_a_command_is_idempotent() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    ok(&run(&["train"], &cfg, &out));
    let first = fs::read(out.join("baseline.qbtc")).unwrap();
    ok(&run(&["train"], &cfg, &out));
    assert_eq!(first, fs::read(out.join("baseline.qbtc")).unwrap());
}

#[test]
fn seed_flag_changes_results() {
    let (dir, cfg) = setup(SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["train"], &cfg, &a));
    ok(&run(&["train", "--seed", "8"], &cfg, &b));
    assert_ne!(fs::read(a.join("baseline.qbtc")).unwrap(), fs::read(b.join("baseline.qbtc")).unwrap());
    assert_eq!(json(&b.join("train.json"))["seed"], 8);
}

#[test]
fn unknown_config_field_exits_with_config_error() {
    let (dir, cfg) = setup(r#"{ "bogus": 1 }"#);
    let o = run(&["train"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"]["kind"], "config");
}

#[test]
fn invalid_flag_values_exit_with_config_error() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("out");
    assert_eq!(run(&["allocate", "--bits", "3,3,3"], &cfg, &out).status.code(), Some(2));
    assert_eq!(run(&["allocate", "--bits", "3,3", "--groups", "zero"], &cfg, &out).status.code(), Some(2));
    let o = bin().env("QB_THREADS", "none").args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_io_error() {
    let (dir, cfg) = setup(SMALL);
    let o = run(&["qat"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(4));
    let e = error_line(&o);
    assert_eq!(e["error"]["code"], 4);
    assert!(e["error"]["message"].as_str().unwrap().contains("baseline.qbtc"));
    let o = run(&["train"], &dir.path().join("absent.json"), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn divergent_training_exits_with_numeric_error() {
    let (dir, cfg) = setup(r#"{ "data": { "train_size": 64, "eval_size": 32 }, "train": { "lr": 1e30, "epochs": 2 } }"#);
    let o = run(&["train"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"]["kind"], "numeric");
}

#[test]
fn csv_datasets_are_read_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let rows: String = (0..40)
        .map(|i| {
            let t = if i % 2 == 0 { 3 } else { 4 };
            format!("0,{t},{t},{t},1,2,5,{t},7,8,9,10,11,12,13,{t},{}\n", usize::from(t == 3))
        })
        .collect();
    fs::write(dir.path().join("train.csv"), &rows).unwrap();
    fs::write(dir.path().join("eval.csv"), &rows).unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, r#"{ "data": { "train_csv": "train.csv", "eval_csv": "eval.csv" }, "train": { "epochs": 2 } }"#).unwrap();
    let out = dir.path().join("out");
    ok(&run(&["train"], &cfg, &out));
    let metrics = fs::read_to_string(out.join("train_metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2 * 2);
}
