use std::path::{Path, PathBuf};
use std::process::Command;

const QUICK: &str = r#"{"data":{"scenes":12,"val_ratio":0.25,"gen":{"n_points":10}},
"model":{"queries":8,"dim":16,"layers":2,"points":10,"samples":2,"pv_queries":4,"pv_layers":1,"pv_points":10,"mimic_pool":8},
"optim":{"steps":6,"pv_steps":6}}"#;

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("quick.json");
        std::fs::write(&config, QUICK).unwrap();
        Self { dir, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> i32 {
        let status = Command::new(env!("CARGO_BIN_EXE_hdmap"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.out(out))
            .args(args)
            .env("RUST_LOG", "error")
            .status()
            .unwrap();
        status.code().unwrap()
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_without_image_checkpoint_is_a_config_error() {
    let r = Run::new();
    assert_eq!(r.run("t", &["train"]), 2);
    assert_eq!(r.run("t", &["--flags", "baseline", "train"]), 0);
}

#[test]
fn bad_config_exits_with_two() {
    let r = Run::new();
    std::fs::write(&r.config, r#"{"not_a_field": 1}"#).unwrap();
    assert_eq!(r.run("x", &["split"]), 2);
    let r = Run::new();
    assert_eq!(r.run("x", &["--flags", "warp_drive", "split"]), 2);
}

#[test]
fn oracle_eval_scores_one() {
    let r = Run::new();
    assert_eq!(r.run("o", &["eval", "--oracle"]), 0);
    let m = json(&r.out("o/metrics.json"));
    assert_eq!(m["mAP"].as_f64(), Some(1.0));
    assert!(m["config_hash"].is_string());
}

#[test]
fn full_workflow_outputs_carry_hash_and_digests() {
    let r = Run::new();
    assert_eq!(r.run("pv", &["pretrain-pv"]), 0);
    let pv = r.out("pv/pv_checkpoint.json");
    assert_eq!(r.run("tr", &["train", "--pv-ckpt", pv.to_str().unwrap()]), 0);
    let ckpt = r.out("tr/checkpoint.json");
    let c = ckpt.to_str().unwrap();
    assert_eq!(r.run("ev", &["eval", "--ckpt", c]), 0);
    assert_eq!(r.run("evm", &["--mode", "mimic", "eval", "--ckpt", c]), 0);
    assert_eq!(r.run("inf", &["infer", "--ckpt", c]), 0);

    let hash = json(&r.out("ev/metrics.json"))["config_hash"].as_str().unwrap().to_string();
    assert_eq!(json(&ckpt)["meta"]["config_hash"].as_str(), Some(hash.as_str()));
    let manifest = json(&r.out("tr/manifest-train.json"));
    assert_eq!(manifest["config_hash"].as_str(), Some(hash.as_str()));
    let digest = manifest["files"]["checkpoint.json"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    for line in std::fs::read_to_string(r.out("tr/train_log.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["config_hash"].as_str(), Some(hash.as_str()));
        assert!(v["total"].as_f64().unwrap().is_finite());
    }
    let svg = std::fs::read_to_string(r.out("inf/scene_00000000.svg")).unwrap();
    assert!(svg.contains(&hash));

    // full and mimic runs differ in configuration, so merging needs the override
    let a = r.out("ev/metrics.json");
    let b = r.out("evm/metrics.json");
    assert_eq!(r.run("rep", &["report", a.to_str().unwrap(), b.to_str().unwrap()]), 2);
    assert_eq!(r.run("rep", &["report", "--allow-mixed", a.to_str().unwrap(), b.to_str().unwrap()]), 0);
    let csv = std::fs::read_to_string(r.out("rep/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(r.run("rep1", &["report", a.to_str().unwrap(), a.to_str().unwrap()]), 0);
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let r = Run::new();
    assert_eq!(r.run("a", &["--flags", "baseline", "train"]), 0);
    assert_eq!(r.run("b", &["--flags", "baseline", "train"]), 0);
    let a = std::fs::read(r.out("a/checkpoint.json")).unwrap();
    let b = std::fs::read(r.out("b/checkpoint.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gen_and_split_write_scenes_and_manifest() {
    let r = Run::new();
    assert_eq!(r.run("g", &["gen"]), 0);
    assert_eq!(std::fs::read_dir(r.out("g/scenes")).unwrap().count(), 12);
    assert_eq!(r.run("s", &["--seed", "3", "split"]), 0);
    let s = json(&r.out("s/split.json"));
    assert_eq!(s["train"].as_array().unwrap().len() + s["val"].as_array().unwrap().len(), 12);
    assert_eq!(s["overlap_ratio"].as_f64(), Some(0.0));
}

#[test]
fn ablate_emits_four_rows() {
    let r = Run::new();
    assert_eq!(r.run("ab", &["ablate", "--seeds", "0"]), 0);
    let csv = std::fs::read_to_string(r.out("ab/ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["baseline", "+ua_decoder", "+ui2dprompt", "+both"]);
    assert_eq!(r.run("ab", &["ablate", "--seeds", "x"]), 2);
}
