use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crowdcount::config::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crowdcount"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg: RunConfig = serde_json::from_str(
        r#"{"seed": 3,
            "scene": {"width": 20, "height": 20},
            "dataset": {"base_count": 10, "levels": 2, "shots_per_level": 4, "delta_range": [-2, -1], "test_images": 4},
            "splits": {"train_weak": 5, "val": 2, "test": 3},
            "train": {"epochs": 2, "model": {"backbone_channels": [3, 3], "backbone_dilations": [1, 2], "branch_channels": [2, 1]}},
            "seeds": [0, 1]}"#,
    )
    .unwrap();
    cfg.out_dir = dir.join("out");
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn default_dataset_has_200_images_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        ok(&run(&["gen-data", "--out", dir.path().join(sub).to_str().unwrap()]));
    }
    let read = |s: &str| std::fs::read(dir.path().join(s).join("data/manifest.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    let m: serde_json::Value = serde_json::from_slice(&read("a")).unwrap();
    assert_eq!(1 + m["weak"].as_array().unwrap().len(), 200);
}

#[test]
fn invalid_scene_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"scene": {"object_radius_range": [4.0, 2.0]}}"#).unwrap();
    let out = run(&["gen-data", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene.object_radius_range"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"trian": {}}"#).unwrap();
    let out = run(&["gen-data", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_without_a_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--mode", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    ok(&run(&["gen-data", "--config", c]));
    ok(&run(&["train", "--config", c, "--mode", "matt"]));
    let run_dir = dir.path().join("out/runs/matt-seed0");
    for f in ["config.json", "history.csv", "best.ckpt", "final.ckpt"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let resolved = RunConfig::load(&run_dir.join("config.json")).unwrap();
    assert_eq!(resolved.train.mode.name(), "matt");

    let ckpt = run_dir.join("best.ckpt");
    ok(&run(&["eval", "--config", c, "--checkpoint", ckpt.to_str().unwrap()]));
    assert!(dir.path().join("out/eval_test.json").exists());

    ok(&run(&["render", "--config", c, "--checkpoint", ckpt.to_str().unwrap()]));
    let pgms = std::fs::read_dir(dir.path().join("out/render"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 4 + 2);

    let missing = run(&["eval", "--config", c, "--checkpoint", "/nonexistent.ckpt"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn baseline1_history_has_no_count_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    ok(&run(&["gen-data", "--config", c]));
    ok(&run(&["train", "--config", c, "--mode", "baseline1"]));
    let mut rdr = csv::Reader::from_path(dir.path().join("out/runs/baseline1-seed0/history.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "loss_count").unwrap();
    let split = headers.iter().position(|h| h == "split").unwrap();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        if &rec[split] == "train" {
            assert_eq!(rec[col].parse::<f64>().unwrap(), 0.0);
        }
    }
}

#[test]
fn compare_and_ablate_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    ok(&run(&["gen-data", "--config", c]));
    let mut first = Vec::new();
    for _ in 0..2 {
        ok(&run(&["compare", "--config", c, "--seeds", "0,1"]));
        first.push(std::fs::read(dir.path().join("out/compare.csv")).unwrap());
    }
    assert_eq!(first[0], first[1]);
    let text = String::from_utf8(first.pop().unwrap()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "method,seed,split,mae,mse,rer,n_images,runtime_seconds,status");
    assert_eq!(text.lines().count(), 1 + 3 * 2);

    ok(&run(&["ablate", "--config", c, "--sweep", "branches=0..2", "--seeds", "0"]));
    let text = std::fs::read_to_string(dir.path().join("out/ablate_branches.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3);
    let bad = run(&["ablate", "--config", c, "--sweep", "colour"]);
    assert_eq!(bad.status.code(), Some(2));
}
