//! Drives the `svitt` binary through a complete small run.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn svitt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svitt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = svitt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(lr: f64) -> Value {
    let stage = |frames: usize, q_v: f64, block: bool| {
        let mut s = json!({"frames": frames, "q_v": q_v, "q_m": 0.5, "epochs": 1, "lr": lr, "batch": 4});
        if block {
            s["k_local"] = json!(1);
            s["k_random"] = json!(1);
            s["block_size"] = json!(2);
        }
        s
    };
    json!({
        "model": {
            "frames": 2, "frame_height": 16, "frame_width": 16, "dim": 16, "heads": 2, "mlp_ratio": 2,
            "visual_depth": 3, "text_depth": 2, "multimodal_depth": 1, "text_len": 8
        },
        "corpus": {"n_clips": 20, "frames": 8, "size": 16, "n_eval": 8, "sprite": 5},
        "schedule": [stage(2, 0.7, false), stage(4, 0.6, true)],
        "train": {"max_steps": 2}
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, "cfg.json", &tiny_config(1e-3));
    ok(d, &["gen-data", "--config", &cfg, "--seed", "3", "--out", "data"]);
    assert_eq!(fs::read_dir(d.join("data")).unwrap().count(), 21);

    ok(d, &["train", "--config", &cfg, "--seed", "3", "--out", "run"]);
    let csv = fs::read_to_string(d.join("run/stage1_metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss_total,loss_vtc,loss_vtm,loss_mlm,lr"));
    assert_eq!(csv.lines().count(), 3);

    ok(d, &["train", "--config", &cfg, "--seed", "3", "--out", "again"]);
    for f in ["stage0.ckpt", "stage1.ckpt", "stage0_metrics.csv", "stage1_metrics.csv"] {
        assert_eq!(fs::read(d.join("run").join(f)).unwrap(), fs::read(d.join("again").join(f)).unwrap(), "{f}");
    }

    ok(d, &["train", "--config", &cfg, "--seed", "3", "--out", "single", "--stage", "0", "--max-steps", "1"]);
    ok(d, &["train", "--config", &cfg, "--seed", "3", "--out", "single", "--stage", "1", "--init", "single/stage0.ckpt"]);
    assert!(d.join("single/stage1.ckpt").exists());

    let eval: Value = serde_json::from_str(&ok(d, &["eval", "--config", &cfg, "--out", "ev", "--ckpt", "run/stage1.ckpt"])).unwrap();
    let (r1, r10) = (eval["r1"].as_f64().unwrap(), eval["r10"].as_f64().unwrap());
    assert!((0.0..=r10).contains(&r1) && r10 <= 100.0);
    assert!(d.join("ev/retrieval.json").exists());

    let probe: Value = serde_json::from_str(&ok(d, &["probe", "--config", &cfg, "--out", "pr", "--ckpt", "run/stage1.ckpt"])).unwrap();
    assert!(probe["delta"].is_number());

    ok(d, &["expand", "--ckpt", "run/stage0.ckpt", "--frames", "8", "--out", "ex"]);
    assert!(d.join("ex/expanded.ckpt").exists());

    ok(d, &["export-masks", "--config", &cfg, "--out", "mk", "--ckpt", "run/stage1.ckpt", "--clip", "2"]);
    let masks = fs::read_to_string(d.join("mk/masks_clip2.csv")).unwrap();
    assert!(masks.starts_with("layer,frame,row,col,kept\n"));

    let out = svitt(d, &["export-masks", "--config", &cfg, "--out", "mk", "--ckpt", "run/stage1.ckpt", "--clip", "99"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cost_with_full_size_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let report: Value = serde_json::from_str(&ok(tmp.path(), &["cost", "--paper-dims", "--frames", "4"])).unwrap();
    let edges = report["total_edges"].as_f64().unwrap();
    assert!((edges / 7.47e6 - 1.0).abs() < 0.005, "{edges}");
    let out = svitt(tmp.path(), &["cost", "--paper-dims", "--k-local", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_configs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("junk.json"), "{\"model\": {\"dim\": \"wide\"}}").unwrap();
    assert_eq!(svitt(d, &["validate-schedule", "--config", "junk.json"]).status.code(), Some(2));
    assert_eq!(svitt(d, &["validate-schedule", "--config", "missing.json"]).status.code(), Some(2));

    let mut cfg = tiny_config(1e-3);
    ok(d, &["validate-schedule", "--config", &write_config(d, "good.json", &cfg)]);
    cfg["schedule"][1]["q_v"] = json!(0.9);
    let bad = write_config(d, "bad.json", &cfg);
    let out = svitt(d, &["validate-schedule", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let report: Value = serde_json::from_str(&stderr[..stderr.rfind('}').unwrap() + 1]).unwrap();
    assert_eq!(report["violations"][0]["constraint"], "keep_rate_not_decreasing");
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut cfg = tiny_config(1e30);
    cfg["train"]["max_steps"] = json!(null);
    cfg["schedule"][0]["epochs"] = json!(30);
    let cfg = write_config(d, "hot.json", &cfg);
    ok(d, &["gen-data", "--config", &cfg, "--out", "data"]);
    let out = svitt(d, &["train", "--config", &cfg, "--out", "run", "--stage", "0"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("run/stage0_last_good.ckpt").exists());
}
