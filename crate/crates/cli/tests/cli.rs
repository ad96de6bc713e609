use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[data]
train_images = 4
eval_images = 3
[model]
d_model = 16
heads = 4
points = 2
encoder_layers = 1
head_hidden = 16
backbone_channels = 4,8,8,8
[schedule]
proposals_start = 20
proposals_end = 10
[train]
epochs = 2
lr = 1e-3
lr_drop_epoch = 1
";

fn detr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detr")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.ini");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).to_string();
    assert_eq!(s.trim_end().lines().count(), 1, "expected one stderr line, got {s:?}");
    s.trim_end().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_twice_with_same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = detr(&["train", "--config", &cfg, "--seed", "7", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let la = std::fs::read(a.join("metrics.jsonl")).unwrap();
    let lb = std::fs::read(b.join("metrics.jsonl")).unwrap();
    assert_eq!(la, lb);
    let text = String::from_utf8(la).unwrap();
    assert_eq!(text.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["epoch", "k_proposals", "loss_total", "loss_cls", "loss_l1", "loss_giou", "ap50_eval"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["k_proposals"], 20);
}

#[test]
fn eval_prints_one_json_line_and_viz_writes_svg() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    assert!(detr(&["train", "--config", &cfg, "--out", s(&run)]).status.success());
    let data = dir.path().join("coco");
    let g = detr(&["gen-data", "--out", s(&data), "--count", "3", "--seed", "5"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    assert!(data.join("annotations.json").exists());

    let ckpt = run.join("checkpoint.json");
    let o = detr(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    for key in ["ap50", "ap75", "map", "recall"] {
        let x = v[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }

    let svg = dir.path().join("refs.svg");
    let o = detr(&["viz", "--checkpoint", s(&ckpt), "--stage", "init", "--out", s(&svg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<circle").count(), 10);
}

#[test]
fn ablate_init_axis_writes_one_row_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("epochs = 2", "epochs = 1").replace("train_images = 4", "train_images = 2"));
    let csv = dir.path().join("t.csv");
    let o = detr(&["ablate", "--config", &cfg, "--axis", "init", "--out", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let values: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["dense", "learnable", "grid", "center", "border"]);
}

#[test]
fn unknown_keys_are_listed_in_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1\nfoo = 2\n[model]\nbar = 3\n");
    let o = detr(&["train", "--config", &cfg, "--out", s(&dir.path().join("r"))]);
    assert!(!o.status.success());
    assert_eq!(stderr_line(&o), "error: config: unknown keys: foo, model.bar");
}

#[test]
fn missing_dataset_and_config_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\ndataset = nowhere/annotations.json\n");
    let o = detr(&["train", "--config", &cfg, "--out", s(&dir.path().join("r"))]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error: dataset: dataset not found"));

    let o = detr(&["train", "--config", s(&dir.path().join("absent.ini"))]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error: config: cannot read config"));

    let o = detr(&["eval", "--checkpoint", s(&dir.path().join("none.json"))]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error: io: "));
}

#[test]
fn usage_errors_are_one_line() {
    let o = detr(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("error: usage: "));
}
