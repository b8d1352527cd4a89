use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use terraseg::model::{Checkpoint, CheckpointMeta, UNet, UNetConfig};
use terraseg::raster::tsrf;
use terraseg::stacker::StackSpec;

fn terraseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_terraseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = terraseg(args);
    assert!(
        o.status.success(),
        "terraseg {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn small_config(dir: &Path, seed: u64) -> PathBuf {
    let stack = StackSpec {
        tile_size: 16,
        ..StackSpec::desk()
    };
    let cfg = json!({
        "seed": seed,
        "stack": stack,
        "synth": { "n_tiles": 12, "tile_size": 16 },
        "split": { "k": 3 },
        "train": { "epochs": 2, "batch_size": 4 },
    });
    let path = dir.join(format!("config_{seed}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn maps_in(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_str().unwrap().ends_with(".prob.tsrf"))
        .collect();
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_pipeline(ws: &Path, config: &Path) {
    for stage in [
        &["synth"][..],
        &["catalog"],
        &["tiles"],
        &["split"],
        &["train", "--val-fold", "0"],
        &["predict", "--fold", "0"],
        &["eval", "--auc"],
    ] {
        let mut args = stage.to_vec();
        args.extend(["--config", s(config), "--out", s(ws)]);
        ok(&args);
    }
}

#[test]
fn pipeline_is_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 4);
    let ws = dir.path().join("ws");
    run_pipeline(&ws, &config);

    let log = fs::read_to_string(ws.join("reports/train_log.jsonl")).unwrap();
    let last: Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.join("reports/metrics.json")).unwrap()).unwrap();
    let (logged, evaluated) = (last["val_iou"].as_f64().unwrap(), report["iou"].as_f64().unwrap());
    assert!((logged - evaluated).abs() <= 1e-6, "log {logged} vs eval {evaluated}");
    for name in ["epoch_01.tsck", "epoch_02.tsck", "last.tsck", "best.tsck"] {
        assert!(ws.join("checkpoints").join(name).exists(), "{name} missing");
    }
    assert!(fs::read_to_string(ws.join("reports/metrics.txt")).unwrap().contains("IoU"));

    // Predicting again gives identical bytes.
    let first: Vec<_> = fs::read_dir(ws.join("predictions"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.clone(), fs::read(&p).unwrap())
        })
        .collect();
    ok(&["predict", "--fold", "0", "--config", s(&config), "--out", s(&ws)]);
    for (p, bytes) in first {
        assert_eq!(fs::read(&p).unwrap(), bytes, "{} changed", p.display());
    }

    // Blending a directory with itself reproduces it.
    let preds = ws.join("predictions");
    ok(&["blend", s(&preds), s(&preds), "--out", s(&ws)]);
    for p in maps_in(&preds) {
        let blended = tsrf::read(&ws.join("blend").join(p.file_name().unwrap())).unwrap();
        assert_eq!(blended.data(), tsrf::read(&p).unwrap().data());
    }
}

#[test]
fn zero_checkpoint_predicts_one_half_and_files_blend() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 1);
    let ws = dir.path().join("ws");
    for stage in ["synth", "catalog", "tiles"] {
        ok(&[stage, "--config", s(&config), "--out", s(&ws)]);
    }
    let ck = Checkpoint {
        model: UNet::zeros(UNetConfig::desk(16)).unwrap(),
        meta: CheckpointMeta::default(),
    };
    let ck_path = dir.path().join("zero.tsck");
    ck.save(&ck_path).unwrap();
    ok(&["predict", "--checkpoint", s(&ck_path), "--config", s(&config), "--out", s(&ws)]);
    let maps = maps_in(&ws.join("predictions"));
    assert_eq!(maps.len(), 12);
    for p in &maps {
        assert!(tsrf::read(p).unwrap().data().iter().all(|&v| v == 0.5));
    }
    let out = dir.path().join("mean.tsrf");
    ok(&["blend", s(&maps[0]), s(&maps[0]), "-o", s(&out)]);
    assert!(tsrf::read(&out).unwrap().data().iter().all(|&v| v == 0.5));
    // Maps from different tiles are on different grids.
    let o = terraseg(&["blend", s(&maps[0]), s(&maps[1]), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn temporal_split_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 2);
    let ws = dir.path().join("ws");
    for stage in ["synth", "catalog", "tiles"] {
        ok(&[stage, "--config", s(&config), "--out", s(&ws)]);
    }
    // The corpus is dated 2019: validating on 2019 routes every tile to fold 1.
    ok(&["split", "--temporal", "2019", "--config", s(&config), "--out", s(&ws)]);
    let csv = fs::read_to_string(ws.join("folds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",1")));
    let o = terraseg(&["split", "--temporal", "2018", "--config", s(&config), "--out", s(&ws)]);
    assert_eq!(o.status.code(), Some(2));

    let first_id = csv.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let over = dir.path().join("override.csv");
    fs::write(&over, format!("tile_id,fold\n{first_id},2\n")).unwrap();
    ok(&["split", "--override", s(&over), "--config", s(&config), "--out", s(&ws)]);
    let csv = fs::read_to_string(ws.join("folds.csv")).unwrap();
    assert!(csv.contains(&format!("{first_id},2\n")));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let five = small_config(dir.path(), 5);
    let seven = small_config(dir.path(), 7);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", s(&five), "--seed", "7", "--out", s(&a)]);
    ok(&["synth", "--config", s(&seven), "--out", s(&b)]);
    let scene = "corpus/scenes/DeforestationMask/2019-08-15.tsrf";
    assert_eq!(fs::read(a.join(scene)).unwrap(), fs::read(b.join(scene)).unwrap());
}

#[test]
fn malformed_input_gives_structured_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let bad_config = dir.path().join("bad.json");
    fs::write(&bad_config, "{ not json").unwrap();
    let missing = dir.path().join("missing");
    let cases: Vec<Vec<&str>> = vec![
        vec!["catalog", s(&missing), "--out", s(dir.path())],
        vec!["train", "--tiles", s(&missing), "--out", s(dir.path())],
        vec!["eval", "--pred", s(&missing), "--out", s(dir.path())],
        vec!["synth", "--config", s(&bad_config), "--out", s(dir.path())],
        vec!["synth", "--n-tiles", "0", "--out", s(dir.path())],
        vec!["train", "--threads", "0"],
        vec!["split", "--k", "three"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let o = terraseg(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let stderr = String::from_utf8_lossy(&o.stderr);
        let last = stderr.lines().last().unwrap_or_default();
        let diag: Value = serde_json::from_str(last).unwrap_or_else(|_| panic!("{args:?}: {stderr}"));
        assert_eq!(diag["exit_code"], 2);
        assert_eq!(diag["kind"], "bad_input");
    }
}

#[test]
fn help_lists_every_flag() {
    let top = ok(&["--help"]);
    for flag in ["--config", "--seed", "--threads", "--out"] {
        assert!(top.contains(flag), "top-level help lacks {flag}");
    }
    for (cmd, flags) in [
        ("synth", &["--n-tiles", "--tile-size"][..]),
        ("tiles", &["--catalog", "--spec", "--land-mask"]),
        ("split", &["--k", "--cell-size", "--temporal", "--override"]),
        ("train", &["--tiles", "--folds", "--val-fold", "--epochs", "--batch-size", "--lr", "--keep-prob"]),
        ("predict", &["--checkpoint", "--tiles", "--folds", "--fold"]),
        ("eval", &["--pred", "--gt", "--threshold", "--auc"]),
    ] {
        let help = ok(&[cmd, "--help"]);
        for flag in flags {
            assert!(help.contains(flag), "{cmd} help lacks {flag}");
        }
    }
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", s(dir.path())]);
    assert!(!out.contains("FAIL"));
    assert!(dir.path().join("reports/gradcheck.json").exists());
}
