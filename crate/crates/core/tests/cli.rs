use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use filmseg::cli::{REPORT_FILE, TABLE_FILE};
use filmseg::metrics::{dice10, paired_ttest, read_report_csv};
use filmseg::pipeline::{Manifest, Split};
use filmseg::train::BEST_CHECKPOINT;
use filmseg::unet::{load_checkpoint, Placement};

fn filmseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_filmseg")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = filmseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(root: &Path, count: usize, split: [f64; 3], extra: serde_json::Value) -> String {
    let mut cfg = serde_json::json!({
        "phantom": {"volume_size": [16, 16, 16], "lesion_radius_range": [2.0, 3.0], "num_benign_masses": 1},
        "dataset": {"count": count, "split": {"train": split[0], "val": split[1], "test": split[2]}, "seed": 9},
        "architecture": {"stage_channels": [2, 4], "bottleneck_channels": 4},
        "train": {"epochs": 1, "batches_per_epoch": 2, "patch_size": [16, 16, 16],
                  "inference": {"patch": [16, 16, 16], "overlap": 0.5}},
        "data_dir": root.join("data"),
        "out_dir": root.join("runs"),
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = root.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_placement_exits_with_usage_error() {
    let out = filmseg(&["train", "--placement", "encdec"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["none", "encoder", "decoder", "bottleneck", "all"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 4, [0.5, 0.25, 0.25], serde_json::json!({}));
    let out = filmseg(&["train", "--config", &cfg, "--placement", "none"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_writes_every_case_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 5, [0.6, 0.2, 0.2], serde_json::json!({}));
    run_ok(&["generate", "--config", &cfg]);
    let data = dir.path().join("data");
    let manifest = Manifest::load(&data).unwrap();
    assert_eq!(manifest.cases.len(), 5);
    for e in &manifest.cases {
        for ext in ["json", "raw", "mask"] {
            assert!(data.join(format!("{}.{ext}", e.case_id)).is_file(), "{} {ext}", e.case_id);
        }
    }
}

#[test]
fn hundred_cases_split_sixty_twenty_twenty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        100,
        [0.6, 0.2, 0.2],
        serde_json::json!({
            "phantom": {"volume_size": [8, 8, 8], "lesion_radius_range": [1.0, 1.5]},
            "dataset": {"count": 100, "split": {"train": 0.6, "val": 0.2, "test": 0.2}, "seed": 9,
                        "policy": {"lesion_count": [1, 1], "benign_mass_count": [0, 0]}},
        }),
    );
    run_ok(&["generate", "--config", &cfg]);
    let manifest = Manifest::load(&dir.path().join("data")).unwrap();
    let sizes = [Split::Train, Split::Val, Split::Test].map(|s| manifest.ids(s).len());
    assert_eq!(sizes, [60, 20, 20]);
}

#[test]
fn baseline_checkpoint_records_no_film() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 4, [0.5, 0.25, 0.25], serde_json::json!({}));
    run_ok(&["generate", "--config", &cfg]);
    let out = dir.path().join("none");
    run_ok(&["train", "--config", &cfg, "--placement", "none", "--out", out.to_str().unwrap()]);
    let (model, header) = load_checkpoint(&out.join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(header.placement, Placement::None);
    assert!(model.film_sites().is_empty());

    let best = out.join(BEST_CHECKPOINT);
    let eval = run_ok(&["evaluate", "--config", &cfg, "--placement", "none", "--checkpoint", best.to_str().unwrap()]);
    assert!(!eval.stdout.is_empty());
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn comparison_table_is_recomputable_from_run_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        10,
        [0.4, 0.2, 0.4],
        serde_json::json!({"placements": ["none", "all"], "seeds": [0, 1]}),
    );
    run_ok(&["generate", "--config", &cfg]);
    run_ok(&["compare", "--config", &cfg]);

    let runs = dir.path().join("runs");
    let table = fs::read_to_string(runs.join(TABLE_FILE)).unwrap();
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();

    let per_case = |placement: &str, seed: u64| {
        read_report_csv(&runs.join(placement).join(format!("seed_{seed}")).join(REPORT_FILE)).unwrap()
    };
    let averaged = |placement: &str| -> Vec<f64> {
        let (a, b) = (per_case(placement, 0), per_case(placement, 1));
        a.iter().zip(&b).map(|(x, y)| 0.5 * (x.dice + y.dice)).collect()
    };

    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let placement = f[0];
        let scores = [0, 1].map(|s| per_case(placement, s).iter().map(|c| c.dice).collect::<Vec<_>>());
        let dice = scores.clone().map(|v| mean(&v));
        let d10 = scores.map(|v| dice10(&v).unwrap());
        let sd = ((dice[0] - dice[1]).powi(2) / 2.0).sqrt();
        let num = |name: &str| f[col(name)].parse::<f64>().unwrap();
        assert!((num("dice_mean") - mean(&dice)).abs() < 1e-12, "{line}");
        assert!((num("dice_sd") - sd).abs() < 1e-12, "{line}");
        assert!((num("dice10_mean") - mean(&d10)).abs() < 1e-12, "{line}");
        if placement == "all" {
            let t = paired_ttest(&averaged("all"), &averaged("none")).unwrap();
            let p = f[col("p_vs_none")];
            if t.p.is_nan() {
                assert!(p.is_empty() || p == "NaN", "{line}");
            } else {
                assert!((p.parse::<f64>().unwrap() - t.p).abs() < 1e-12, "{line}");
            }
        }
        rows += 1;
    }
    assert_eq!(rows, 2);
}
