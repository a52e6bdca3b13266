use std::process::{Command, Output};

use dyvm::vim::{Model, ModelConfig};
use serde_json::Value;

fn dyvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyvm")).args(args).output().expect("spawn dyvm")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("valid JSON report")
}

#[test]
fn flops_grid_has_one_row_per_cell() {
    let out = dyvm(&["flops", "--preset", "vim-s", "--token-ratios", "0.5,0.7,0.9", "--block-ratios", "0.6,1"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], dyvm::flops::CSV_HEADER);
    assert_eq!(lines.len() - 1, 3 * 2);
}

#[test]
fn flops_single_point_matches_pruned_small_model() {
    let out = dyvm(&["flops", "--preset", "vim-s", "--token-ratio", "0.7", "--block-ratio", "0.8"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let gflops: f64 = text.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((gflops - 3.29).abs() / 3.29 < 0.05, "{gflops}");
}

#[test]
fn flops_unit_ratios_reduce_nothing() {
    let out = dyvm(&["flops", "--preset", "vim-t", "--token-ratio", "1", "--block-ratio", "1", "--format", "json"]);
    let v = json(&out);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["reports"][0]["reduction_vs_baseline"], 0.0);
}

#[test]
fn consistency_default_passes_and_reports_histogram() {
    let out = dyvm(&["consistency", "--trials", "200"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["schema_version"], 1);
    assert!(v["strategies"][0]["max_deviation"].as_f64().unwrap() < 1e-10);
    assert!(v["ha_extra_ops_histogram"].as_object().unwrap().len() > 1);
}

#[test]
fn consecutive_masks_make_all_strategies_agree() {
    let out = dyvm(&["consistency", "--mask", "consecutive", "--trials", "200"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    for row in v["strategies"].as_array().unwrap() {
        assert_eq!(row["max_deviation"], 0.0, "{row}");
    }
    assert_eq!(v["ha_extra_ops_histogram"].as_object().unwrap().keys().collect::<Vec<_>>(), ["0"]);
}

#[test]
fn forward_reports_schedule_and_zero_deviation() {
    let out = dyvm(&["forward", "--token-ratio", "0.7"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    // 64 patches: floor(0.7·64), floor(0.49·64).
    assert_eq!(v["expected_schedule"], serde_json::json!([44, 31]));
    assert_eq!(v["deterministic_stage_counts"], serde_json::json!([[44, 44], [31, 31]]));
    assert!(v["train_vs_infer_deviation"].as_f64().unwrap() < 1e-10);
}

#[test]
fn forward_unit_ratios_equal_baseline() {
    let out = dyvm(&["forward", "--token-ratio", "1", "--block-ratio", "1", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["train_vs_infer_deviation"], 0.0);
    assert_eq!(v["checks"]["baseline_identical"], true);
}

#[test]
fn forward_loads_saved_weights() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("w");
    let model = Model::init(ModelConfig::preset("desk").unwrap(), 9).unwrap();
    model.weights.save(&stem).unwrap();
    let a = dyvm(&["forward", "--seed", "9"]);
    let b = dyvm(&["forward", "--seed", "9", "--weights", stem.to_str().unwrap()]);
    assert_eq!(b.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn gradcheck_negative_control_exits_one() {
    let good = dyvm(&["gradcheck", "--seeds", "5"]);
    assert_eq!(good.status.code(), Some(0));
    let bad = dyvm(&["gradcheck", "--seeds", "5", "--corrupt-adjoint"]);
    assert_eq!(bad.status.code(), Some(1));
    let v = json(&bad);
    let failing: Vec<&str> = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["passed"] == false)
        .map(|r| r["check"].as_str().unwrap())
        .collect();
    assert!(failing.contains(&"scan_dx"), "{failing:?}");
}

#[test]
fn bad_input_exits_two() {
    assert_eq!(dyvm(&["flops", "--preset", "vim-xl"]).status.code(), Some(2));
    assert_eq!(dyvm(&["flops", "--token-ratio", "1.5"]).status.code(), Some(2));
    assert_eq!(dyvm(&["forward", "--config", "/nonexistent/config.json"]).status.code(), Some(2));
    assert_eq!(dyvm(&["forward", "--batch", "0"]).status.code(), Some(2));
    assert_eq!(dyvm(&["consistency", "--max-len", "0"]).status.code(), Some(2));
}

#[test]
fn config_file_overrides_preset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let cfg = r#"{"name":"tiny","image_size":8,"patch_size":2,"embed_dim":8,"n_layers":2,"n_state":4,
        "expand":2,"conv_kernel":3,"prune_layers":[1],"token_ratio":0.5,"block_ratio":0.9,"num_classes":3}"#;
    std::fs::write(&path, cfg).unwrap();
    let out = dyvm(&["forward", "--config", path.to_str().unwrap(), "--preset", "vim-b"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["model"], "tiny");
    assert_eq!(v["expected_schedule"], serde_json::json!([8]));
}

#[test]
fn out_flag_writes_file_and_nothing_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let out = dyvm(&["gradcheck", "--seeds", "2", "--format", "csv", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("check,cases,max_rel_error,passed\n"));
}
