use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn feller() -> Command {
    Command::new(env!("CARGO_BIN_EXE_feller"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("feller-cli-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d.join(name)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_filter_runs_only_the_selected_criterion() {
    let out = run(feller().args(["validate", "--filter", "1"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["passed"], 1);
    assert_eq!(v["failed"], 0);
    assert_eq!(v["criteria"][0]["id"], 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("[PASS] criterion  1"));
}

#[test]
fn tampered_weights_fail_contraction() {
    let out = run(feller().args(["validate", "--filter", "7", "--tamper-weight", "0.3"]));
    assert_eq!(out.status.code(), Some(1));
    let v = json(&out);
    assert_eq!(v["tamper_weight"], 0.3);
    assert_eq!(v["criteria"][0]["passed"], false);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(feller().args(["chernoff", "run", "--t", "1"])).status.code(), Some(2));
    assert_eq!(run(feller().args(["oracle", "eval", "--kernel", "nope", "--f", "x", "--t", "1", "--x", "0"])).status.code(), Some(2));
    assert_eq!(run(feller().arg("frobnicate")).status.code(), Some(2));
    let zero = run(feller().env("CHERNOFF_THREADS", "0").args(["validate", "--filter", "1"]));
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn chernoff_run_from_flags_writes_value_table() {
    let out_csv = scratch("flags.csv");
    let g = configs().join("line_heat.json");
    let out = run(feller().env("CHERNOFF_THREADS", "1").args([
        "chernoff", "run", "--generator", arg(&g), "--variant", "general", "--t", "0.5", "--n", "3",
        "--strategy", "tree", "--f", "x^2", "--seed", "9", "--out", arg(&out_csv),
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# schema=1 seed=9 config="));
    assert_eq!(lines[1], "variant,strategy,t,n,point_or_node,value,stderr");
    let cols: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(&cols[..5], &["general", "tree", "0.5", "3", "0"]);
    assert!((cols[5].parse::<f64>().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(cols[6], "");
}

#[test]
fn config_overrides_flags() {
    let summary = scratch("summary.json");
    let c = configs().join("quadratic_exact.json");
    let out = run(feller().args(["chernoff", "run", "--config", arg(&c), "--t", "9", "--summary", arg(&summary)]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(v["convergence"]["config"]["t"], 0.75);
    assert_eq!(v["convergence"]["exact"], true);
}

#[test]
fn walk_sample_is_reproducible_from_seed() {
    let g = configs().join("circle_heat.json");
    let sample = |seed: &str, name: &str| {
        let p = scratch(name);
        let out = run(feller().args([
            "walk", "sample", "--kind", "flow", "--generator", arg(&g), "--t", "1", "--n", "8", "--paths", "5",
            "--seed", seed, "--x", "0.5", "--out", arg(&p),
        ]));
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(p).unwrap()
    };
    let a = sample("4", "a.csv");
    assert_eq!(a, sample("4", "b.csv"));
    assert_ne!(a, sample("5", "c.csv"));
    assert_eq!(a.lines().nth(1), Some("path_id,time,coord1"));
    // 8 sub-samples per step plus the endpoint, for each of 5 paths
    assert_eq!(a.lines().count(), 2 + 5 * (8 * 8 + 1));
}

#[test]
fn walk_stats_emits_json() {
    let g = configs().join("line_heat.json");
    let out = run(feller().args([
        "walk", "stats", "--generator", arg(&g), "--t", "1", "--n", "16", "--paths", "4000", "--f", "x^2",
        "--reference", "normal:1", "--seed", "2",
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["n_samples"], 4000);
    let (m, se) = (v["mean_f"].as_f64().unwrap(), v["stderr_f"].as_f64().unwrap());
    assert!((m - 1.0).abs() < 4.0 * se, "{m} ± {se}");
    assert!(v["ks_distance"].as_f64().unwrap() < 0.2);
}

#[test]
fn oracle_eval_prints_heat_semigroup_value() {
    let out = run(feller().args(["oracle", "eval", "--kernel", "wrapped-s1", "--f", "cos(x)", "--t", "1", "--x", "0.5"]));
    assert_eq!(out.status.code(), Some(0));
    let v: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((v - (-0.5f64).exp() * 0.5f64.cos()).abs() < 1e-12);
}

#[test]
fn oracle_fd_writes_grid() {
    let p = scratch("fd.csv");
    let g = configs().join("circle_heat.json");
    let out = run(feller().args([
        "oracle", "fd", "--generator", arg(&g), "--f0", "cos(x)", "--t", "1", "--nodes", "256", "--steps", "100",
        "--out", arg(&p),
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(p).unwrap();
    assert_eq!(text.lines().count(), 2 + 256);
    let first: Vec<f64> = text.lines().nth(2).unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert!((first[1] - (-0.5f64).exp()).abs() < 1e-3);
}
