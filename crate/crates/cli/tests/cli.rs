//! End-to-end checks of the command-line surface: outputs, exit codes, and
//! the documented failure modes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pce")
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pce_cli_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn simulate_row_count_and_truth() {
    let dir = scratch("simulate");
    run_ok(&[
        "simulate",
        "--dgp",
        "3",
        "--n",
        "1000",
        "--seed",
        "7",
        "--out",
        &path(&dir, "s3"),
    ]);
    let csv = fs::read_to_string(dir.join("s3/dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1001, "header plus 1000 rows");
    assert!(csv.starts_with("z,s,y,w\n"));

    run_ok(&[
        "simulate",
        "--dgp",
        "4",
        "--n",
        "50",
        "--seed",
        "7",
        "--out",
        &path(&dir, "s4"),
    ]);
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("s4/truth.json")).unwrap()).unwrap();
    let pces = truth["pces"].as_array().unwrap();
    let tau01 = pces
        .iter()
        .find(|e| e[0]["s1"] == 0.0 && e[0]["s0"] == 1.0)
        .expect("defier stratum present");
    assert!((tau01[1].as_f64().unwrap() + 0.3).abs() < 1e-12);

    // Oracle strata live in their own file, not in the dataset.
    let oracle = fs::read_to_string(dir.join("s4/oracle.csv")).unwrap();
    assert!(oracle.starts_with("s1,s0\n"));
    assert_eq!(oracle.lines().count(), 51);
}

#[test]
fn simulate_rejects_invalid_probability_override() {
    let dir = scratch("badparam");
    let out = run(&[
        "simulate",
        "--dgp",
        "3",
        "--n",
        "10",
        "--param",
        "pi_11_w1=0.9",
        "--out",
        &path(&dir, "bad"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sum"));
}

#[test]
fn population_estimate_recovers_design3_truth() {
    let dir = scratch("pop");
    run_ok(&[
        "simulate",
        "--dgp",
        "3",
        "--population",
        "--out",
        &path(&dir, "pop"),
    ]);
    run_ok(&[
        "estimate",
        "--data",
        &path(&dir, "pop/dataset.csv"),
        "--method",
        "discrete-ai",
        "--joint",
        "mono",
        "--out",
        &path(&dir, "est"),
    ]);
    let ests: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("est/estimates.json")).unwrap()).unwrap();
    let tau11 = ests
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["stratum"]["s1"] == 1.0 && e["stratum"]["s0"] == 1.0)
        .unwrap();
    assert!((tau11["point"].as_f64().unwrap() - 0.3).abs() < 1e-10);
}

#[test]
fn prop2_on_linear_design_exits_with_diagnostic_code() {
    let dir = scratch("lindep");
    run_ok(&[
        "simulate",
        "--dgp",
        "1",
        "--n",
        "3000",
        "--seed",
        "5",
        "--out",
        &path(&dir, "d1"),
    ]);
    let out = run(&[
        "estimate",
        "--data",
        &path(&dir, "d1/dataset.csv"),
        "--method",
        "prop2",
        "--basis",
        "poly:1",
        "--out",
        &path(&dir, "est"),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("linear-independence"));
}

#[test]
fn weighting_on_single_w_category_equals_ipw_ate() {
    let dir = scratch("singlew");
    // Hand-built dataset: one W cell, so the stratum weight collapses to 1.
    fs::write(
        dir.join("d.csv"),
        "z,s,y,w\n1,1,2,1\n1,1,4,1\n1,0,3,1\n0,1,1,1\n0,0,1,1\n0,1,4,1\n",
    )
    .unwrap();
    fs::write(
        dir.join("d.schema.json"),
        serde_json::json!({
            "s": {"type": "discrete", "categories": [0.0, 1.0]},
            "w": {"type": "discrete", "categories": [1.0]},
            "y": "continuous",
            "n_covariates": 0
        })
        .to_string(),
    )
    .unwrap();
    run_ok(&[
        "estimate",
        "--data",
        &path(&dir, "d.csv"),
        "--method",
        "weighting",
        "--s1",
        "1",
        "--out",
        &path(&dir, "est"),
    ]);
    let ests: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("est/estimates.json")).unwrap()).unwrap();
    // IPW ATE: pi = 1/2, HT means 3 and 2.
    let point = ests[0]["point"].as_f64().unwrap();
    assert!((point - 1.0).abs() < 1e-12, "{point}");
}

#[test]
fn diagnose_reports_rank_and_independence_outcomes() {
    let dir = scratch("diag");
    run_ok(&[
        "simulate",
        "--dgp",
        "3",
        "--n",
        "4000",
        "--seed",
        "9",
        "--out",
        &path(&dir, "d3"),
    ]);
    run_ok(&[
        "diagnose",
        "--data",
        &path(&dir, "d3/dataset.csv"),
        "--out",
        &path(&dir, "r3"),
    ]);
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("r3/diagnostics.json")).unwrap())
            .unwrap();
    let check = |name: &str| {
        rep["checks"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["check"] == name)
            .unwrap_or_else(|| panic!("{name} missing"))
            .clone()
    };
    assert_eq!(check("rank-constant-control")["pass"], true);
    assert_eq!(check("monotonicity")["pass"], true);
    assert_eq!(check("rank-general")["pass"], true);

    // Intermediate independent of the auxiliary: rank must fail.
    fs::write(
        dir.join("ind.csv"),
        "z,s,y,w\n1,1,1,1\n1,0,0,1\n0,1,1,1\n0,0,0,1\n1,1,1,2\n1,0,0,2\n0,1,1,2\n0,0,0,2\n",
    )
    .unwrap();
    fs::write(
        dir.join("ind.schema.json"),
        serde_json::json!({
            "s": {"type": "discrete", "categories": [0.0, 1.0]},
            "w": {"type": "discrete", "categories": [1.0, 2.0]},
            "y": "binary",
            "n_covariates": 0
        })
        .to_string(),
    )
    .unwrap();
    run_ok(&[
        "diagnose",
        "--data",
        &path(&dir, "ind.csv"),
        "--out",
        &path(&dir, "rind"),
    ]);
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("rind/diagnostics.json")).unwrap())
            .unwrap();
    let rank = rep["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["check"] == "rank-constant-control")
        .unwrap();
    assert_eq!(rank["pass"], false);

    // Linear intermediate mean: the independence check fails on design 1.
    run_ok(&[
        "simulate",
        "--dgp",
        "1",
        "--n",
        "3000",
        "--seed",
        "5",
        "--out",
        &path(&dir, "d1"),
    ]);
    run_ok(&[
        "diagnose",
        "--data",
        &path(&dir, "d1/dataset.csv"),
        "--basis",
        "poly:1",
        "--out",
        &path(&dir, "r1"),
    ]);
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("r1/diagnostics.json")).unwrap())
            .unwrap();
    let lin = rep["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["check"] == "linear-independence")
        .unwrap();
    assert_eq!(lin["pass"], false);
}

#[test]
fn sweep_emits_table_shaped_csv() {
    let dir = scratch("sweep");
    run_ok(&[
        "simulate",
        "--dgp",
        "jobs",
        "--n",
        "1500",
        "--rho-true",
        "0.4",
        "--seed",
        "3",
        "--out",
        &path(&dir, "j"),
    ]);
    run_ok(&[
        "sweep",
        "--data",
        &path(&dir, "j/dataset.csv"),
        "--rho",
        "0,0.2,0.4,0.6,0.8",
        "--bootstrap",
        "30",
        "--seed",
        "3",
        "--out",
        &path(&dir, "s"),
    ]);
    let csv = fs::read_to_string(dir.join("s/sweep.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    // s1, s0 plus four columns per rho value.
    assert_eq!(header.len(), 2 + 5 * 4);
    assert!(header.contains(&"point@rho=0.4"));
    assert!(header.contains(&"excludes_zero@rho=0.8"));
    assert_eq!(csv.lines().count(), 1 + 5, "five default strata");
}

#[test]
fn report_bins_traces_and_grids_surface() {
    let dir = scratch("report");
    run_ok(&[
        "simulate",
        "--dgp",
        "3",
        "--n",
        "500",
        "--seed",
        "2",
        "--out",
        &path(&dir, "d"),
    ]);
    run_ok(&[
        "estimate",
        "--data",
        &path(&dir, "d/dataset.csv"),
        "--method",
        "bayes",
        "--model",
        "3",
        "--prior",
        "beta11",
        "--iterations",
        "300",
        "--burn-in",
        "100",
        "--chains",
        "2",
        "--seed",
        "2",
        "--out",
        &path(&dir, "b"),
    ]);
    let n_traces = fs::read_dir(dir.join("b/traces")).unwrap().count();
    run_ok(&[
        "report",
        "--traces",
        &path(&dir, "b/traces"),
        "--out",
        &path(&dir, "rep"),
    ]);
    let n_hists = fs::read_dir(dir.join("rep/histograms")).unwrap().count();
    assert_eq!(n_traces, n_hists, "one histogram per trace");

    // Surface from a plane-producing method; monotone truth means the grid
    // decreases along s1 and increases along s0.
    run_ok(&[
        "simulate",
        "--dgp",
        "jobs",
        "--n",
        "4000",
        "--rho-true",
        "0.4",
        "--seed",
        "4",
        "--out",
        &path(&dir, "j"),
    ]);
    run_ok(&[
        "estimate",
        "--data",
        &path(&dir, "j/dataset.csv"),
        "--method",
        "mom",
        "--rho",
        "0.4",
        "--out",
        &path(&dir, "m"),
    ]);
    run_ok(&[
        "report",
        "--coefficients",
        &path(&dir, "m/coefficients.json"),
        "--grid",
        "9",
        "--out",
        &path(&dir, "surf"),
    ]);
    let csv = fs::read_to_string(dir.join("surf/surface.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 81);
    // tau decreases in the stratum gap s1 - s0 for the monotone truth.
    let at = |i: usize, j: usize| rows[i * 9 + j][2];
    for j in 0..9 {
        for i in 1..9 {
            assert!(at(i, j) < at(i - 1, j), "tau must decrease along s1");
        }
    }
    for i in 0..9 {
        for j in 1..9 {
            assert!(at(i, j) > at(i, j - 1), "tau must increase along s0");
        }
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = scratch("config");
    fs::write(
        dir.join("cfg.json"),
        serde_json::json!({
            "seed": 7,
            "simulate": {"dgp": "3", "n": 120}
        })
        .to_string(),
    )
    .unwrap();
    run_ok(&[
        "simulate",
        "--config",
        &path(&dir, "cfg.json"),
        "--out",
        &path(&dir, "a"),
    ]);
    let csv = fs::read_to_string(dir.join("a/dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 121);
    // Explicit flag wins over the config value.
    run_ok(&[
        "simulate",
        "--config",
        &path(&dir, "cfg.json"),
        "--n",
        "60",
        "--out",
        &path(&dir, "b"),
    ]);
    let csv = fs::read_to_string(dir.join("b/dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
}

#[test]
fn numerical_failure_exits_with_code_4() {
    let dir = scratch("exit4");
    // One W cell has no control units: empirical propensity fitting fails.
    fs::write(
        dir.join("d.csv"),
        "z,s,y,w\n1,1,1,1\n0,0,0,1\n1,1,1,2\n1,0,0,2\n",
    )
    .unwrap();
    fs::write(
        dir.join("d.schema.json"),
        serde_json::json!({
            "s": {"type": "discrete", "categories": [0.0, 1.0]},
            "w": {"type": "discrete", "categories": [1.0, 2.0]},
            "y": "binary",
            "n_covariates": 0
        })
        .to_string(),
    )
    .unwrap();
    let out = run(&[
        "estimate",
        "--data",
        &path(&dir, "d.csv"),
        "--method",
        "weighting",
        "--out",
        &path(&dir, "est"),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty cell"));
}

#[test]
fn constant_control_route_warns_when_control_intermediate_varies() {
    let dir = scratch("ccwarn");
    run_ok(&[
        "simulate",
        "--dgp",
        "3",
        "--n",
        "2000",
        "--seed",
        "6",
        "--out",
        &path(&dir, "d"),
    ]);
    let out = run_ok(&[
        "estimate",
        "--data",
        &path(&dir, "d/dataset.csv"),
        "--method",
        "discrete-ai",
        "--out",
        &path(&dir, "est"),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("constant-control"));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = scratch("threads");
    run_ok(&[
        "simulate",
        "--dgp",
        "jobs",
        "--n",
        "1500",
        "--rho-true",
        "0.4",
        "--seed",
        "8",
        "--out",
        &path(&dir, "d"),
    ]);
    for (tag, threads) in [("one", "1"), ("four", "4")] {
        run_ok(&[
            "estimate",
            "--data",
            &path(&dir, "d/dataset.csv"),
            "--method",
            "mom",
            "--rho",
            "0.4",
            "--bootstrap",
            "50",
            "--seed",
            "8",
            "--threads",
            threads,
            "--out",
            &path(&dir, tag),
        ]);
    }
    let a = fs::read(dir.join("one/estimates.json")).unwrap();
    let b = fs::read(dir.join("four/estimates.json")).unwrap();
    assert_eq!(
        a, b,
        "bootstrap intervals must not depend on the thread count"
    );
}

#[test]
fn manifest_lists_every_output() {
    let dir = scratch("manifest");
    run_ok(&[
        "simulate",
        "--dgp",
        "3",
        "--n",
        "50",
        "--seed",
        "1",
        "--out",
        &path(&dir, "s"),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("s/manifest.json")).unwrap()).unwrap();
    let outputs: Vec<String> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let mut on_disk: Vec<String> = fs::read_dir(dir.join("s"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    on_disk.sort();
    assert_eq!(
        outputs, on_disk,
        "manifest inventory must match the directory"
    );
    assert_eq!(manifest["seed"], 1);
    assert!(manifest["versions"]["pce-core"].is_string());
}
