use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_kinetos")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_with_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(bin()).args(args).env(key, value).output().expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_spec(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn near(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn unit_kernel(theta_min: f64) -> Value {
    json!({"form": "constant", "strength": 1.0, "theta_min": theta_min})
}

fn zero_drift() -> Value {
    json!({"matrix": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]})
}

fn shear_drift(s: f64) -> Value {
    json!({"matrix": [[0.0, s, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]})
}

/// All run files except the manifest, which carries the wall clock.
fn observable_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "manifest.json")
        .map(|e| (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn kernel_report_emits_the_analytic_constants() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "command": "kernel-report",
        "kernel": unit_kernel(1e-4),
        "seed": 1
    });
    let cfg = write_spec(tmp.path(), "kr.json", &spec);
    let out_dir = tmp.path().join("run");
    let out = run(&["kernel-report", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));

    let pi = std::f64::consts::PI;
    let summary = read_json(&out_dir.join("summary.json"));
    assert!(near(summary["bbar"].as_f64().unwrap(), pi, 1e-9));
    assert!(near(summary["Lambda"].as_f64().unwrap(), pi * pi - 4.0, 1e-9));
    assert!(near(summary["S"].as_f64().unwrap(), 4.0 * pi, 1e-6));
    assert!(summary["lambda"]["2"].as_f64().unwrap().abs() < 1e-10);
    assert!(near(summary["lambda"]["4"].as_f64().unwrap(), 4.0 * pi / 3.0, 1e-9));
}

#[test]
fn eig_without_drift_is_isotropic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "command": "eig",
        "kernel": unit_kernel(1e-3),
        "drift": zero_drift(),
        "seed": 1
    });
    let cfg = write_spec(tmp.path(), "eig.json", &spec);
    let out_dir = tmp.path().join("run");
    let out = run(&["eig", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));

    let summary = read_json(&out_dir.join("summary.json"));
    let bbar_n = summary["alpha"].as_f64().unwrap();
    assert!(summary["beta_bar"].as_f64().unwrap().abs() <= 1e-12);
    assert!(near(summary["gap"].as_f64().unwrap(), 2.0 * bbar_n, 1e-10));
    let iso = 1.0 / 3.0f64.sqrt();
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { iso } else { 0.0 };
            let got = summary["n_bar"][i][j].as_f64().unwrap();
            assert!(near(got, want, 1e-12), "n_bar[{i}][{j}] = {got}");
        }
    }
}

#[test]
fn negative_particle_count_exits_one_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "command": "simulate",
        "kernel": unit_kernel(1e-3),
        "drift": zero_drift(),
        "initial": {"law": "dirac", "point": [0.0, 0.0, 0.0]},
        "numeric": {"N": -5, "dt": 0.01, "T": 1.0},
        "seed": 1
    });
    let cfg = write_spec(tmp.path(), "bad.json", &spec);
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).contains("numeric.N"), "{}", stderr(&out));
}

#[test]
fn unknown_keys_exit_one_with_their_path() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "command": "eig",
        "kernel": {"form": "constant", "strength": 1.0, "theta_min": 1e-3, "thetamax": 2.0},
        "drift": zero_drift(),
        "seed": 1
    });
    let cfg = write_spec(tmp.path(), "bad.json", &spec);
    let out = run(&["eig", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).contains("kernel.thetamax"), "{}", stderr(&out));
}

#[test]
fn subcommand_and_spec_command_must_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "command": "eig",
        "kernel": unit_kernel(1e-3),
        "drift": zero_drift(),
        "seed": 1
    });
    let cfg = write_spec(tmp.path(), "eig.json", &spec);
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).contains("command"), "{}", stderr(&out));
}

#[test]
fn failed_checks_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "command": "eig",
        "kernel": unit_kernel(1e-3),
        "drift": zero_drift(),
        "numeric": {"tolerances": {"eig_residual": 1e-30}},
        "seed": 1
    });
    let cfg = write_spec(tmp.path(), "eig.json", &spec);
    let out = run(&["eig", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2, "{}", stderr(&out));
    assert!(stdout(&out).contains("check eig_residual: FAIL"), "{}", stdout(&out));
}

fn small_simulate_spec(seed: u64) -> Value {
    json!({
        "command": "simulate",
        "kernel": unit_kernel(1e-2),
        "drift": shear_drift(0.1),
        "initial": {"law": "gaussian", "mean": [0.1, 0.0, 0.0],
                     "cov": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]},
        "numeric": {"N": 4000, "dt": 0.01, "T": 0.2, "p_orders": [4.0]},
        "seed": seed
    })
}

#[test]
fn reruns_are_byte_identical_and_seed_changes_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_spec(tmp.path(), "sim.json", &small_simulate_spec(7));
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    let dir_c = tmp.path().join("c");

    for dir in [&dir_a, &dir_b] {
        let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(observable_files(&dir_a), observable_files(&dir_b));

    let out = run(&[
        "simulate", "--config", cfg.to_str().unwrap(), "--seed", "8", "--out", dir_c.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    assert_ne!(
        std::fs::read(dir_a.join("moments.csv")).unwrap(),
        std::fs::read(dir_c.join("moments.csv")).unwrap(),
        "a different master seed must produce a different trajectory"
    );
    let hash_a = read_json(&dir_a.join("manifest.json"))["config_hash"].clone();
    let hash_c = read_json(&dir_c.join("manifest.json"))["config_hash"].clone();
    assert_ne!(hash_a, hash_c, "the seed is part of the hashed spec");
}

#[test]
fn run_directory_spec_copy_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_spec(tmp.path(), "sim.json", &small_simulate_spec(11));
    let dir_a = tmp.path().join("a");
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir_a.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));

    // the stored canonical spec is itself a valid config for the same run
    let dir_b = tmp.path().join("b");
    let stored = dir_a.join("spec.json");
    let out = run(&["simulate", "--config", stored.to_str().unwrap(), "--out", dir_b.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    assert_eq!(observable_files(&dir_a), observable_files(&dir_b));
    assert_eq!(
        read_json(&dir_a.join("manifest.json"))["config_hash"],
        read_json(&dir_b.join("manifest.json"))["config_hash"]
    );
}

fn theta_min_sweep_manifest() -> Value {
    let job = |theta_min: f64| {
        json!({
            "command": "kernel-report",
            "kernel": {"form": "power_law", "kappa": 0.25, "strength": 1.0, "theta_min": theta_min},
            "numeric": {"p_orders": [3.0]},
            "seed": 1
        })
    };
    json!({"jobs": [job(1e-1), job(1e-2), job(1e-3)]})
}

fn scalar_column(csv: &str, name: &str) -> Vec<(usize, f64)> {
    csv.lines()
        .skip(1)
        .filter_map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            (cells.len() == 6 && cells[4] == name).then(|| {
                (cells[0].parse::<usize>().unwrap(), cells[5].parse::<f64>().unwrap())
            })
        })
        .collect()
}

#[test]
fn sweep_moment_multiplier_column_grows_as_the_cutoff_shrinks() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_spec(tmp.path(), "m.json", &theta_min_sweep_manifest());
    let out_dir = tmp.path().join("sw");
    let out = run(&["sweep", "--manifest", manifest.to_str().unwrap(), "--jobs", "1", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));

    let csv = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    let column = scalar_column(&csv, "lambda_n.3");
    assert_eq!(column.len(), 3, "{csv}");
    assert!(column[0].1 < column[1].1 && column[1].1 < column[2].1, "{column:?}");
}

#[test]
fn sweep_bytes_do_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_spec(tmp.path(), "m.json", &theta_min_sweep_manifest());
    let dir_a = tmp.path().join("one");
    let dir_b = tmp.path().join("three");
    let dir_c = tmp.path().join("env");

    let out = run(&["sweep", "--manifest", manifest.to_str().unwrap(), "--jobs", "1", "--out", dir_a.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let out = run(&["sweep", "--manifest", manifest.to_str().unwrap(), "--jobs", "3", "--out", dir_b.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let out = run_with_env(
        &["sweep", "--manifest", manifest.to_str().unwrap(), "--out", dir_c.to_str().unwrap()],
        "KINETOS_JOBS",
        "2",
    );
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));

    for dir in [&dir_b, &dir_c] {
        assert_eq!(
            std::fs::read(dir_a.join("aggregate.csv")).unwrap(),
            std::fs::read(dir.join("aggregate.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(dir_a.join("report.json")).unwrap(),
            std::fs::read(dir.join("report.json")).unwrap()
        );
        for job in ["job-000-kernel-report", "job-001-kernel-report", "job-002-kernel-report"] {
            assert_eq!(observable_files(&dir_a.join(job)), observable_files(&dir.join(job)));
        }
    }
}

#[test]
fn sweep_isolates_a_broken_job() {
    let tmp = tempfile::tempdir().unwrap();
    let good = json!({
        "command": "kernel-report",
        "kernel": unit_kernel(1e-3),
        "seed": 1
    });
    let bad = json!({
        "command": "simulate",
        "kernel": unit_kernel(1e-3),
        "drift": zero_drift(),
        "initial": {"law": "dirac", "point": [0.0, 0.0, 0.0]},
        "numeric": {"N": -5, "dt": 0.01, "T": 1.0},
        "seed": 1
    });
    let manifest = write_spec(tmp.path(), "m.json", &json!({"jobs": [good.clone(), bad, good]}));
    let out_dir = tmp.path().join("sw");
    let out = run(&["sweep", "--manifest", manifest.to_str().unwrap(), "--jobs", "2", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1, "an errored job surfaces in the sweep exit code");

    let report = read_json(&out_dir.join("report.json"));
    let jobs = report["jobs"].as_array().unwrap();
    assert_eq!(jobs.len(), 3);
    assert_eq!(jobs[0]["status"], "pass");
    assert_eq!(jobs[1]["status"], "error");
    assert_eq!(jobs[2]["status"], "pass");
    assert!(jobs[1]["error"].as_str().unwrap().contains("jobs[1].numeric.N"));

    let csv = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert!(!scalar_column(&csv, "bbar").is_empty(), "surviving jobs still aggregate");
}

#[test]
fn empty_sweep_reports_nothing_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_spec(tmp.path(), "m.json", &json!({"jobs": []}));
    let out_dir = tmp.path().join("sw");
    let out = run(&["sweep", "--manifest", manifest.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert_eq!(csv, "job,command,hash,status,scalar,value\n");
    assert_eq!(read_json(&out_dir.join("report.json"))["jobs"], json!([]));
}

fn stability_spec(seed: u64) -> Value {
    json!({
        "command": "stability",
        "kernel": unit_kernel(1e-2),
        "drift": shear_drift(0.15),
        "initial": {"law": "two_point", "a": [1.5, 0.6, -0.3], "b": [-1.5, -0.6, 0.3]},
        "numeric": {"N": 10000, "dt": 0.02, "T": 1.0, "p_order": 4.0,
                     "observations": 16, "max_windows": 40,
                     "grid": {"directions": 12, "radii": 10, "k_min": 0.1, "k_max": 8.0}},
        "seed": seed
    })
}

#[test]
fn eight_seed_replication_reports_rate_dispersion() {
    let tmp = tempfile::tempdir().unwrap();
    let jobs: Vec<Value> = (1..=8).map(stability_spec).collect();
    let manifest = write_spec(tmp.path(), "m.json", &json!({"jobs": jobs}));
    let out_dir = tmp.path().join("sw");
    let out = run(&["sweep", "--manifest", manifest.to_str().unwrap(), "--jobs", "1", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}\n{}", stderr(&out), stdout(&out));

    let report = read_json(&out_dir.join("report.json"));
    let replication = &report["theta_replication"];
    assert_eq!(replication["count"], 8, "{replication}");
    let mean = replication["mean"].as_f64().unwrap();
    let stddev = replication["stddev"].as_f64().unwrap();
    assert!(mean > 0.0, "decay rates are positive, got mean {mean}");
    assert_eq!(
        replication["dispersion_flag"].as_bool().unwrap(),
        stddev > 0.5 * mean.abs(),
        "flag matches its definition"
    );
    assert!(stddev < 0.5 * mean, "eight seeds of the same run agree, got {stddev} vs mean {mean}");
}

#[test]
fn contraction_between_matched_mean_states_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "command": "contraction",
        "kernel": unit_kernel(1e-2),
        "drift": shear_drift(0.157),
        "initial": {"law": "gaussian", "mean": [0.0, 0.0, 0.0],
                     "cov": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]},
        "initial_b": {"law": "gaussian", "mean": [0.0, 0.0, 0.0],
                       "cov": [[1.4, 0.0, 0.0], [0.0, 0.8, 0.0], [0.0, 0.0, 0.8]]},
        "numeric": {"N": 20000, "dt": 0.01, "T": 0.3, "observations": 6},
        "seed": 3
    });
    let cfg = write_spec(tmp.path(), "c.json", &spec);
    let out_dir = tmp.path().join("run");
    let out = run(&["contraction", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}\n{}", stderr(&out), stdout(&out));
    let summary = read_json(&out_dir.join("summary.json"));
    assert_eq!(summary["pass"], true);
    assert!(summary["d2_initial"].as_f64().unwrap() > 0.0);
    let ratios = std::fs::read_to_string(out_dir.join("ratios.csv")).unwrap();
    assert!(ratios.lines().count() >= 6, "{ratios}");
}

#[test]
fn comparison_bound_holds_for_a_covariance_gap() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "command": "comparison",
        "kernel": unit_kernel(1e-2),
        "drift": zero_drift(),
        "initial": {"law": "gaussian", "mean": [0.0, 0.0, 0.0],
                     "cov": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]},
        "initial_b": {"law": "gaussian", "mean": [0.0, 0.0, 0.0],
                       "cov": [[1.3, 0.0, 0.0], [0.0, 0.85, 0.0], [0.0, 0.0, 0.85]]},
        "numeric": {"N": 20000, "dt": 0.01, "T": 0.3, "p_order": 3.5, "observations": 6},
        "seed": 5
    });
    let cfg = write_spec(tmp.path(), "c.json", &spec);
    let out_dir = tmp.path().join("run");
    let out = run(&["comparison", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}\n{}", stderr(&out), stdout(&out));
    let summary = read_json(&out_dir.join("summary.json"));
    assert_eq!(summary["violations"], 0, "{summary}");
    assert!(summary["c2"].as_f64().unwrap() > 0.0);
}

#[test]
fn planar_shear_pipeline_tracks_the_mass_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "command": "shear",
        "kernel": unit_kernel(1e-2),
        "drift": {"scenario": {"kind": "planar", "shear": 0.04, "mass": 2.0,
                                 "relax": [[0.4, 0.0, 0.0], [0.0, 0.4, 0.0], [0.0, 0.0, 0.4]]}},
        "initial": {"law": "two_point", "a": [1.4, 0.5, -0.3], "b": [-1.4, -0.5, 0.3]},
        "numeric": {"N": 10000, "dt": 0.02, "T": 1.0, "p_order": 3.0,
                     "observations": 8, "max_windows": 40, "k_scale": 2.0,
                     "grid": {"directions": 12, "radii": 10, "k_min": 0.1, "k_max": 8.0}},
        "seed": 9
    });
    let cfg = write_spec(tmp.path(), "sh.json", &spec);
    let out_dir = tmp.path().join("run");
    let out = run(&["shear", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "{}\n{}", stderr(&out), stdout(&out));

    let summary = read_json(&out_dir.join("summary.json"));
    // trace(R) = 1.2, M = 2: limiting mass factor exp(-0.6)
    assert!(near(summary["mass_limit"].as_f64().unwrap(), (-0.6f64).exp(), 1e-12));
    assert!(summary["mass_error_max"].as_f64().unwrap() <= 1e-9);
    let frames = std::fs::read_to_string(out_dir.join("frames.csv")).unwrap();
    assert!(frames.starts_with("t,tau,mass,e11"), "{frames}");
    assert!(frames.lines().count() >= 8);
}
