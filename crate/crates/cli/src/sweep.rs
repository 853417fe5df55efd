use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{self, ConfigIssue, ExperimentSpec};
use crate::shell;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepManifest {
    pub jobs: Vec<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobStatus {
    Pass,
    CheckFail,
    Error,
}

impl JobStatus {
    fn label(&self) -> &'static str {
        match self {
            JobStatus::Pass => "pass",
            JobStatus::CheckFail => "check-fail",
            JobStatus::Error => "error",
        }
    }
}

#[derive(Debug)]
struct JobResult {
    command: String,
    hash: String,
    status: JobStatus,
    output_dir: PathBuf,
    summary: Value,
    error: Option<String>,
}

pub fn load_manifest(path: &Path) -> Result<SweepManifest, Vec<ConfigIssue>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        vec![ConfigIssue { path: "<file>".into(), msg: format!("{}: {e}", path.display()) }]
    })?;
    serde_json::from_str(&text)
        .map_err(|e| vec![ConfigIssue { path: "<manifest>".into(), msg: e.to_string() }])
}

fn job_spec(raw: &Value, index: usize) -> Result<ExperimentSpec, Vec<ConfigIssue>> {
    let text = serde_json::to_string(raw).expect("value serializes");
    config::parse_spec(&text).map_err(|issues| {
        issues
            .into_iter()
            .map(|i| ConfigIssue { path: format!("jobs[{index}].{}", i.path), msg: i.msg })
            .collect()
    })
}

fn run_job(spec: &ExperimentSpec, out: &Path) -> JobResult {
    let hash = config::config_hash(spec);
    let command = spec.command.name().to_string();
    let outcome = catch_unwind(AssertUnwindSafe(|| shell::run_to_dir(spec, out)));
    match outcome {
        Ok(Ok(run)) => JobResult {
            command,
            hash,
            status: if run.pass { JobStatus::Pass } else { JobStatus::CheckFail },
            output_dir: out.to_path_buf(),
            summary: run.summary,
            error: None,
        },
        Ok(Err(msg)) => JobResult {
            command,
            hash,
            status: JobStatus::Error,
            output_dir: out.to_path_buf(),
            summary: Value::Null,
            error: Some(msg),
        },
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "job panicked".into());
            JobResult {
                command,
                hash,
                status: JobStatus::Error,
                output_dir: out.to_path_buf(),
                summary: Value::Null,
                error: Some(msg),
            }
        }
    }
}

/// Flatten every numeric leaf of a summary into (dotted path, value) rows,
/// sorted by path so the aggregate is byte-stable.
fn flatten_scalars(value: &Value, prefix: &str, rows: &mut Vec<(String, f64)>) {
    match value {
        Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                rows.push((prefix.to_string(), x));
            }
        }
        Value::Bool(b) => rows.push((prefix.to_string(), f64::from(u8::from(*b)))),
        Value::Object(map) => {
            for (key, sub) in map {
                let path =
                    if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
                flatten_scalars(sub, &path, rows);
            }
        }
        _ => {}
    }
}

enum Prepared {
    Ready(Box<ExperimentSpec>, PathBuf),
    /// Job that never gets to run: (best-effort command name, why).
    Broken(String, String),
}

fn prepare_jobs(manifest: &SweepManifest, out_root: Option<&Path>) -> Vec<Prepared> {
    let mut prepared = Vec::with_capacity(manifest.jobs.len());
    let mut dirs_seen: Vec<PathBuf> = Vec::new();
    for (i, raw) in manifest.jobs.iter().enumerate() {
        let command_guess = raw
            .get("command")
            .and_then(Value::as_str)
            .unwrap_or("?")
            .to_string();
        let spec = match job_spec(raw, i) {
            Ok(spec) => spec,
            Err(issues) => {
                prepared.push(Prepared::Broken(command_guess, join_issues(&issues)));
                continue;
            }
        };
        let issues: Vec<ConfigIssue> = config::validate(&spec)
            .into_iter()
            .map(|e| ConfigIssue { path: format!("jobs[{i}].{}", e.path), msg: e.msg })
            .collect();
        if !issues.is_empty() {
            prepared.push(Prepared::Broken(command_guess, join_issues(&issues)));
            continue;
        }
        let dir = match out_root {
            Some(root) => root.join(format!("job-{i:03}-{}", spec.command.name())),
            None => match &spec.output_dir {
                Some(d) => PathBuf::from(d),
                None => {
                    prepared.push(Prepared::Broken(
                        command_guess,
                        format!("config error at jobs[{i}].output_dir: required when sweep has no --out"),
                    ));
                    continue;
                }
            },
        };
        if dirs_seen.contains(&dir) {
            prepared.push(Prepared::Broken(
                command_guess,
                format!(
                    "config error at jobs[{i}].output_dir: duplicates another job's directory {}",
                    dir.display()
                ),
            ));
            continue;
        }
        dirs_seen.push(dir.clone());
        prepared.push(Prepared::Ready(Box::new(spec), dir));
    }
    prepared
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Run every job with at most `workers` running at once. Jobs are isolated:
/// a job that fails to validate, errors, or panics becomes an error row and
/// the rest still run. Outputs are keyed by job index, never by scheduling
/// order, so worker count cannot change a single byte of the artifacts or
/// the aggregate.
pub fn run_sweep(
    manifest: &SweepManifest,
    out_root: Option<&Path>,
    workers: usize,
) -> Result<i32, Vec<ConfigIssue>> {
    let prepared = prepare_jobs(manifest, out_root);

    let report_dir = out_root.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&report_dir).map_err(|e| {
        vec![ConfigIssue { path: "<out>".into(), msg: format!("{}: {e}", report_dir.display()) }]
    })?;

    let results: Vec<Option<JobResult>> = {
        let slots = Mutex::new((0..prepared.len()).map(|_| None).collect::<Vec<_>>());
        let next = AtomicUsize::new(0);
        let thread_count = workers.max(1).min(prepared.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..thread_count {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prepared.len() {
                        break;
                    }
                    let result = match &prepared[i] {
                        Prepared::Ready(spec, dir) => run_job(spec, dir),
                        Prepared::Broken(command, msg) => JobResult {
                            command: command.clone(),
                            hash: "-".into(),
                            status: JobStatus::Error,
                            output_dir: PathBuf::new(),
                            summary: Value::Null,
                            error: Some(msg.clone()),
                        },
                    };
                    slots.lock().expect("result slot lock")[i] = Some(result);
                });
            }
        });
        slots.into_inner().expect("result slot lock")
    };

    let mut csv = String::from("job,command,hash,status,scalar,value\n");
    let mut jobs_json = Vec::with_capacity(results.len());
    let mut thetas = Vec::new();
    let mut any_error = false;
    let mut any_check_fail = false;
    for (i, slot) in results.iter().enumerate() {
        let r = slot.as_ref().expect("every job slot filled");
        any_error |= r.status == JobStatus::Error;
        any_check_fail |= r.status == JobStatus::CheckFail;
        let mut rows = Vec::new();
        flatten_scalars(&r.summary, "", &mut rows);
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        for (path, value) in &rows {
            csv.push_str(&format!(
                "{i},{},{},{},{path},{value}\n",
                r.command,
                r.hash,
                r.status.label()
            ));
            if path == "theta" {
                thetas.push(*value);
            }
        }
        if rows.is_empty() {
            csv.push_str(&format!("{i},{},{},{},,\n", r.command, r.hash, r.status.label()));
        }
        // relative to the report so its bytes do not depend on the sweep root
        let shown_dir = r
            .output_dir
            .strip_prefix(&report_dir)
            .unwrap_or(&r.output_dir)
            .display()
            .to_string();
        jobs_json.push(json!({
            "index": i,
            "command": r.command,
            "hash": r.hash,
            "status": r.status.label(),
            "output_dir": shown_dir,
            "error": r.error,
        }));
    }

    let replication = if thetas.len() >= 2 {
        let n = thetas.len() as f64;
        let mean = thetas.iter().sum::<f64>() / n;
        let var = thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let stddev = var.sqrt();
        Some(json!({
            "count": thetas.len(),
            "mean": mean,
            "stddev": stddev,
            "dispersion_flag": stddev > 0.5 * mean.abs(),
        }))
    } else {
        None
    };

    let report = json!({
        "jobs": jobs_json,
        "theta_replication": replication,
    });
    let write = |name: &str, bytes: &[u8]| {
        std::fs::write(report_dir.join(name), bytes).map_err(|e| {
            vec![ConfigIssue { path: "<out>".into(), msg: format!("{name}: {e}") }]
        })
    };
    write("aggregate.csv", csv.as_bytes())?;
    let mut report_text = serde_json::to_string_pretty(&report).expect("report serializes");
    report_text.push('\n');
    write("report.json", report_text.as_bytes())?;

    for (i, slot) in results.iter().enumerate() {
        let r = slot.as_ref().expect("every job slot filled");
        eprintln!("job {i} {} -> {} ({})", r.command, r.output_dir.display(), r.status.label());
    }
    Ok(if any_error {
        1
    } else if any_check_fail {
        2
    } else {
        0
    })
}
