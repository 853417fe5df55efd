use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};

use crate::config::{self, ExperimentSpec};
use crate::runner::{self, CheckResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub struct CompletedRun {
    pub pass: bool,
    pub checks: Vec<CheckResult>,
    pub summary: Value,
    pub hash: String,
}

/// Drive one spec into its run directory: exact spec copy, artifacts,
/// summary, and the manifest. Wall clock lives only in the manifest, so
/// every other file is byte-identical across repeat runs.
pub fn run_to_dir(spec: &ExperimentSpec, out: &Path) -> Result<CompletedRun, String> {
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let canonical = config::canonical(spec);
    let hash = config::config_hash(spec);
    std::fs::write(out.join("spec.json"), &canonical)
        .map_err(|e| format!("spec.json: {e}"))?;

    let started = Instant::now();
    let outcome = runner::execute(spec, out).map_err(|e| e.to_string())?;
    let wall = started.elapsed().as_secs_f64();

    let summary_text = {
        let mut s = serde_json::to_string_pretty(&outcome.summary)
            .map_err(|e| format!("summary: {e}"))?;
        s.push('\n');
        s
    };
    std::fs::write(out.join("summary.json"), summary_text)
        .map_err(|e| format!("summary.json: {e}"))?;

    let mut files: Vec<String> = outcome.files.clone();
    files.push("spec.json".into());
    files.push("summary.json".into());
    files.sort();

    let pass = outcome.pass();
    let manifest = json!({
        "command": spec.command.name(),
        "config_hash": hash,
        "version": VERSION,
        "pass": pass,
        "checks": outcome
            .checks
            .iter()
            .map(|c| json!({"name": c.name, "pass": c.pass, "detail": c.detail}))
            .collect::<Vec<_>>(),
        "files": files,
        "wall_clock_seconds": wall,
    });
    let mut manifest_text =
        serde_json::to_string_pretty(&manifest).map_err(|e| format!("manifest: {e}"))?;
    manifest_text.push('\n');
    std::fs::write(out.join("manifest.json"), manifest_text)
        .map_err(|e| format!("manifest.json: {e}"))?;

    Ok(CompletedRun { pass, checks: outcome.checks, summary: outcome.summary, hash })
}
