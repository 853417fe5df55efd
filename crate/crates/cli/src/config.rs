use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One schema or semantic problem, addressed by a dotted field path so the
/// offending key can be found without guessing.
#[derive(Debug, Clone)]
pub struct ConfigIssue {
    pub path: String,
    pub msg: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at {}: {}", self.path, self.msg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    KernelReport,
    Eig,
    Simulate,
    Profile,
    Stability,
    Contraction,
    Comparison,
    Shear,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::KernelReport => "kernel-report",
            Command::Eig => "eig",
            Command::Simulate => "simulate",
            Command::Profile => "profile",
            Command::Stability => "stability",
            Command::Contraction => "contraction",
            Command::Comparison => "comparison",
            Command::Shear => "shear",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBlock {
    pub form: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub strength: f64,
    pub theta_min: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    pub kind: String,
    pub shear: f64,
    pub mass: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relax: Option<[[f64; 3]; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<[[f64; 3]; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    pub law: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov: Option<[[f64; 3]; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub directions: u32,
    pub radii: u32,
    pub k_min: f64,
    pub k_max: f64,
}

impl Default for GridBlock {
    fn default() -> Self {
        GridBlock { directions: 16, radii: 12, k_min: 0.1, k_max: 10.0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericBlock {
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_orders: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_order: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observations: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observe_every: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_windows: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_pairs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<BTreeMap<String, f64>>,
}

/// Declarative description of one run. Canonical form: pretty JSON with
/// absent optional blocks omitted and map keys sorted, so a spec
/// round-trips through serialization byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub command: Command,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_b: Option<InitialBlock>,
    #[serde(default, skip_serializing_if = "numeric_is_empty")]
    pub numeric: NumericBlock,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

fn numeric_is_empty(n: &NumericBlock) -> bool {
    serde_json::to_value(n).map(|v| v == serde_json::json!({})).unwrap_or(false)
}

/// Keys each config object may carry; anything else is reported with its
/// full dotted path before deserialization is attempted.
fn allowed_keys(path: &str) -> Option<&'static [&'static str]> {
    match path {
        "" => Some(&[
            "command", "kernel", "drift", "initial", "initial_b", "numeric", "seed", "output_dir",
        ]),
        "kernel" => Some(&["form", "kappa", "strength", "theta_min"]),
        "drift" => Some(&["matrix", "scenario"]),
        "drift.scenario" => Some(&["kind", "shear", "mass", "relax"]),
        "initial" | "initial_b" => {
            Some(&["law", "point", "mean", "cov", "center", "radius", "a", "b"])
        }
        "numeric" => Some(&[
            "N",
            "dt",
            "T",
            "grid",
            "p_orders",
            "p_order",
            "observations",
            "observe_every",
            "max_windows",
            "k_scale",
            "noise_pairs",
            "tolerances",
        ]),
        "numeric.grid" => Some(&["directions", "radii", "k_min", "k_max"]),
        "numeric.tolerances" => None, // keys checked semantically per command
        _ => Some(&[]),               // leaf: no object expected here
    }
}

fn scan_unknown(value: &Value, path: &str, issues: &mut Vec<ConfigIssue>) {
    let Value::Object(map) = value else { return };
    let Some(allowed) = allowed_keys(path) else { return };
    for (key, sub) in map {
        let sub_path =
            if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        if !allowed.contains(&key.as_str()) {
            issues.push(ConfigIssue { path: sub_path, msg: "unknown key".into() });
            continue;
        }
        scan_unknown(sub, &sub_path, issues);
    }
}

pub fn parse_spec(text: &str) -> Result<ExperimentSpec, Vec<ConfigIssue>> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| vec![ConfigIssue { path: "<root>".into(), msg: e.to_string() }])?;
    if !value.is_object() {
        return Err(vec![ConfigIssue {
            path: "<root>".into(),
            msg: "expected a JSON object".into(),
        }]);
    }
    let mut issues = Vec::new();
    scan_unknown(&value, "", &mut issues);
    if !issues.is_empty() {
        return Err(issues);
    }
    serde_json::from_value(value)
        .map_err(|e| vec![ConfigIssue { path: "<root>".into(), msg: e.to_string() }])
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec, Vec<ConfigIssue>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        vec![ConfigIssue { path: "<file>".into(), msg: format!("{}: {e}", path.display()) }]
    })?;
    parse_spec(&text)
}

/// Canonical serialization: pretty JSON plus trailing newline. Hashing and
/// the spec.json copy in the run directory both use these exact bytes.
pub fn canonical(spec: &ExperimentSpec) -> String {
    let mut s = serde_json::to_string_pretty(spec).expect("spec serializes");
    s.push('\n');
    s
}

/// FNV-1a over the canonical bytes; stable across runs and platforms.
pub fn config_hash(spec: &ExperimentSpec) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in canonical(spec).as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

struct Check<'a> {
    issues: &'a mut Vec<ConfigIssue>,
}

impl Check<'_> {
    fn fail(&mut self, path: &str, msg: impl Into<String>) {
        self.issues.push(ConfigIssue { path: path.into(), msg: msg.into() });
    }

    fn require<T>(&mut self, opt: &Option<T>, path: &str) -> bool {
        if opt.is_none() {
            self.fail(path, "required for this command");
        }
        opt.is_some()
    }

    fn forbid<T>(&mut self, opt: &Option<T>, path: &str, cmd: &str) {
        if opt.is_some() {
            self.fail(path, format!("not used by {cmd}; remove it"));
        }
    }

    fn positive(&mut self, v: Option<f64>, path: &str) {
        if let Some(x) = v {
            if !(x > 0.0 && x.is_finite()) {
                self.fail(path, format!("must be positive and finite, got {x}"));
            }
        }
    }
}

fn validate_kernel(k: &KernelBlock, c: &mut Check) {
    match k.form.as_str() {
        "constant" | "power_law" => {}
        other => c.fail("kernel.form", format!("expected constant or power_law, got {other:?}")),
    }
    if k.form == "power_law" && k.kappa.is_none() {
        c.fail("kernel.kappa", "required for the power_law form");
    }
    if let Some(kappa) = k.kappa {
        if !(kappa > 0.0 && kappa < 1.0) {
            c.fail("kernel.kappa", format!("must lie in (0, 1), got {kappa}"));
        }
    }
    c.positive(Some(k.strength), "kernel.strength");
    if !(k.theta_min > 0.0 && k.theta_min < std::f64::consts::PI) {
        c.fail("kernel.theta_min", format!("must lie in (0, pi), got {}", k.theta_min));
    }
}

fn validate_drift(d: &DriftBlock, want_scenario: bool, c: &mut Check) {
    match (&d.matrix, &d.scenario) {
        (Some(_), Some(_)) => c.fail("drift", "give either matrix or scenario, not both"),
        (None, None) => c.fail("drift", "give matrix or scenario"),
        (Some(_), None) if want_scenario => {
            c.fail("drift.matrix", "this command needs drift.scenario")
        }
        (None, Some(_)) if !want_scenario => {
            c.fail("drift.scenario", "this command needs drift.matrix")
        }
        _ => {}
    }
    if let Some(sc) = &d.scenario {
        match sc.kind.as_str() {
            "simple" => {
                if sc.relax.is_some() {
                    c.fail("drift.scenario.relax", "only the planar kind takes a relax matrix");
                }
            }
            "planar" => {
                if sc.relax.is_none() {
                    c.fail("drift.scenario.relax", "required for the planar kind");
                }
            }
            other => {
                c.fail("drift.scenario.kind", format!("expected simple or planar, got {other:?}"))
            }
        }
        if !sc.shear.is_finite() {
            c.fail("drift.scenario.shear", "must be finite");
        }
        c.positive(Some(sc.mass), "drift.scenario.mass");
    }
}

fn validate_initial(block: &InitialBlock, path: &str, c: &mut Check) {
    let fields: [(&str, bool); 6] = [
        ("point", block.point.is_some()),
        ("mean", block.mean.is_some()),
        ("cov", block.cov.is_some()),
        ("center", block.center.is_some()),
        ("radius", block.radius.is_some()),
        ("a", block.a.is_some()),
    ];
    let wanted: &[&str] = match block.law.as_str() {
        "dirac" => &["point"],
        "gaussian" => &["mean", "cov"],
        "uniform_ball" => &["center", "radius"],
        "two_point" => &["a", "b"],
        other => {
            c.fail(
                &format!("{path}.law"),
                format!("expected dirac, gaussian, uniform_ball, or two_point, got {other:?}"),
            );
            return;
        }
    };
    for (name, present) in fields {
        let needed = wanted.contains(&name);
        if needed && !present {
            c.fail(&format!("{path}.{name}"), format!("required for law {:?}", block.law));
        }
        if !needed && present {
            c.fail(&format!("{path}.{name}"), format!("not a field of law {:?}", block.law));
        }
    }
    if wanted.contains(&"b") && block.b.is_none() {
        c.fail(&format!("{path}.b"), format!("required for law {:?}", block.law));
    }
    if !wanted.contains(&"b") && block.b.is_some() {
        c.fail(&format!("{path}.b"), format!("not a field of law {:?}", block.law));
    }
    if let Some(r) = block.radius {
        c.positive(Some(r), &format!("{path}.radius"));
    }
}

fn tolerance_keys(cmd: Command) -> &'static [&'static str] {
    match cmd {
        Command::Eig => &["eig_residual"],
        Command::Simulate => &["conservation_pair", "conservation_global"],
        Command::Shear => &["mass_closed_form"],
        _ => &[],
    }
}

/// Semantic validation after the structural pass: per-command required and
/// forbidden blocks, positivity, and tolerance-name checks.
pub fn validate(spec: &ExperimentSpec) -> Vec<ConfigIssue> {
    let mut issues = Vec::new();
    let mut c = Check { issues: &mut issues };
    let cmd = spec.command;
    let name = cmd.name();

    if c.require(&spec.kernel, "kernel") {
        validate_kernel(spec.kernel.as_ref().unwrap(), &mut c);
    }

    let needs_drift = !matches!(cmd, Command::KernelReport);
    if needs_drift {
        if c.require(&spec.drift, "drift") {
            validate_drift(spec.drift.as_ref().unwrap(), cmd == Command::Shear, &mut c);
        }
    } else {
        c.forbid(&spec.drift, "drift", name);
    }

    let needs_initial = matches!(
        cmd,
        Command::Simulate
            | Command::Stability
            | Command::Contraction
            | Command::Comparison
            | Command::Shear
    );
    if needs_initial {
        if c.require(&spec.initial, "initial") {
            validate_initial(spec.initial.as_ref().unwrap(), "initial", &mut c);
        }
    } else {
        c.forbid(&spec.initial, "initial", name);
    }

    let needs_pair = matches!(cmd, Command::Contraction | Command::Comparison);
    if needs_pair {
        if c.require(&spec.initial_b, "initial_b") {
            validate_initial(spec.initial_b.as_ref().unwrap(), "initial_b", &mut c);
        }
    } else {
        c.forbid(&spec.initial_b, "initial_b", name);
    }

    let nu = &spec.numeric;
    let needs_particles = needs_initial || cmd == Command::Profile;
    if needs_particles {
        match nu.n {
            None => c.fail("numeric.N", "required for this command"),
            Some(n) if n <= 0 => c.fail("numeric.N", format!("must be positive, got {n}")),
            _ => {}
        }
        if nu.dt.is_none() {
            c.fail("numeric.dt", "required for this command");
        }
        c.positive(nu.dt, "numeric.dt");
    } else {
        if nu.n.is_some() {
            c.fail("numeric.N", format!("not used by {name}"));
        }
        if nu.dt.is_some() {
            c.fail("numeric.dt", format!("not used by {name}"));
        }
    }

    let needs_horizon = matches!(
        cmd,
        Command::Simulate
            | Command::Stability
            | Command::Contraction
            | Command::Comparison
            | Command::Shear
    );
    if needs_horizon {
        if nu.t.is_none() {
            c.fail("numeric.T", "required for this command");
        }
        c.positive(nu.t, "numeric.T");
    } else if nu.t.is_some() {
        c.fail("numeric.T", format!("not used by {name}"));
    }

    if matches!(cmd, Command::Stability | Command::Comparison | Command::Shear) {
        if nu.p_order.is_none() {
            c.fail("numeric.p_order", "required for this command");
        }
        if let Some(p) = nu.p_order {
            if !(p > 2.0 && p <= 4.0) {
                c.fail("numeric.p_order", format!("must lie in (2, 4], got {p}"));
            }
        }
    } else if nu.p_order.is_some() {
        c.fail("numeric.p_order", format!("not used by {name}"));
    }

    if let Some(orders) = &nu.p_orders {
        if !matches!(cmd, Command::KernelReport | Command::Simulate) {
            c.fail("numeric.p_orders", format!("not used by {name}"));
        }
        for (i, p) in orders.iter().enumerate() {
            if !(p.is_finite() && *p > 0.0) {
                c.fail(&format!("numeric.p_orders[{i}]"), format!("must be positive, got {p}"));
            }
        }
    }

    if let Some(g) = &nu.grid {
        if g.directions < 4 {
            c.fail("numeric.grid.directions", "need at least 4 directions");
        }
        if g.radii < 2 {
            c.fail("numeric.grid.radii", "need at least 2 radii");
        }
        if !(g.k_min > 0.0 && g.k_max > g.k_min) {
            c.fail("numeric.grid.k_min", "need 0 < k_min < k_max");
        }
    }

    if let Some(obs) = nu.observations {
        if obs < 2 {
            c.fail("numeric.observations", "need at least 2 observations");
        }
    }
    if let Some(oe) = nu.observe_every {
        if oe == 0 {
            c.fail("numeric.observe_every", "must be at least 1");
        }
    }
    c.positive(nu.k_scale, "numeric.k_scale");
    if let Some(pairs) = nu.noise_pairs {
        if pairs == 0 {
            c.fail("numeric.noise_pairs", "must be at least 1");
        }
    }

    if let Some(tols) = &nu.tolerances {
        let known = tolerance_keys(cmd);
        for (key, value) in tols {
            if !known.contains(&key.as_str()) {
                c.fail(
                    &format!("numeric.tolerances.{key}"),
                    format!("not a tolerance of {name}"),
                );
            }
            if !(*value > 0.0 && value.is_finite()) {
                c.fail(
                    &format!("numeric.tolerances.{key}"),
                    format!("must be positive and finite, got {value}"),
                );
            }
        }
    }

    issues
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_eig() -> String {
        serde_json::json!({
            "command": "eig",
            "kernel": {"form": "constant", "strength": 1.0, "theta_min": 1e-3},
            "drift": {"matrix": [[0.0, 0.1, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]},
            "seed": 7
        })
        .to_string()
    }

    #[test]
    fn canonical_form_round_trips_byte_for_byte() {
        let spec = parse_spec(&minimal_eig()).unwrap();
        let first = canonical(&spec);
        let reparsed = parse_spec(&first).unwrap();
        assert_eq!(first, canonical(&reparsed));
        assert_eq!(config_hash(&spec), config_hash(&reparsed));
    }

    #[test]
    fn unknown_keys_are_reported_with_their_path() {
        let text = serde_json::json!({
            "command": "eig",
            "kernel": {"form": "constant", "strength": 1.0, "theta_min": 1e-3, "thetamax": 2.0},
            "drift": {"matrix": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]},
            "seed": 7
        })
        .to_string();
        let issues = parse_spec(&text).unwrap_err();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "kernel.thetamax");
    }

    #[test]
    fn negative_particle_count_points_at_numeric_n() {
        let text = serde_json::json!({
            "command": "simulate",
            "kernel": {"form": "constant", "strength": 1.0, "theta_min": 1e-3},
            "drift": {"matrix": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]},
            "initial": {"law": "dirac", "point": [0.0, 0.0, 0.0]},
            "numeric": {"N": -5, "dt": 0.01, "T": 1.0},
            "seed": 7
        })
        .to_string();
        let spec = parse_spec(&text).unwrap();
        let issues = validate(&spec);
        assert!(issues.iter().any(|i| i.path == "numeric.N"), "{issues:?}");
    }

    #[test]
    fn blocks_unused_by_the_command_are_rejected() {
        let text = serde_json::json!({
            "command": "kernel-report",
            "kernel": {"form": "constant", "strength": 1.0, "theta_min": 1e-3},
            "drift": {"matrix": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]},
            "seed": 7
        })
        .to_string();
        let spec = parse_spec(&text).unwrap();
        let issues = validate(&spec);
        assert!(issues.iter().any(|i| i.path == "drift"), "{issues:?}");
    }

    #[test]
    fn law_fields_are_cross_checked() {
        let text = serde_json::json!({
            "command": "simulate",
            "kernel": {"form": "constant", "strength": 1.0, "theta_min": 1e-3},
            "drift": {"matrix": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]},
            "initial": {"law": "gaussian", "mean": [0.0, 0.0, 0.0], "radius": 1.0},
            "numeric": {"N": 100, "dt": 0.01, "T": 1.0},
            "seed": 7
        })
        .to_string();
        let spec = parse_spec(&text).unwrap();
        let issues = validate(&spec);
        assert!(issues.iter().any(|i| i.path == "initial.cov"), "{issues:?}");
        assert!(issues.iter().any(|i| i.path == "initial.radius"), "{issues:?}");
    }

    #[test]
    fn foreign_tolerances_are_rejected() {
        let text = serde_json::json!({
            "command": "eig",
            "kernel": {"form": "constant", "strength": 1.0, "theta_min": 1e-3},
            "drift": {"matrix": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]},
            "numeric": {"tolerances": {"mass_closed_form": 1e-9}},
            "seed": 7
        })
        .to_string();
        let spec = parse_spec(&text).unwrap();
        let issues = validate(&spec);
        assert!(
            issues.iter().any(|i| i.path == "numeric.tolerances.mass_closed_form"),
            "{issues:?}"
        );
    }

    #[test]
    fn hash_tracks_content() {
        let spec_a = parse_spec(&minimal_eig()).unwrap();
        let mut spec_b = spec_a.clone();
        spec_b.seed = 8;
        assert_ne!(config_hash(&spec_a), config_hash(&spec_b));
    }
}
