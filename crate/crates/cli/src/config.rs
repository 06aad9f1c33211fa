//! Run configuration: parsing (TOML, JSON, or the header of a previous
//! output), dotted-path overrides, validation, and canonical serialization.

use std::fmt;

use num_complex::Complex64;
use optochaos_core::chaos::{linear_grid, ClassifySpec, LyapunovSpec, StartMode, CHAOS_THRESHOLD};
use optochaos_core::ode::Tolerances;
use optochaos_core::qsd::{HilbertTruncation, QsdSpec, Scheme, DEFAULT_DIM_BUDGET, DEFAULT_LEAK_TOL};
use optochaos_core::sc::TWO_PI;
use optochaos_core::spectrum::{SpectrumQuantity, SpectrumSpec, Window, DEFAULT_PEAK_THRESHOLD, MIN_PERIODS};
use optochaos_core::ansatz::AnsatzSpec;
use optochaos_core::{validate_params, Error, ModelParams, ScState};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Marker line prefix carrying the config echo in CSV outputs.
pub const CONFIG_LINE: &str = "# config: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Trajectory,
    FixedPoints,
    Ansatz,
    Lyapunov,
    Bifurcation,
    PhaseDiagram,
    Spectrum,
    QsdTrajectory,
    QsdEnsemble,
    OracleCheck,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::Trajectory,
        Command::FixedPoints,
        Command::Ansatz,
        Command::Lyapunov,
        Command::Bifurcation,
        Command::PhaseDiagram,
        Command::Spectrum,
        Command::QsdTrajectory,
        Command::QsdEnsemble,
        Command::OracleCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Trajectory => "trajectory",
            Command::FixedPoints => "fixed-points",
            Command::Ansatz => "ansatz",
            Command::Lyapunov => "lyapunov",
            Command::Bifurcation => "bifurcation",
            Command::PhaseDiagram => "phase-diagram",
            Command::Spectrum => "spectrum",
            Command::QsdTrajectory => "qsd-trajectory",
            Command::QsdEnsemble => "qsd-ensemble",
            Command::OracleCheck => "oracle-check",
        }
    }

    fn is_quantum(self) -> bool {
        matches!(self, Command::QsdTrajectory | Command::QsdEnsemble | Command::OracleCheck)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A parameter grid: either an inclusive range or an explicit list.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

pub const MAX_GRID_POINTS: usize = 1_000_000;

impl Grid {
    pub fn range(start: f64, stop: f64, step: f64) -> Self {
        Self {
            start: Some(start),
            stop: Some(stop),
            step: Some(step),
            values: None,
        }
    }

    pub fn list(values: Vec<f64>) -> Self {
        Self {
            values: Some(values),
            ..Self::default()
        }
    }

    fn check(&self, key: &str, errors: &mut Vec<String>) {
        match (self.start, self.stop, self.step, &self.values) {
            (None, None, None, Some(v)) => {
                if v.is_empty() {
                    errors.push(format!("{key}.values: list is empty"));
                } else if v.iter().any(|x| !x.is_finite()) {
                    errors.push(format!("{key}.values: entries must be finite"));
                } else if v.len() > 1 {
                    let inc = v.windows(2).all(|w| w[1] > w[0]);
                    let dec = v.windows(2).all(|w| w[1] < w[0]);
                    if !(inc || dec) {
                        errors.push(format!("{key}.values: entries must be strictly monotone"));
                    }
                }
            }
            (Some(a), Some(b), Some(h), None) => {
                if !(a.is_finite() && b.is_finite()) {
                    errors.push(format!("{key}: start and stop must be finite"));
                } else if !(h > 0.0 && h.is_finite()) {
                    errors.push(format!("{key}.step: {h} must be positive"));
                } else if (b - a).abs() / h > MAX_GRID_POINTS as f64 {
                    errors.push(format!("{key}: more than {MAX_GRID_POINTS} points"));
                }
            }
            _ => errors.push(format!(
                "{key}: give either start, stop and step, or values (and not both)"
            )),
        }
    }

    /// Grid points; call only on a checked grid.
    pub fn points(&self) -> Vec<f64> {
        match (&self.values, self.start, self.stop, self.step) {
            (Some(v), ..) => v.clone(),
            (None, Some(a), Some(b), Some(h)) => linear_grid(a, b, h),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialState {
    /// [Re, Im] of alpha.
    pub alpha: [f64; 2],
    /// [Re, Im] of beta.
    pub beta: [f64; 2],
}

impl Default for InitialState {
    fn default() -> Self {
        Self {
            alpha: [0.0; 2],
            beta: [0.0; 2],
        }
    }
}

impl InitialState {
    pub fn state(&self) -> ScState {
        ScState::new(
            Complex64::new(self.alpha[0], self.alpha[1]),
            Complex64::new(self.beta[0], self.beta[1]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Integration {
    pub t_start: f64,
    pub t_end: f64,
    pub samples_per_period: usize,
    pub transient_periods: f64,
    pub tolerances: Tolerances,
}

impl Default for Integration {
    fn default() -> Self {
        Self {
            t_start: 0.0,
            t_end: 500.0 * TWO_PI,
            samples_per_period: 128,
            transient_periods: 200.0,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovMethod {
    Tangent,
    Twin,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LyapunovOptions {
    pub renorm_interval: f64,
    pub n_steps: usize,
    pub discard: usize,
    pub method: LyapunovMethod,
    /// Initial and renormalized distance of the twin orbit.
    pub separation: f64,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        let s = LyapunovSpec::default();
        Self {
            renorm_interval: s.renorm_interval,
            n_steps: s.n_steps,
            discard: s.discard,
            method: LyapunovMethod::Tangent,
            separation: 1e-8,
        }
    }
}

impl LyapunovOptions {
    pub fn spec(&self) -> LyapunovSpec {
        LyapunovSpec {
            renorm_interval: self.renorm_interval,
            n_steps: self.n_steps,
            discard: self.discard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyOptions {
    pub record_periods: usize,
    pub samples_per_period: usize,
    pub cluster_rel: f64,
    pub chaos_threshold: f64,
    pub stationary_tol: f64,
    /// Start mode of bifurcation sweeps.
    pub start: StartMode,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        let s = ClassifySpec::default();
        Self {
            record_periods: s.record_periods,
            samples_per_period: s.samples_per_period,
            cluster_rel: s.cluster_rel,
            chaos_threshold: CHAOS_THRESHOLD,
            stationary_tol: s.stationary_tol,
            start: StartMode::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnsatzOptions {
    pub xbar_points: usize,
    pub amp_points: usize,
    pub amp_max: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Also classify cold-start simulations on the same grid.
    pub compare: bool,
}

impl Default for AnsatzOptions {
    fn default() -> Self {
        let s = AnsatzSpec::default();
        Self {
            xbar_points: s.xbar_points,
            amp_points: s.amp_points,
            amp_max: s.amp_max,
            tol: s.tol,
            max_iter: s.max_iter,
            compare: true,
        }
    }
}

impl AnsatzOptions {
    pub fn spec(&self) -> AnsatzSpec {
        AnsatzSpec {
            xbar_points: self.xbar_points,
            amp_points: self.amp_points,
            amp_max: self.amp_max,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumOptions {
    pub window: Window,
    pub n_periods: usize,
    pub quantity: SpectrumQuantity,
    /// Line threshold relative to the strongest line.
    pub threshold: f64,
    /// Must be a power of two.
    pub samples_per_period: usize,
    pub transient_periods: usize,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        let s = SpectrumSpec::default();
        Self {
            window: s.window,
            n_periods: s.n_periods,
            quantity: s.quantity,
            threshold: DEFAULT_PEAK_THRESHOLD,
            samples_per_period: 64,
            transient_periods: 200,
        }
    }
}

impl SpectrumOptions {
    pub fn spec(&self) -> SpectrumSpec {
        SpectrumSpec {
            window: self.window,
            n_periods: self.n_periods,
            quantity: self.quantity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QsdOptions {
    /// Cavity cutoff; with `n_mech` unset both are chosen from a
    /// semi-classical pre-run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_cav: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_mech: Option<usize>,
    pub steps_per_period: usize,
    pub samples_per_period: usize,
    pub scheme: Scheme,
    pub leak_tol: f64,
    pub dim_budget: usize,
    pub noise_substeps: usize,
    /// Run length in mechanical periods.
    pub periods: usize,
    pub n_traj: usize,
    /// Stream index of a single trajectory.
    pub index: u64,
    /// Periods dropped before the stroboscopic section and period analysis.
    pub discard_periods: usize,
    /// Repeat the trajectory with doubled cutoffs and report the change in x.
    pub audit: bool,
}

impl Default for QsdOptions {
    fn default() -> Self {
        let s = QsdSpec::default();
        Self {
            n_cav: None,
            n_mech: None,
            steps_per_period: s.steps_per_period,
            samples_per_period: s.samples_per_period,
            scheme: Scheme::Rk4Drift,
            leak_tol: DEFAULT_LEAK_TOL,
            dim_budget: DEFAULT_DIM_BUDGET,
            noise_substeps: s.noise_substeps,
            periods: 40,
            n_traj: 100,
            index: 0,
            discard_periods: 20,
            audit: false,
        }
    }
}

impl QsdOptions {
    pub fn spec(&self) -> QsdSpec {
        QsdSpec {
            steps_per_period: self.steps_per_period,
            samples_per_period: self.samples_per_period,
            scheme: self.scheme,
            leak_tol: self.leak_tol,
            dim_budget: self.dim_budget,
            noise_substeps: self.noise_substeps,
        }
    }

    pub fn truncation(&self) -> Option<HilbertTruncation> {
        Some(HilbertTruncation::new(self.n_cav?, self.n_mech?))
    }

    pub fn span(&self) -> (f64, f64) {
        (0.0, self.periods as f64 * TWO_PI)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputOptions {
    /// Base path; the command name when empty.
    pub path: String,
    pub format: Format,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self {
            path: String::new(),
            format: Format::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    /// Master seed of all stochastic runs.
    pub seed: u64,
    pub params: ModelParams,
    pub initial: InitialState,
    pub integration: Integration,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detuning_grid: Option<Grid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pump_grid: Option<Grid>,
    pub lyapunov: LyapunovOptions,
    pub classify: ClassifyOptions,
    pub ansatz: AnsatzOptions,
    pub spectrum: SpectrumOptions,
    pub qsd: QsdOptions,
    pub output: OutputOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 0,
            params: ModelParams::default(),
            initial: InitialState::default(),
            integration: Integration::default(),
            detuning_grid: None,
            pump_grid: None,
            lyapunov: LyapunovOptions::default(),
            classify: ClassifyOptions::default(),
            ansatz: AnsatzOptions::default(),
            spectrum: SpectrumOptions::default(),
            qsd: QsdOptions::default(),
            output: OutputOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn classify_spec(&self) -> ClassifySpec {
        ClassifySpec {
            lyapunov: self.lyapunov.spec(),
            record_periods: self.classify.record_periods,
            samples_per_period: self.classify.samples_per_period,
            cluster_rel: self.classify.cluster_rel,
            chaos_threshold: self.classify.chaos_threshold,
            stationary_tol: self.classify.stationary_tol,
        }
    }

    pub fn span(&self) -> (f64, f64) {
        (self.integration.t_start, self.integration.t_end)
    }

    pub fn transient_cutoff(&self) -> f64 {
        self.integration.t_start + self.integration.transient_periods * TWO_PI
    }

    /// Output base path.
    pub fn output_base(&self, command: Command) -> String {
        if self.output.path.is_empty() {
            command.name().to_string()
        } else {
            self.output.path.clone()
        }
    }
}

/// One or more configuration errors, each with its location.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub messages: Vec<String>,
}

impl ConfigError {
    fn one(msg: impl Into<String>) -> Self {
        Self {
            messages: vec![msg.into()],
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, m) in self.messages.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{m}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// Parses a config document without validating it against a command.
/// Accepts TOML, JSON, or an output CSV (whose embedded config is used).
pub fn parse_document(text: &str) -> Result<RunConfig, ConfigError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return serde_json::from_str(trimmed).map_err(|e| ConfigError::one(format!("json: {e}")));
    }
    if trimmed.starts_with('#') {
        if let Some(line) = text.lines().find_map(|l| l.strip_prefix(CONFIG_LINE)) {
            return serde_json::from_str(line).map_err(|e| ConfigError::one(format!("embedded config: {e}")));
        }
    }
    toml::from_str(text).map_err(|e| ConfigError::one(format!("toml: {}", e.to_string().trim_end())))
}

/// Parses and validates a config for `command`.
pub fn parse_config(text: &str, command: Command) -> Result<RunConfig, ConfigError> {
    let cfg = parse_document(text)?;
    finish(cfg, command)
}

/// Fills the command and validates.
pub fn finish(mut cfg: RunConfig, command: Command) -> Result<RunConfig, ConfigError> {
    match cfg.command {
        Some(c) if c != command => {
            return Err(ConfigError::one(format!(
                "command: config is for `{c}` but `{command}` was requested"
            )))
        }
        _ => cfg.command = Some(command),
    }
    let errors = validate(&cfg, command);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError { messages: errors })
    }
}

/// Range and consistency checks; each message starts with the key path.
pub fn validate(cfg: &RunConfig, command: Command) -> Vec<String> {
    let mut e = Vec::new();
    if let Err(err) = validate_params(cfg.params) {
        match err {
            Error::InvalidParameter { name, reason } => e.push(format!("params.{name}: {reason}")),
            other => e.push(format!("params: {other}")),
        }
    }
    if command.is_quantum() && !(cfg.params.sigma > 0.0) {
        e.push(format!("params.sigma: must be positive for `{command}`"));
    }
    if cfg.initial.alpha.iter().chain(&cfg.initial.beta).any(|v| !v.is_finite()) {
        e.push("initial: amplitudes must be finite".into());
    }

    let i = &cfg.integration;
    if !(i.t_start.is_finite() && i.t_end.is_finite() && i.t_end > i.t_start) {
        e.push(format!(
            "integration.t_end: need t_start < t_end, got {} and {}",
            i.t_start, i.t_end
        ));
    }
    if i.samples_per_period < 2 {
        e.push("integration.samples_per_period: must be at least 2".into());
    }
    if !(i.transient_periods >= 0.0 && i.transient_periods.is_finite()) {
        e.push("integration.transient_periods: must be finite and non-negative".into());
    }
    let t = &i.tolerances;
    if !(t.rtol > 0.0 && t.atol > 0.0 && t.h_max > 0.0) || t.max_steps == 0 {
        e.push("integration.tolerances: rtol, atol, h_max and max_steps must be positive".into());
    }

    let needs_delta = matches!(command, Command::Ansatz | Command::Bifurcation | Command::PhaseDiagram);
    match &cfg.detuning_grid {
        Some(g) => g.check("detuning_grid", &mut e),
        None if needs_delta => e.push(format!("detuning_grid: required for `{command}`")),
        None => {}
    }
    match &cfg.pump_grid {
        Some(g) => {
            g.check("pump_grid", &mut e);
            if g.points().iter().any(|&p| p < 0.0) {
                e.push("pump_grid: pump values must be non-negative".into());
            }
        }
        None if command == Command::PhaseDiagram => e.push("pump_grid: required for `phase-diagram`".into()),
        None => {}
    }

    let l = &cfg.lyapunov;
    if !(l.renorm_interval > 0.0 && l.renorm_interval.is_finite()) {
        e.push("lyapunov.renorm_interval: must be positive".into());
    }
    if l.n_steps < 2 {
        e.push("lyapunov.n_steps: must be at least 2".into());
    }
    if !(l.separation > 0.0 && l.separation < 1.0) {
        e.push("lyapunov.separation: must lie in (0, 1)".into());
    }

    let c = &cfg.classify;
    if c.record_periods < 4 {
        e.push("classify.record_periods: must be at least 4".into());
    }
    if c.samples_per_period < 8 {
        e.push("classify.samples_per_period: must be at least 8".into());
    }
    if !(c.cluster_rel > 0.0 && c.cluster_rel < 1.0) {
        e.push("classify.cluster_rel: must lie in (0, 1)".into());
    }
    if !(c.chaos_threshold > 0.0) {
        e.push("classify.chaos_threshold: must be positive".into());
    }
    if !(c.stationary_tol > 0.0) {
        e.push("classify.stationary_tol: must be positive".into());
    }

    let a = &cfg.ansatz;
    if a.xbar_points < 2 || a.amp_points < 2 {
        e.push("ansatz.xbar_points, ansatz.amp_points: must be at least 2".into());
    }
    if !(a.amp_max > 0.0 && a.amp_max.is_finite()) {
        e.push("ansatz.amp_max: must be positive".into());
    }
    if !(a.tol > 0.0) || a.max_iter == 0 {
        e.push("ansatz.tol, ansatz.max_iter: must be positive".into());
    }

    let s = &cfg.spectrum;
    if !s.samples_per_period.is_power_of_two() || s.samples_per_period < 2 {
        e.push(format!(
            "spectrum.samples_per_period: {} must be a power of two >= 2",
            s.samples_per_period
        ));
    }
    if s.n_periods < MIN_PERIODS {
        e.push(format!("spectrum.n_periods: {} is below the minimum of {MIN_PERIODS}", s.n_periods));
    }
    if !(s.threshold > 0.0 && s.threshold < 1.0) {
        e.push("spectrum.threshold: must lie in (0, 1)".into());
    }

    let q = &cfg.qsd;
    match (q.n_cav, q.n_mech) {
        (Some(nc), Some(nm)) => {
            if nc < 2 || nm < 2 {
                e.push("qsd.n_cav, qsd.n_mech: cutoffs must be at least 2".into());
            } else if nc.saturating_mul(nm) > q.dim_budget {
                e.push(format!(
                    "qsd.n_cav, qsd.n_mech: dimension {} exceeds qsd.dim_budget {}",
                    nc.saturating_mul(nm),
                    q.dim_budget
                ));
            }
        }
        (None, None) => {}
        _ => e.push("qsd.n_cav, qsd.n_mech: give both cutoffs or neither".into()),
    }
    if q.steps_per_period == 0 || q.samples_per_period == 0 || q.noise_substeps == 0 {
        e.push("qsd.steps_per_period, qsd.samples_per_period, qsd.noise_substeps: must be positive".into());
    } else if q.steps_per_period % q.samples_per_period != 0 {
        e.push(format!(
            "qsd.samples_per_period: {} does not divide qsd.steps_per_period {}",
            q.samples_per_period, q.steps_per_period
        ));
    }
    if !(q.leak_tol > 0.0) {
        e.push("qsd.leak_tol: must be positive".into());
    }
    if q.periods == 0 {
        e.push("qsd.periods: must be positive".into());
    }
    if q.n_traj == 0 {
        e.push("qsd.n_traj: must be positive".into());
    }
    e
}

/// Applies `key.path=value` overrides one at a time; the value is read as a
/// TOML value (number, boolean, array, quoted string) or else as a bare string.
pub fn apply_overrides(cfg: &RunConfig, sets: &[String]) -> Result<RunConfig, ConfigError> {
    let mut cfg = cfg.clone();
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| ConfigError::one(format!("--set {set}: expected key=value")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(ConfigError::one(format!("--set {set}: malformed key")));
        }
        let value = parse_scalar(raw.trim());
        let mut tree = serde_json::to_value(&cfg).expect("config serializes");
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (k, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| ConfigError::one(format!("--set {set}: `{}` is not a table", parts[..k].join("."))))?;
            if k + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        }
        cfg = serde_json::from_value(tree).map_err(|e| ConfigError::one(format!("--set {set}: {e}")))?;
    }
    Ok(cfg)
}

fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Canonical JSON: sorted keys, floats with 17 significant digits.
pub fn to_canonical_json(cfg: &RunConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    let mut out = String::new();
    write_canonical(&v, &mut out);
    out
}

pub(crate) fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), ..) => out.push_str(&u.to_string()),
            (None, Some(i), _) => out.push_str(&i.to_string()),
            (None, None, Some(f)) if f.is_finite() => out.push_str(&format!("{f:.16e}")),
            _ => out.push_str("null"),
        },
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(a) => {
            out.push('[');
            for (k, x) in a.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write_canonical(x, out);
            }
            out.push(']');
        }
        Value::Object(o) => {
            out.push('{');
            for (k, (key, x)) in o.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(x, out);
            }
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_bifurcation_config() {
        let text = "command = \"bifurcation\"\ndetuning_grid = { start = -1.1, stop = -0.4, step = 0.0025 }\n[params]\npump = 1.4\n";
        let cfg = parse_config(text, Command::Bifurcation).unwrap();
        assert_eq!(cfg.params, ModelParams::new(0.0, 1.4));
        let grid = cfg.detuning_grid.as_ref().unwrap().points();
        assert_eq!(grid.len(), 281);
        assert_eq!(grid[0], -1.1);
        assert_eq!(*grid.last().unwrap(), -0.4);
        assert_eq!(cfg.lyapunov, LyapunovOptions::default());
    }

    #[test]
    fn unknown_key_is_located() {
        let text = "[params]\npump = 1.4\ntempreature = 3\n";
        let err = parse_config(text, Command::Trajectory).unwrap_err().to_string();
        assert!(err.contains("tempreature"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn command_mismatch() {
        let err = parse_config("command = \"spectrum\"", Command::Lyapunov).unwrap_err();
        assert!(err.messages[0].starts_with("command:"));
    }

    #[test]
    fn missing_grid_and_bad_ranges_are_all_reported() {
        let text = "[params]\nkappa = -1\n[spectrum]\nsamples_per_period = 48\n";
        let err = parse_config(text, Command::Bifurcation).unwrap_err();
        let joined = err.to_string();
        assert!(joined.contains("params.kappa"), "{joined}");
        assert!(joined.contains("detuning_grid: required"), "{joined}");
        assert!(joined.contains("spectrum.samples_per_period"), "{joined}");
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default();
        let sets = vec!["params.pump=1.5".to_string(), "qsd.scheme=rk4_drift".into(), "qsd.n_cav=6".into()];
        let out = apply_overrides(&cfg, &sets).unwrap();
        assert_eq!(out.params.pump, 1.5);
        assert_eq!(out.qsd.scheme, Scheme::Rk4Drift);
        assert_eq!(out.qsd.n_cav, Some(6));
        let grid = apply_overrides(&cfg, &["detuning_grid.values=[-1.0, -0.5]".into()]).unwrap();
        assert_eq!(grid.detuning_grid.unwrap().points(), vec![-1.0, -0.5]);
        let err = apply_overrides(&cfg, &["params.tempreature=1".into()]).unwrap_err().to_string();
        assert!(err.contains("tempreature") && err.contains("--set"), "{err}");
    }

    #[test]
    fn canonical_json_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.params = ModelParams::new(-0.1 - 0.2, 1.4).with_sigma(0.1);
        cfg.detuning_grid = Some(Grid::list(vec![1.0 / 3.0, 2.0f64.sqrt()]));
        cfg.seed = u64::MAX;
        let text = to_canonical_json(&cfg);
        assert_eq!(parse_document(&text).unwrap(), cfg);
        assert!(text.contains("-3.0000000000000004e-1"), "{text}");
    }

    #[test]
    fn embedded_config_is_read_from_a_header() {
        let cfg = RunConfig {
            command: Some(Command::Spectrum),
            ..RunConfig::default()
        };
        let doc = format!("# optochaos 0.1.0\n{CONFIG_LINE}{}\ntau,x\n1e0,2e0\n", to_canonical_json(&cfg));
        assert_eq!(parse_document(&doc).unwrap(), cfg);
    }
}
