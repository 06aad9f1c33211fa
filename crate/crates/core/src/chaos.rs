//! Maximal Lyapunov exponents, attractor classification, bifurcation
//! diagrams over the detuning and the regular/chaotic (Delta, P) phase diagram.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ScState};
use crate::ode::{Dopri5, Tolerances};
use crate::sc::{
    integrate_sc_with, sc_jacobian_apply_real, sc_rhs, sc_rhs_real, Sampling, ScTrajectory, TWO_PI,
};

/// lambda_max above this value (per unit tau) counts as chaotic.
pub const CHAOS_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LyapunovSpec {
    /// Time between tangent renormalizations.
    pub renorm_interval: f64,
    /// Retained renormalization steps.
    pub n_steps: usize,
    /// Renormalization steps discarded before averaging.
    pub discard: usize,
}

impl Default for LyapunovSpec {
    fn default() -> Self {
        Self {
            renorm_interval: TWO_PI,
            n_steps: 2000,
            discard: 200,
        }
    }
}

impl LyapunovSpec {
    fn check(&self) -> Result<()> {
        if !(self.renorm_interval > 0.0) || self.n_steps < 2 {
            return Err(Error::InvalidParameter {
                name: "lyapunov",
                reason: format!(
                    "renorm_interval = {} and n_steps = {} must be positive (n_steps >= 2)",
                    self.renorm_interval, self.n_steps
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovResult {
    pub lambda_max: f64,
    pub n_renorm: usize,
    pub stderr: f64,
    /// Fiducial state at the end of the run.
    pub final_state: ScState,
}

/// Batch-means standard error of the per-step growth rates, using only the
/// second half of the samples.
fn growth_stderr(rates: &[f64]) -> f64 {
    let tail = &rates[rates.len() / 2..];
    let batches = 16.min(tail.len());
    if batches < 2 {
        return f64::NAN;
    }
    let size = tail.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| tail[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

fn summarize(rates: &[f64], final_state: ScState) -> LyapunovResult {
    LyapunovResult {
        lambda_max: rates.iter().sum::<f64>() / rates.len() as f64,
        n_renorm: rates.len(),
        stderr: growth_stderr(rates),
        final_state,
    }
}

/// Removes the component of `v` along the flow direction at `state`.
///
/// The flow is autonomous, so every limit cycle carries a neutral phase
/// exponent; growth is measured transverse to the orbit. Near a fixed point
/// (|f| <= `FLOW_FLOOR`) the vector is left alone.
fn project_transverse(state: &[f64], v: &mut [f64], params: &ModelParams) {
    let mut f = [0.0; 4];
    sc_rhs_real(state, params, &mut f);
    let ff: f64 = f.iter().map(|x| x * x).sum();
    if ff.sqrt() <= FLOW_FLOOR {
        return;
    }
    let c = (0..4).map(|i| v[i] * f[i]).sum::<f64>() / ff;
    for i in 0..4 {
        v[i] -= c * f[i];
    }
}

/// Flow speed below which the orbit counts as resting on a fixed point.
pub const FLOW_FLOOR: f64 = 1e-6;

/// Benettin's method: co-integrates the fiducial orbit and a tangent vector,
/// renormalizing the tangent (transverse to the flow) every `renorm_interval`.
pub fn max_lyapunov(params: &ModelParams, initial: ScState, spec: &LyapunovSpec) -> Result<LyapunovResult> {
    max_lyapunov_with(params, initial, spec, Tolerances::default())
}

pub fn max_lyapunov_with(
    params: &ModelParams,
    initial: ScState,
    spec: &LyapunovSpec,
    tol: Tolerances,
) -> Result<LyapunovResult> {
    let params = params.validate()?;
    spec.check()?;
    let rhs = move |_t: f64, y: &[f64; 8], dy: &mut [f64; 8]| {
        let (state, tangent) = y.split_at(4);
        let (ds, dt) = dy.split_at_mut(4);
        sc_rhs_real(state, &params, ds);
        sc_jacobian_apply_real(state, tangent, &params, dt);
    };
    let s = initial.to_real();
    // unit tangent along the diagonal
    let y0 = [s[0], s[1], s[2], s[3], 0.5, 0.5, 0.5, 0.5];
    let mut ode = Dopri5::new(rhs, 0.0, y0, tol);
    let mut rates = Vec::with_capacity(spec.n_steps);
    for k in 1..=(spec.discard + spec.n_steps) {
        let t = k as f64 * spec.renorm_interval;
        ode.advance_to(t, |_| {})?;
        let mut y = *ode.state();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { tau: t });
        }
        let (state, tangent) = y.split_at_mut(4);
        project_transverse(state, tangent, &params);
        let d = y[4..].iter().map(|v| v * v).sum::<f64>().sqrt();
        y[4..].iter_mut().for_each(|v| *v /= d);
        ode.set_state(y);
        if k > spec.discard {
            rates.push(d.ln() / spec.renorm_interval);
        }
    }
    Ok(summarize(&rates, ScState::from_real(&ode.state()[..4])))
}

/// Two-trajectory estimate: a twin orbit at distance `separation` is pulled
/// back to that distance every `renorm_interval`.
pub fn max_lyapunov_twin(
    params: &ModelParams,
    initial: ScState,
    spec: &LyapunovSpec,
    separation: f64,
) -> Result<LyapunovResult> {
    let params = params.validate()?;
    spec.check()?;
    let rhs = move |_t: f64, y: &[f64; 8], dy: &mut [f64; 8]| {
        let (a, b) = y.split_at(4);
        let (da, db) = dy.split_at_mut(4);
        sc_rhs_real(a, &params, da);
        sc_rhs_real(b, &params, db);
    };
    let s = initial.to_real();
    let offset = separation / 2.0;
    let y0 = [s[0], s[1], s[2], s[3], s[0] + offset, s[1] + offset, s[2] + offset, s[3] + offset];
    // both copies share one step sequence, so tolerances must resolve the separation
    let tol = Tolerances::new(1e-12, 1e-15);
    let mut ode = Dopri5::new(rhs, 0.0, y0, tol);
    let mut rates = Vec::with_capacity(spec.n_steps);
    for k in 1..=(spec.discard + spec.n_steps) {
        let t = k as f64 * spec.renorm_interval;
        ode.advance_to(t, |_| {})?;
        let mut y = *ode.state();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { tau: t });
        }
        let mut diff: [f64; 4] = std::array::from_fn(|i| y[4 + i] - y[i]);
        project_transverse(&y[..4], &mut diff, &params);
        let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..4 {
            y[4 + i] = y[i] + diff[i] * separation / d;
        }
        ode.set_state(y);
        if k > spec.discard {
            rates.push((d / separation).ln() / spec.renorm_interval);
        }
    }
    Ok(summarize(&rates, ScState::from_real(&ode.state()[..4])))
}

/// A local maximum located by quadratic interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    /// Fractional sample index of the vertex.
    pub position: f64,
    pub value: f64,
}

/// Local maxima of a uniformly sampled series (3-point test plus parabolic
/// vertex refinement), in order.
pub fn local_maxima(values: &[f64]) -> Vec<Peak> {
    let mut peaks = Vec::new();
    for i in 1..values.len().saturating_sub(1) {
        let (y0, y1, y2) = (values[i - 1], values[i], values[i + 1]);
        if y1 > y0 && y1 >= y2 {
            let curv = y0 - 2.0 * y1 + y2;
            let (offset, value) = if curv < 0.0 {
                let off = 0.5 * (y0 - y2) / curv;
                (off, y1 - 0.125 * (y0 - y2).powi(2) / curv)
            } else {
                (0.0, y1)
            };
            peaks.push(Peak {
                position: i as f64 - offset,
                value,
            });
        }
    }
    peaks
}

/// Post-transient local maxima of x(tau).
pub fn extract_extrema(traj: &ScTrajectory) -> Result<Vec<f64>> {
    let post = traj.post_transient();
    if post.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: post.len(),
        });
    }
    if post.uniform_step().is_none() {
        return Err(Error::NonUniformSampling);
    }
    Ok(local_maxima(&post.positions()).iter().map(|p| p.value).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Periodicity {
    Periodic(usize),
    Aperiodic,
}

pub const MIN_MAXIMA_FOR_PERIOD: usize = 32;

/// Default clustering tolerance: 1e-3 of the dynamic range of the signal.
pub fn default_cluster_eps(signal: &[f64]) -> f64 {
    let (lo, hi) = signal
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    (1e-3 * (hi - lo)).max(1e-12)
}

/// Cluster labels of `values` (gap-based, absolute tolerance) and cluster count.
fn cluster_labels(values: &[f64], eps: f64) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut labels = vec![0; values.len()];
    let mut centers: Vec<(f64, usize)> = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for &i in &order {
        if values[i] - prev > eps || centers.is_empty() {
            centers.push((0.0, 0));
        }
        let c = centers.len() - 1;
        labels[i] = c;
        centers[c].0 += values[i];
        centers[c].1 += 1;
        prev = values[i];
    }
    (labels, centers.iter().map(|(s, n)| s / *n as f64).collect())
}

/// Period of the maxima sequence: the number of value clusters, provided the
/// cluster-label sequence repeats with exactly that period.
pub fn detect_period(maxima: &[f64], cluster_eps: f64) -> Periodicity {
    if maxima.len() < MIN_MAXIMA_FOR_PERIOD {
        return Periodicity::Aperiodic;
    }
    let (labels, centers) = cluster_labels(maxima, cluster_eps);
    let n = centers.len();
    if n > maxima.len() / 4 {
        return Periodicity::Aperiodic;
    }
    let periodic = (n..labels.len()).all(|i| labels[i] == labels[i - n]);
    if periodic {
        Periodicity::Periodic(n)
    } else {
        Periodicity::Aperiodic
    }
}

/// Period of a uniformly sampled series from its local maxima, with the
/// default clustering tolerance.
pub fn series_periodicity(values: &[f64]) -> Periodicity {
    let maxima: Vec<f64> = local_maxima(values).iter().map(|p| p.value).collect();
    detect_period(&maxima, default_cluster_eps(values))
}

/// Distinct maxima values (cluster centers) for a given tolerance.
pub fn distinct_maxima(maxima: &[f64], cluster_eps: f64) -> Vec<f64> {
    cluster_labels(maxima, cluster_eps).1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttractorKind {
    Stationary,
    Periodic(usize),
    Chaotic,
    Undecided,
}

impl AttractorKind {
    pub fn period(&self) -> Option<usize> {
        match self {
            AttractorKind::Periodic(n) => Some(*n),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            AttractorKind::Stationary => "stationary".into(),
            AttractorKind::Periodic(n) => format!("periodic-{n}"),
            AttractorKind::Chaotic => "chaotic".into(),
            AttractorKind::Undecided => "undecided".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractorClass {
    pub kind: AttractorKind,
    /// n for periodic(n), 0 otherwise.
    pub period_multiplier: usize,
    /// Distinct maxima of x(tau) (cluster centers), or the raw recorded maxima
    /// when no finite set is found.
    pub maxima: Vec<f64>,
    pub lyapunov: LyapunovResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySpec {
    pub lyapunov: LyapunovSpec,
    /// Periods recorded after the Lyapunov run for maxima extraction.
    pub record_periods: usize,
    pub samples_per_period: usize,
    /// Relative clustering tolerance (fraction of the x(tau) range).
    pub cluster_rel: f64,
    pub chaos_threshold: f64,
    /// Oscillation range of x below which the attractor counts as stationary.
    pub stationary_tol: f64,
}

impl Default for ClassifySpec {
    fn default() -> Self {
        Self {
            lyapunov: LyapunovSpec::default(),
            record_periods: 128,
            samples_per_period: 128,
            cluster_rel: 1e-3,
            chaos_threshold: CHAOS_THRESHOLD,
            stationary_tol: 1e-6,
        }
    }
}

/// Full result of one classification run.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class: AttractorClass,
    /// Maxima of x(tau) recorded after the Lyapunov run, in time order.
    pub recorded_maxima: Vec<f64>,
    /// State at the end of the record, for warm starts.
    pub final_state: ScState,
    /// Extremes and mean of x(tau) over the record.
    pub x_min: f64,
    pub x_max: f64,
    pub x_mean: f64,
}

/// Runs the Lyapunov computation (whose discarded steps double as the
/// transient), records `record_periods` further periods, and classifies.
pub fn classify_attractor(params: &ModelParams, initial: ScState, spec: &ClassifySpec) -> Result<Classification> {
    let lyap = max_lyapunov(params, initial, &spec.lyapunov)?;
    let start = lyap.final_state;
    let span = (0.0, spec.record_periods as f64 * TWO_PI);
    let traj = integrate_sc_with(
        start,
        params,
        span,
        Sampling::per_period(spec.samples_per_period),
        Tolerances::default(),
        0.0,
    )?;
    let x = traj.positions();
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let maxima = extract_extrema(&traj)?;
    let final_state = traj.last_state().unwrap_or(start);

    let residual = {
        let r = sc_rhs(&final_state, params);
        (r.alpha.norm_sqr() + r.beta.norm_sqr()).sqrt()
    };
    let eps = (spec.cluster_rel * range).max(1e-12);
    let periodicity = detect_period(&maxima, eps);

    let (kind, distinct) = if range < spec.stationary_tol && residual < spec.stationary_tol {
        (AttractorKind::Stationary, vec![])
    } else if lyap.lambda_max > spec.chaos_threshold {
        (AttractorKind::Chaotic, maxima.clone())
    } else if let Periodicity::Periodic(n) = periodicity {
        (AttractorKind::Periodic(n), distinct_maxima(&maxima, eps))
    } else {
        (AttractorKind::Undecided, maxima.clone())
    };
    Ok(Classification {
        class: AttractorClass {
            kind,
            period_multiplier: kind.period().unwrap_or(0),
            maxima: distinct,
            lyapunov: lyap,
        },
        recorded_maxima: maxima,
        final_state,
        x_min: lo,
        x_max: hi,
        x_mean: x.iter().sum::<f64>() / x.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub class: AttractorClass,
    /// Recorded maxima of x(tau) (scatter for the diagram).
    pub maxima: Vec<f64>,
}

/// One grid value of a bifurcation diagram. Either run may fail on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationPoint {
    pub detuning: f64,
    /// Attractor followed from the previous grid value.
    pub warm: std::result::Result<SweepOutcome, String>,
    /// Attractor reached from the default initial condition (0, 0).
    pub cold: std::result::Result<SweepOutcome, String>,
}

impl BifurcationPoint {
    /// Warm-start result if available, else the cold start.
    pub fn primary(&self) -> Option<&SweepOutcome> {
        self.warm.as_ref().ok().or(self.cold.as_ref().ok())
    }

    pub fn failed(&self) -> bool {
        self.warm.is_err() || self.cold.is_err()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationDiagram {
    pub axis: String,
    pub params: ModelParams,
    pub points: Vec<BifurcationPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// Warm-start chain along the grid plus a cold start at each point.
    Both,
    /// Cold starts only (fully parallel).
    Cold,
    /// Warm-start chain only.
    Warm,
}

fn check_grid(name: &'static str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter {
            name,
            reason: "grid is empty".into(),
        });
    }
    let inc = grid.windows(2).all(|w| w[1] > w[0]);
    let dec = grid.windows(2).all(|w| w[1] < w[0]);
    if !(inc || dec) || grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter {
            name,
            reason: "grid must be finite and strictly monotone".into(),
        });
    }
    Ok(())
}

/// Inclusive uniform grid from `start` to `stop` (the last point is snapped to `stop`).
pub fn linear_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step).abs().round() as usize;
    let step = if n == 0 { 0.0 } else { (stop - start) / n as f64 };
    (0..=n).map(|k| start + k as f64 * step).collect()
}

fn run_outcome(params: &ModelParams, initial: ScState, spec: &ClassifySpec) -> (std::result::Result<SweepOutcome, String>, Option<ScState>) {
    match classify_attractor(params, initial, spec) {
        Ok(c) => (
            Ok(SweepOutcome {
                class: c.class,
                maxima: c.recorded_maxima,
            }),
            Some(c.final_state),
        ),
        Err(e) => (Err(e.to_string()), None),
    }
}

/// Bifurcation diagram over the detuning grid.
pub fn bifurcation_sweep(
    template: &ModelParams,
    grid: &[f64],
    spec: &ClassifySpec,
    mode: StartMode,
) -> Result<BifurcationDiagram> {
    let template = template.validate()?;
    check_grid("detuning grid", grid)?;
    let at = |d: f64| ModelParams { detuning: d, ..template };
    let skipped = || Err("not run".to_string());

    let (warm, cold) = rayon::join(
        || {
            if mode == StartMode::Cold {
                return grid.iter().map(|_| skipped()).collect::<Vec<_>>();
            }
            let mut state = ScState::ORIGIN;
            grid.iter()
                .map(|&d| {
                    let (outcome, last) = run_outcome(&at(d), state, spec);
                    state = last.unwrap_or(ScState::ORIGIN);
                    outcome
                })
                .collect()
        },
        || {
            if mode == StartMode::Warm {
                return grid.iter().map(|_| skipped()).collect::<Vec<_>>();
            }
            grid.par_iter()
                .map(|&d| run_outcome(&at(d), ScState::ORIGIN, spec).0)
                .collect()
        },
    );
    Ok(BifurcationDiagram {
        axis: "detuning".into(),
        params: template,
        points: grid
            .iter()
            .zip(warm.into_iter().zip(cold))
            .map(|(&detuning, (warm, cold))| BifurcationPoint { detuning, warm, cold })
            .collect(),
    })
}

/// Class of one (Delta, P) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub detuning: f64,
    pub pump: f64,
    pub kind: AttractorKind,
    pub lambda_max: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub delta_grid: Vec<f64>,
    pub pump_grid: Vec<f64>,
    /// Row-major over pump: `cells[ip * delta_grid.len() + id]`.
    pub cells: Vec<PhaseCell>,
    /// Boundary of the region with period >= 2 or chaos.
    pub pdb_boundary: Vec<Vec<(f64, f64)>>,
    /// Boundary of the chaotic region.
    pub chaos_boundary: Vec<Vec<(f64, f64)>>,
}

impl PhaseDiagram {
    pub fn cell(&self, ip: usize, id: usize) -> &PhaseCell {
        &self.cells[ip * self.delta_grid.len() + id]
    }

    pub fn row(&self, ip: usize) -> &[PhaseCell] {
        let n = self.delta_grid.len();
        &self.cells[ip * n..(ip + 1) * n]
    }
}

pub fn phase_diagram_grid(
    template: &ModelParams,
    delta_grid: &[f64],
    pump_grid: &[f64],
    spec: &ClassifySpec,
) -> Result<PhaseDiagram> {
    let template = template.validate()?;
    check_grid("detuning grid", delta_grid)?;
    check_grid("pump grid", pump_grid)?;
    let nd = delta_grid.len();
    let cells: Vec<PhaseCell> = (0..nd * pump_grid.len())
        .into_par_iter()
        .map(|idx| {
            let (detuning, pump) = (delta_grid[idx % nd], pump_grid[idx / nd]);
            let params = ModelParams {
                detuning,
                pump,
                ..template
            };
            match classify_attractor(&params, ScState::ORIGIN, spec) {
                Ok(c) => PhaseCell {
                    detuning,
                    pump,
                    kind: c.class.kind,
                    lambda_max: c.class.lyapunov.lambda_max,
                    error: None,
                },
                Err(e) => PhaseCell {
                    detuning,
                    pump,
                    kind: AttractorKind::Undecided,
                    lambda_max: f64::NAN,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let inside = |pred: &dyn Fn(AttractorKind) -> bool| -> Vec<bool> { cells.iter().map(|c| pred(c.kind)).collect() };
    let beyond_pdb = inside(&|k| matches!(k, AttractorKind::Chaotic) || k.period().is_some_and(|n| n >= 2));
    let chaotic = inside(&|k| k == AttractorKind::Chaotic);
    Ok(PhaseDiagram {
        pdb_boundary: contour_polylines(delta_grid, pump_grid, &beyond_pdb),
        chaos_boundary: contour_polylines(delta_grid, pump_grid, &chaotic),
        delta_grid: delta_grid.to_vec(),
        pump_grid: pump_grid.to_vec(),
        cells,
    })
}

/// Marching-squares contour of a boolean field on grid nodes, with crossings
/// at edge midpoints, chained into polylines of (Delta, P) points.
pub fn contour_polylines(xs: &[f64], ys: &[f64], mask: &[bool]) -> Vec<Vec<(f64, f64)>> {
    let nx = xs.len();
    let ny = ys.len();
    if nx < 2 || ny < 2 {
        return Vec::new();
    }
    let at = |i: usize, j: usize| mask[j * nx + i];
    // edges keyed by (i2, j2) in doubled coordinates so midpoints are exact
    type Key = (usize, usize);
    let mid = |a: Key| (0.5 * (xs[a.0 / 2] + xs[(a.0 + 1) / 2]), 0.5 * (ys[a.1 / 2] + ys[(a.1 + 1) / 2]));
    let mut segments: Vec<(Key, Key)> = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let (bl, br, tr, tl) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
            let bottom = (2 * i + 1, 2 * j);
            let right = (2 * i + 2, 2 * j + 1);
            let top = (2 * i + 1, 2 * j + 2);
            let left = (2 * i, 2 * j + 1);
            let mut crossings = Vec::with_capacity(4);
            if bl != br {
                crossings.push(bottom);
            }
            if br != tr {
                crossings.push(right);
            }
            if tr != tl {
                crossings.push(top);
            }
            if tl != bl {
                crossings.push(left);
            }
            match crossings.len() {
                2 => segments.push((crossings[0], crossings[1])),
                4 => {
                    // saddle: separate the inside corners
                    if bl {
                        segments.push((bottom, left));
                        segments.push((top, right));
                    } else {
                        segments.push((bottom, right));
                        segments.push((top, left));
                    }
                }
                _ => {}
            }
        }
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let mut adjacency: std::collections::BTreeMap<Key, Vec<usize>> = Default::default();
    for (k, (a, b)) in segments.iter().enumerate() {
        adjacency.entry(*a).or_default().push(k);
        adjacency.entry(*b).or_default().push(k);
    }
    // start open chains at endpoints of degree 1, then close remaining loops
    let mut starts: Vec<usize> = (0..segments.len())
        .filter(|&k| adjacency[&segments[k].0].len() == 1 || adjacency[&segments[k].1].len() == 1)
        .collect();
    starts.extend(0..segments.len());
    for start in starts {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let (mut head, mut tail) = if adjacency[&a].len() == 1 { (a, b) } else { (b, a) };
        let mut line = vec![mid(head), mid(tail)];
        loop {
            let next = adjacency[&tail].iter().copied().find(|&k| !used[k]);
            let Some(k) = next else { break };
            used[k] = true;
            let (p, q) = segments[k];
            head = tail;
            tail = if p == head { q } else { p };
            line.push(mid(tail));
        }
        lines.push(line);
    }
    lines
}
