//! Quantum state diffusion on a truncated two-mode Fock space.
//!
//! Units are those of the semi-classical model (Omega = 1). The Hamiltonian is
//! H = [-Delta + g0 (b + b^dag)] a^dag a + b^dag b + alpha_L (a + a^dag) with
//! Lindblad channels sqrt(kappa) a and sqrt(Gamma) b. Basis index
//! `n * n_mech + m` for cavity level n and mechanical level m.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};
use crate::model::{derive_couplings, CanonicalCoords, ModelParams};
use crate::sc::TWO_PI;

pub const DEFAULT_DIM_BUDGET: usize = 1 << 20;
pub const DEFAULT_LEAK_TOL: f64 = 1e-6;
/// Largest dimension accepted by the density-matrix oracle.
pub const ORACLE_MAX_DIM: usize = 256;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HilbertTruncation {
    pub n_cav: usize,
    pub n_mech: usize,
}

impl HilbertTruncation {
    pub fn new(n_cav: usize, n_mech: usize) -> Self {
        Self { n_cav, n_mech }
    }

    pub fn dim(&self) -> usize {
        self.n_cav * self.n_mech
    }

    pub fn index(&self, n: usize, m: usize) -> usize {
        n * self.n_mech + m
    }

    pub fn validate(&self, budget: usize) -> Result<()> {
        if self.n_cav < 2 || self.n_mech < 2 {
            return Err(Error::InvalidParameter {
                name: "truncation",
                reason: format!("cutoffs ({}, {}) must both be at least 2", self.n_cav, self.n_mech),
            });
        }
        let dim = self.n_cav.checked_mul(self.n_mech).unwrap_or(usize::MAX);
        if dim > budget {
            return Err(Error::DimensionBudget { dim, budget });
        }
        Ok(())
    }

    pub fn doubled(&self) -> Self {
        Self::new(2 * self.n_cav, 2 * self.n_mech)
    }
}

/// Cutoffs for coherent amplitudes of modulus `a_max` (cavity) and `b_max`
/// (mechanics): about four times the mean occupation, never less than
/// mean + 6 sqrt(mean) + 6 levels.
pub fn suggest_truncation(a_max: f64, b_max: f64) -> HilbertTruncation {
    let levels = |amp: f64| {
        let mean = amp * amp;
        (4.0 * mean).max(mean + 6.0 * mean.sqrt() + 6.0).ceil() as usize + 1
    };
    HilbertTruncation::new(levels(a_max), levels(b_max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    pub amplitudes: Vec<Complex64>,
    pub truncation: HilbertTruncation,
}

impl QuantumState {
    pub fn vacuum(truncation: HilbertTruncation) -> Self {
        Self::fock(truncation, 0, 0)
    }

    pub fn fock(truncation: HilbertTruncation, n: usize, m: usize) -> Self {
        let mut amplitudes = vec![ZERO; truncation.dim()];
        amplitudes[truncation.index(n, m)] = Complex64::new(1.0, 0.0);
        Self { amplitudes, truncation }
    }

    /// Normalized state from arbitrary amplitudes.
    pub fn from_amplitudes(truncation: HilbertTruncation, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != truncation.dim() {
            return Err(Error::InvalidParameter {
                name: "amplitudes",
                reason: format!("length {} != dimension {}", amplitudes.len(), truncation.dim()),
            });
        }
        let mut s = Self { amplitudes, truncation };
        let norm = s.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NormCollapse { tau: 0.0, norm });
        }
        s.scale(1.0 / norm);
        Ok(s)
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    fn scale(&mut self, f: f64) {
        for c in self.amplitudes.iter_mut() {
            *c *= f;
        }
    }

    pub fn expectations(&self) -> Observables {
        expectations(&self.amplitudes, self.truncation)
    }

    /// Population of the top 10% of levels of either mode (the larger of the two).
    pub fn leakage(&self) -> f64 {
        leakage(&self.amplitudes, self.truncation)
    }
}

fn top_levels(n: usize) -> usize {
    n - n.div_ceil(10)
}

fn leakage(psi: &[Complex64], t: HilbertTruncation) -> f64 {
    let (cav_top, mech_top) = (top_levels(t.n_cav), top_levels(t.n_mech));
    let (mut cav, mut mech) = (0.0, 0.0);
    for n in 0..t.n_cav {
        for m in 0..t.n_mech {
            let p = psi[t.index(n, m)].norm_sqr();
            if n >= cav_top {
                cav += p;
            }
            if m >= mech_top {
                mech += p;
            }
        }
    }
    f64::max(cav, mech)
}

/// Expectation values <a>, <b>, <a^dag a>, <b^dag b> of a normalized state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Observables {
    pub a: Complex64,
    pub b: Complex64,
    pub n_cav: f64,
    pub n_mech: f64,
}

fn expectations(psi: &[Complex64], t: HilbertTruncation) -> Observables {
    let mut o = Observables::default();
    let (nc, nm) = (t.n_cav, t.n_mech);
    for n in 0..nc {
        let sn1 = ((n + 1) as f64).sqrt();
        for m in 0..nm {
            let k = n * nm + m;
            let c = psi[k].conj();
            let p = psi[k].norm_sqr();
            o.n_cav += n as f64 * p;
            o.n_mech += m as f64 * p;
            if n + 1 < nc {
                o.a += c * sn1 * psi[k + nm];
            }
            if m + 1 < nm {
                o.b += c * ((m + 1) as f64).sqrt() * psi[k + 1];
            }
        }
    }
    o
}

/// Matrix-free operator set for one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOperators {
    pub truncation: HilbertTruncation,
    pub detuning: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub g0: f64,
    pub alpha_l: f64,
    sqrt: Vec<f64>,
}

/// Operators from the model parameters, with g0 and alpha_L from
/// [`derive_couplings`]. sigma = 0 has no quantum counterpart.
pub fn build_operators(params: &ModelParams, truncation: HilbertTruncation) -> Result<ModelOperators> {
    build_operators_with_budget(params, truncation, DEFAULT_DIM_BUDGET)
}

pub fn build_operators_with_budget(
    params: &ModelParams,
    truncation: HilbertTruncation,
    budget: usize,
) -> Result<ModelOperators> {
    let params = params.validate()?;
    if params.sigma == 0.0 {
        return Err(Error::ClassicalLimit);
    }
    let c = derive_couplings(&params)?;
    ModelOperators::with_couplings(&params, truncation, c.g0, c.alpha_l, budget)
}

impl ModelOperators {
    /// Explicit couplings; g0 = 0 or alpha_L = 0 switch the corresponding terms off.
    pub fn with_couplings(
        params: &ModelParams,
        truncation: HilbertTruncation,
        g0: f64,
        alpha_l: f64,
        budget: usize,
    ) -> Result<Self> {
        let params = params.validate()?;
        truncation.validate(budget)?;
        let top = truncation.n_cav.max(truncation.n_mech);
        Ok(Self {
            truncation,
            detuning: params.detuning,
            kappa: params.kappa,
            gamma: params.gamma,
            g0,
            alpha_l,
            sqrt: (0..=top).map(|k| (k as f64).sqrt()).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.truncation.dim()
    }

    /// out = a psi
    pub fn apply_a(&self, psi: &[Complex64], out: &mut [Complex64]) {
        let (nc, nm) = (self.truncation.n_cav, self.truncation.n_mech);
        for n in 0..nc {
            for m in 0..nm {
                let k = n * nm + m;
                out[k] = if n + 1 < nc { self.sqrt[n + 1] * psi[k + nm] } else { ZERO };
            }
        }
    }

    /// out = a^dag psi
    pub fn apply_a_dag(&self, psi: &[Complex64], out: &mut [Complex64]) {
        let (nc, nm) = (self.truncation.n_cav, self.truncation.n_mech);
        for n in 0..nc {
            for m in 0..nm {
                let k = n * nm + m;
                out[k] = if n > 0 { self.sqrt[n] * psi[k - nm] } else { ZERO };
            }
        }
    }

    /// out = b psi
    pub fn apply_b(&self, psi: &[Complex64], out: &mut [Complex64]) {
        let (nc, nm) = (self.truncation.n_cav, self.truncation.n_mech);
        for n in 0..nc {
            for m in 0..nm {
                let k = n * nm + m;
                out[k] = if m + 1 < nm { self.sqrt[m + 1] * psi[k + 1] } else { ZERO };
            }
        }
    }

    /// out = b^dag psi
    pub fn apply_b_dag(&self, psi: &[Complex64], out: &mut [Complex64]) {
        let (nc, nm) = (self.truncation.n_cav, self.truncation.n_mech);
        for n in 0..nc {
            for m in 0..nm {
                let k = n * nm + m;
                out[k] = if m > 0 { self.sqrt[m] * psi[k - 1] } else { ZERO };
            }
        }
    }

    /// out = H psi
    pub fn apply_h(&self, psi: &[Complex64], out: &mut [Complex64]) {
        self.apply_generator(psi, out, Complex64::new(1.0, 0.0), ZERO, ZERO, 0.0);
    }

    /// out = [h H + c_a a + c_b b + d_n (kappa a^dag a + Gamma b^dag b)] psi
    fn apply_generator(
        &self,
        psi: &[Complex64],
        out: &mut [Complex64],
        h: Complex64,
        c_a: Complex64,
        c_b: Complex64,
        d_n: f64,
    ) {
        let (nc, nm) = (self.truncation.n_cav, self.truncation.n_mech);
        let s = &self.sqrt;
        for n in 0..nc {
            let nf = n as f64;
            let g = self.g0 * nf;
            for m in 0..nm {
                let k = n * nm + m;
                let mf = m as f64;
                let mut hpsi = (mf - self.detuning * nf) * psi[k];
                let mut lpsi = ZERO;
                if m + 1 < nm {
                    let t = s[m + 1] * psi[k + 1];
                    hpsi += g * t;
                    lpsi += c_b * t;
                }
                if m > 0 {
                    hpsi += g * s[m] * psi[k - 1];
                }
                if n + 1 < nc {
                    let t = s[n + 1] * psi[k + nm];
                    hpsi += self.alpha_l * t;
                    lpsi += c_a * t;
                }
                if n > 0 {
                    hpsi += self.alpha_l * s[n] * psi[k - nm];
                }
                out[k] = h * hpsi + lpsi + d_n * (self.kappa * nf + self.gamma * mf) * psi[k];
            }
        }
    }

    /// Dense matrices (H, a, b) for small dimensions.
    pub fn dense(&self) -> (DMatrix<Complex64>, DMatrix<Complex64>, DMatrix<Complex64>) {
        let d = self.dim();
        let column = |f: &dyn Fn(&[Complex64], &mut [Complex64])| {
            let mut mat = DMatrix::zeros(d, d);
            let mut e = vec![ZERO; d];
            let mut out = vec![ZERO; d];
            for j in 0..d {
                e[j] = Complex64::new(1.0, 0.0);
                f(&e, &mut out);
                for i in 0..d {
                    mat[(i, j)] = out[i];
                }
                e[j] = ZERO;
            }
            mat
        };
        (
            column(&|p, o| self.apply_h(p, o)),
            column(&|p, o| self.apply_a(p, o)),
            column(&|p, o| self.apply_b(p, o)),
        )
    }
}

/// Complex Wiener increments for the two channels.
pub type NoisePair = [Complex64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Explicit Euler for drift and noise.
    #[default]
    EulerMaruyama,
    /// Classical Runge-Kutta for the drift (with expectation values frozen at
    /// the start of the step), Euler for the noise. Stable for |H| dt up to about 2.8.
    Rk4Drift,
}

/// Scratch buffers for [`QsdStepper::step`].
#[derive(Debug, Clone)]
pub struct QsdStepper {
    scheme: Scheme,
    k: [Vec<Complex64>; 4],
    tmp: Vec<Complex64>,
}

impl QsdStepper {
    pub fn new(dim: usize, scheme: Scheme) -> Self {
        Self {
            scheme,
            k: std::array::from_fn(|_| vec![ZERO; dim]),
            tmp: vec![ZERO; dim],
        }
    }

    /// One step of the Gisin-Percival Ito equation
    /// d psi = -iH psi dt + sum_m (<L_m^dag> L_m - L_m^dag L_m / 2 - |<L_m>|^2 / 2) psi dt
    ///         + sum_m (L_m - <L_m>) psi dxi_m,
    /// with expectation values of the pre-step state, followed by renormalization.
    /// Returns the pre-step observables.
    pub fn step(
        &mut self,
        state: &mut QuantumState,
        ops: &ModelOperators,
        dt: f64,
        noise: NoisePair,
        tau: f64,
    ) -> Result<Observables> {
        let psi = &mut state.amplitudes;
        let obs = expectations(psi, state.truncation);
        let (ka, gb) = (ops.kappa, ops.gamma);
        let c_a = ka * obs.a.conj();
        let c_b = gb * obs.b.conj();
        let shift = -0.5 * (ka * obs.a.norm_sqr() + gb * obs.b.norm_sqr());
        let h = Complex64::new(0.0, -1.0);
        let drift = |src: &[Complex64], out: &mut [Complex64]| {
            ops.apply_generator(src, out, h, c_a, c_b, -0.5);
            for (o, s) in out.iter_mut().zip(src) {
                *o += shift * s;
            }
        };

        // noise term, from the pre-step state
        let (na, nb) = (ka.sqrt() * noise[0], gb.sqrt() * noise[1]);
        {
            let noise_buf = &mut self.tmp;
            ops.apply_generator(psi, noise_buf, ZERO, na, nb, 0.0);
            let mean = -(ka.sqrt() * obs.a * noise[0] + gb.sqrt() * obs.b * noise[1]);
            for (o, s) in noise_buf.iter_mut().zip(psi.iter()) {
                *o += mean * s;
            }
        }

        match self.scheme {
            Scheme::EulerMaruyama => {
                let k1 = &mut self.k[0];
                drift(psi, k1);
                for i in 0..psi.len() {
                    psi[i] += dt * k1[i] + self.tmp[i];
                }
            }
            Scheme::Rk4Drift => {
                let [k1, k2, k3, k4] = &mut self.k;
                drift(psi, k1);
                for i in 0..psi.len() {
                    k4[i] = psi[i] + 0.5 * dt * k1[i];
                }
                drift(k4, k2);
                for i in 0..psi.len() {
                    k4[i] = psi[i] + 0.5 * dt * k2[i];
                }
                drift(k4, k3);
                for i in 0..psi.len() {
                    k2[i] = k1[i] + 2.0 * k2[i] + 2.0 * k3[i];
                    k3[i] = psi[i] + dt * k3[i];
                }
                drift(k3, k4);
                for i in 0..psi.len() {
                    psi[i] += dt / 6.0 * (k2[i] + k4[i]) + self.tmp[i];
                }
            }
        }

        let norm = psi.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !(norm >= 1e-8) || !norm.is_finite() {
            return Err(Error::NormCollapse { tau, norm });
        }
        let inv = 1.0 / norm;
        for c in psi.iter_mut() {
            *c *= inv;
        }
        Ok(obs)
    }
}

/// Single Euler-Maruyama step, allocating scratch space.
pub fn qsd_step(state: &QuantumState, ops: &ModelOperators, dt: f64, noise: NoisePair) -> Result<QuantumState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter {
            name: "dt",
            reason: format!("{dt} must be positive"),
        });
    }
    let mut next = state.clone();
    QsdStepper::new(state.truncation.dim(), Scheme::EulerMaruyama).step(&mut next, ops, dt, noise, 0.0)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QsdSpec {
    /// Steps per mechanical period; dt = 2 pi / steps_per_period.
    pub steps_per_period: usize,
    /// Recorded samples per period; must divide `steps_per_period`.
    pub samples_per_period: usize,
    pub scheme: Scheme,
    pub leak_tol: f64,
    pub dim_budget: usize,
    /// Each Wiener increment is the sum of this many finer increments, so a
    /// run with (2 k, s) and one with (k, 2 s) share the same Brownian path.
    pub noise_substeps: usize,
}

impl Default for QsdSpec {
    fn default() -> Self {
        Self {
            steps_per_period: 4096,
            samples_per_period: 32,
            scheme: Scheme::EulerMaruyama,
            leak_tol: DEFAULT_LEAK_TOL,
            dim_budget: DEFAULT_DIM_BUDGET,
            noise_substeps: 1,
        }
    }
}

impl QsdSpec {
    pub fn dt(&self) -> f64 {
        TWO_PI / self.steps_per_period as f64
    }

    fn check(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::InvalidParameter {
                name: "qsd",
                reason,
            })
        };
        if self.steps_per_period == 0 || self.samples_per_period == 0 || self.noise_substeps == 0 {
            return bad("steps_per_period, samples_per_period and noise_substeps must be positive".into());
        }
        if self.steps_per_period % self.samples_per_period != 0 {
            return bad(format!(
                "samples_per_period {} does not divide steps_per_period {}",
                self.samples_per_period, self.steps_per_period
            ));
        }
        if !(self.leak_tol > 0.0) {
            return bad(format!("leak_tol {} must be positive", self.leak_tol));
        }
        Ok(())
    }

    /// Refined spec with half the step and the same Brownian path.
    pub fn halved(&self) -> Result<Self> {
        if self.noise_substeps % 2 != 0 {
            return Err(Error::InvalidParameter {
                name: "noise_substeps",
                reason: "must be even to halve the step on the same path".into(),
            });
        }
        Ok(Self {
            steps_per_period: 2 * self.steps_per_period,
            noise_substeps: self.noise_substeps / 2,
            ..*self
        })
    }
}

/// Rescaled semi-classical variables of a quantum state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rescaled {
    pub alpha: Complex64,
    pub beta: Complex64,
    pub x: f64,
    pub p: f64,
}

/// alpha = <a> / (2 alpha_L), beta = g0 <b>. A vanishing coupling gives 0 for
/// the corresponding variable.
pub fn rescale(obs: &Observables, ops: &ModelOperators) -> Rescaled {
    let alpha = if ops.alpha_l != 0.0 { obs.a / (2.0 * ops.alpha_l) } else { ZERO };
    let beta = ops.g0 * obs.b;
    let CanonicalCoords { x, p } = crate::model::canonical_coords(beta);
    Rescaled { alpha, beta, x, p }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub observables: Vec<Observables>,
    pub leakage: Vec<f64>,
    pub rescaled: Vec<Rescaled>,
    pub master_seed: u64,
    pub index: u64,
    pub max_leakage: f64,
}

/// Per-trajectory noise stream, a pure function of (master_seed, index).
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

fn wiener(rng: &mut ChaCha8Rng, dt: f64, substeps: usize) -> NoisePair {
    let fine = (dt / substeps as f64 / 2.0).sqrt();
    let mut out = [ZERO; 2];
    for _ in 0..substeps {
        for o in out.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *o += fine * Complex64::new(re, im);
        }
    }
    out
}

fn check_span(span: (f64, f64)) -> Result<()> {
    if !(span.1 > span.0) || !span.0.is_finite() || !span.1.is_finite() {
        return Err(Error::InvalidParameter {
            name: "span",
            reason: format!("need tau1 > tau0, got {span:?}"),
        });
    }
    Ok(())
}

/// Runs one trajectory from `initial` over `span`, recording at the sample
/// cadence of `spec` (the endpoint is included when it lands on the grid).
pub fn run_trajectory_from(
    ops: &ModelOperators,
    initial: &QuantumState,
    span: (f64, f64),
    spec: &QsdSpec,
    master_seed: u64,
    index: u64,
) -> Result<TrajectoryRecord> {
    spec.check()?;
    check_span(span)?;
    if initial.truncation != ops.truncation {
        return Err(Error::InvalidParameter {
            name: "initial",
            reason: "truncation differs from the operators".into(),
        });
    }
    let dt = spec.dt();
    let n_steps = ((span.1 - span.0) / dt).round() as usize;
    let every = spec.steps_per_period / spec.samples_per_period;
    let mut rng = trajectory_rng(master_seed, index);
    let mut state = initial.clone();
    let mut stepper = QsdStepper::new(ops.dim(), spec.scheme);
    let mut rec = TrajectoryRecord {
        times: Vec::with_capacity(n_steps / every + 1),
        observables: Vec::new(),
        leakage: Vec::new(),
        rescaled: Vec::new(),
        master_seed,
        index,
        max_leakage: 0.0,
    };
    let record = |rec: &mut TrajectoryRecord, state: &QuantumState, tau: f64| -> Result<()> {
        let obs = state.expectations();
        let leak = state.leakage();
        if leak > spec.leak_tol {
            return Err(Error::Leakage {
                tau,
                leakage: leak,
                limit: spec.leak_tol,
            });
        }
        rec.max_leakage = rec.max_leakage.max(leak);
        rec.times.push(tau);
        rec.observables.push(obs);
        rec.leakage.push(leak);
        rec.rescaled.push(rescale(&obs, ops));
        Ok(())
    };
    record(&mut rec, &state, span.0)?;
    for k in 1..=n_steps {
        let tau = span.0 + (k - 1) as f64 * dt;
        let noise = wiener(&mut rng, dt, spec.noise_substeps);
        stepper.step(&mut state, ops, dt, noise, tau)?;
        if k % every == 0 {
            record(&mut rec, &state, span.0 + k as f64 * dt)?;
        }
    }
    Ok(rec)
}

/// Trajectory from the two-mode vacuum.
pub fn run_trajectory(
    params: &ModelParams,
    truncation: HilbertTruncation,
    span: (f64, f64),
    spec: &QsdSpec,
    master_seed: u64,
    index: u64,
) -> Result<TrajectoryRecord> {
    let ops = build_operators_with_budget(params, truncation, spec.dim_budget)?;
    run_trajectory_from(&ops, &QuantumState::vacuum(truncation), span, spec, master_seed, index)
}

/// Points of a series at tau - tau0 = 2 pi k for k >= `discard_periods`.
pub fn stroboscopic_points(times: &[f64], coords: &[CanonicalCoords], discard_periods: usize) -> Result<Vec<CanonicalCoords>> {
    if times.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: times.len(),
        });
    }
    let step = times[1] - times[0];
    let per = TWO_PI / step;
    if !(step > 0.0) || (per - per.round()).abs() > 1e-6 || per.round() < 1.0 {
        return Err(Error::CadenceMismatch { step });
    }
    let per = per.round() as usize;
    Ok((discard_periods * per..coords.len())
        .step_by(per)
        .map(|i| coords[i])
        .collect())
}

/// Stroboscopic (x, p) section of a quantum trajectory.
pub fn stroboscopic_section(record: &TrajectoryRecord, discard_periods: usize) -> Result<Vec<CanonicalCoords>> {
    let coords: Vec<CanonicalCoords> = record.rescaled.iter().map(|r| CanonicalCoords { x: r.x, p: r.p }).collect();
    stroboscopic_points(&record.times, &coords, discard_periods)
}

/// Sample mean and standard error (of the mean) of each observable component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub a_re: (f64, f64),
    pub a_im: (f64, f64),
    pub b_re: (f64, f64),
    pub b_im: (f64, f64),
    pub n_cav: (f64, f64),
    pub n_mech: (f64, f64),
    pub x: (f64, f64),
    pub p: (f64, f64),
}

impl Moments {
    /// (name, mean, stderr) rows in a fixed order.
    pub fn components(&self) -> [(&'static str, f64, f64); 8] {
        [
            ("a_re", self.a_re.0, self.a_re.1),
            ("a_im", self.a_im.0, self.a_im.1),
            ("b_re", self.b_re.0, self.b_re.1),
            ("b_im", self.b_im.0, self.b_im.1),
            ("n_cav", self.n_cav.0, self.n_cav.1),
            ("n_mech", self.n_mech.0, self.n_mech.1),
            ("x", self.x.0, self.x.1),
            ("p", self.p.0, self.p.1),
        ]
    }

    pub fn mean_observables(&self) -> Observables {
        Observables {
            a: Complex64::new(self.a_re.0, self.a_im.0),
            b: Complex64::new(self.b_re.0, self.b_im.0),
            n_cav: self.n_cav.0,
            n_mech: self.n_mech.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub times: Vec<f64>,
    pub moments: Vec<Moments>,
    pub n_traj: usize,
    pub master_seed: u64,
    pub max_leakage: f64,
}

impl EnsembleRecord {
    pub fn mean_x(&self) -> Vec<f64> {
        self.moments.iter().map(|m| m.x.0).collect()
    }
}

fn components(o: &Observables, r: &Rescaled) -> [f64; 8] {
    [o.a.re, o.a.im, o.b.re, o.b.im, o.n_cav, o.n_mech, r.x, r.p]
}

/// Averages `n_traj` trajectories from `initial`, trajectory i using stream
/// (master_seed, i). Trajectories run in parallel; reduction is in index order.
pub fn run_ensemble_from(
    ops: &ModelOperators,
    initial: &QuantumState,
    span: (f64, f64),
    spec: &QsdSpec,
    n_traj: usize,
    master_seed: u64,
) -> Result<EnsembleRecord> {
    if n_traj < 1 {
        return Err(Error::InvalidParameter {
            name: "n_traj",
            reason: "at least one trajectory is required".into(),
        });
    }
    let records: Vec<Result<TrajectoryRecord>> = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            run_trajectory_from(ops, initial, span, spec, master_seed, i).map_err(|e| Error::Trajectory {
                index: i as usize,
                source: Box::new(e),
            })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let len = records[0].times.len();
    let mut sum = vec![[0.0f64; 8]; len];
    let mut sq = vec![[0.0f64; 8]; len];
    let mut max_leakage: f64 = 0.0;
    for r in &records {
        max_leakage = max_leakage.max(r.max_leakage);
        for (k, (o, z)) in r.observables.iter().zip(&r.rescaled).enumerate() {
            for (j, v) in components(o, z).into_iter().enumerate() {
                sum[k][j] += v;
                sq[k][j] += v * v;
            }
        }
    }
    let nf = n_traj as f64;
    let moments = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let m = |j: usize| {
                let mean = s[j] / nf;
                let se = if n_traj > 1 {
                    ((q[j] / nf - mean * mean).max(0.0) * nf / (nf - 1.0) / nf).sqrt()
                } else {
                    0.0
                };
                (mean, se)
            };
            Moments {
                a_re: m(0),
                a_im: m(1),
                b_re: m(2),
                b_im: m(3),
                n_cav: m(4),
                n_mech: m(5),
                x: m(6),
                p: m(7),
            }
        })
        .collect();
    Ok(EnsembleRecord {
        times: records[0].times.clone(),
        moments,
        n_traj,
        master_seed,
        max_leakage,
    })
}

pub fn run_ensemble(
    params: &ModelParams,
    truncation: HilbertTruncation,
    span: (f64, f64),
    spec: &QsdSpec,
    n_traj: usize,
    master_seed: u64,
) -> Result<EnsembleRecord> {
    let ops = build_operators_with_budget(params, truncation, spec.dim_budget)?;
    run_ensemble_from(&ops, &QuantumState::vacuum(truncation), span, spec, n_traj, master_seed)
}

/// Result of the density-matrix integration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub times: Vec<f64>,
    pub observables: Vec<Observables>,
    /// Largest |tr rho - 1| over the recorded times.
    pub max_trace_error: f64,
    /// Smallest eigenvalue of rho over the recorded times.
    pub min_eigenvalue: f64,
}

/// Fixed-step RK4 integration of
/// d rho / d tau = -i[H, rho] + kappa D[a] rho + Gamma D[b] rho,
/// D[L] rho = L rho L^dag - {L^dag L, rho} / 2, with the cadence of `spec`.
pub fn master_equation_oracle(
    ops: &ModelOperators,
    initial: &QuantumState,
    span: (f64, f64),
    spec: &QsdSpec,
) -> Result<OracleRecord> {
    spec.check()?;
    check_span(span)?;
    let d = ops.dim();
    if d > ORACLE_MAX_DIM {
        return Err(Error::DimensionBudget {
            dim: d,
            budget: ORACLE_MAX_DIM,
        });
    }
    let (h, a, b) = ops.dense();
    let ad = a.adjoint();
    let bd = b.adjoint();
    let i = Complex64::i();
    let kappa = Complex64::new(ops.kappa, 0.0);
    let gamma = Complex64::new(ops.gamma, 0.0);
    // effective non-Hermitian generator K = -iH - (kappa a^dag a + Gamma b^dag b)/2
    let k_eff = -h.map(|z| z * i) - (&ad * &a).map(|z| z * kappa * 0.5) - (&bd * &b).map(|z| z * gamma * 0.5);
    let k_eff_d = k_eff.adjoint();
    let rhs = |rho: &DMatrix<Complex64>| -> DMatrix<Complex64> {
        &k_eff * rho + rho * &k_eff_d + (&a * rho * &ad).map(|z| z * kappa) + (&b * rho * &bd).map(|z| z * gamma)
    };
    let psi = nalgebra::DVector::from_column_slice(&initial.amplitudes);
    let mut rho = &psi * psi.adjoint();

    let dt = spec.dt();
    let n_steps = ((span.1 - span.0) / dt).round() as usize;
    let every = spec.steps_per_period / spec.samples_per_period;
    let mut rec = OracleRecord {
        times: Vec::new(),
        observables: Vec::new(),
        max_trace_error: 0.0,
        min_eigenvalue: f64::INFINITY,
    };
    let record = |rec: &mut OracleRecord, rho: &DMatrix<Complex64>, tau: f64| {
        let tr = rho.trace();
        rec.max_trace_error = rec.max_trace_error.max((tr - 1.0).norm());
        let herm = (rho + rho.adjoint()).map(|z| z * 0.5);
        let lo = herm.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
        rec.min_eigenvalue = rec.min_eigenvalue.min(lo);
        let ex = |op: &DMatrix<Complex64>| (op * rho).trace();
        rec.times.push(tau);
        rec.observables.push(Observables {
            a: ex(&a),
            b: ex(&b),
            n_cav: ex(&(&ad * &a)).re,
            n_mech: ex(&(&bd * &b)).re,
        });
    };
    record(&mut rec, &rho, span.0);
    for k in 1..=n_steps {
        let k1 = rhs(&rho);
        let k2 = rhs(&(&rho + &k1 * Complex64::new(dt / 2.0, 0.0)));
        let k3 = rhs(&(&rho + &k2 * Complex64::new(dt / 2.0, 0.0)));
        let k4 = rhs(&(&rho + &k3 * Complex64::new(dt, 0.0)));
        rho += (k1 + k2 * Complex64::new(2.0, 0.0) + k3 * Complex64::new(2.0, 0.0) + k4) * Complex64::new(dt / 6.0, 0.0);
        if k % every == 0 {
            record(&mut rec, &rho, span.0 + k as f64 * dt);
        }
    }
    Ok(rec)
}

/// Max-norm change of the rescaled x(tau) when both cutoffs are doubled,
/// for the same noise stream.
pub fn truncation_audit(
    params: &ModelParams,
    truncation: HilbertTruncation,
    span: (f64, f64),
    spec: &QsdSpec,
    master_seed: u64,
) -> Result<f64> {
    let base = run_trajectory(params, truncation, span, spec, master_seed, 0)?;
    let big = run_trajectory(params, truncation.doubled(), span, spec, master_seed, 0)?;
    Ok(base
        .rescaled
        .iter()
        .zip(&big.rescaled)
        .map(|(u, v)| (u.x - v.x).abs())
        .fold(0.0, f64::max))
}

/// <x> from a mechanical amplitude <b> and coupling g0.
pub fn position_from_b(b: Complex64, g0: f64) -> f64 {
    SQRT_2 * g0 * b.re
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ops(n_cav: usize, n_mech: usize, params: ModelParams, g0: f64, alpha_l: f64) -> ModelOperators {
        ModelOperators::with_couplings(&params, HilbertTruncation::new(n_cav, n_mech), g0, alpha_l, DEFAULT_DIM_BUDGET).unwrap()
    }

    fn random_vec(rng: &mut impl Rng, d: usize) -> Vec<Complex64> {
        (0..d).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    fn dot(u: &[Complex64], v: &[Complex64]) -> Complex64 {
        u.iter().zip(v).map(|(a, b)| a.conj() * b).sum()
    }

    #[test]
    fn ladder_elements() {
        let o = ops(3, 2, ModelParams::new(0.0, 0.0), 0.0, 0.0);
        let t = o.truncation;
        let mut out = vec![ZERO; t.dim()];
        for n in 0..3 {
            for m in 0..2 {
                o.apply_a(&QuantumState::fock(t, n, m).amplitudes, &mut out);
                for (k, v) in out.iter().enumerate() {
                    let expect = if n > 0 && k == t.index(n - 1, m) { (n as f64).sqrt() } else { 0.0 };
                    assert_eq!(*v, Complex64::new(expect, 0.0));
                }
            }
        }
    }

    #[test]
    fn a_and_b_commute() {
        let o = ops(4, 5, ModelParams::new(0.0, 0.0), 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_vec(&mut rng, o.dim());
        let (mut t, mut ab, mut ba) = (vec![ZERO; o.dim()], vec![ZERO; o.dim()], vec![ZERO; o.dim()]);
        o.apply_b(&v, &mut t);
        o.apply_a(&t, &mut ab);
        o.apply_a(&v, &mut t);
        o.apply_b(&t, &mut ba);
        for (u, v) in ab.iter().zip(&ba) {
            assert!((u - v).norm() <= 1e-15 * u.norm());
        }
    }

    #[test]
    fn hamiltonian_is_hermitian() {
        let params = ModelParams::new(-0.7, 1.5).with_sigma(0.3);
        let o = build_operators(&params, HilbertTruncation::new(6, 7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        let (mut hp, mut hq) = (vec![ZERO; o.dim()], vec![ZERO; o.dim()]);
        for _ in 0..100 {
            let p = random_vec(&mut rng, o.dim());
            let q = random_vec(&mut rng, o.dim());
            o.apply_h(&q, &mut hq);
            o.apply_h(&p, &mut hp);
            worst = worst.max((dot(&p, &hq) - dot(&q, &hp).conj()).norm());
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn energy_matches_dense_construction() {
        // H built from Kronecker products of single-mode matrices
        let params = ModelParams::new(-0.4, 1.2).with_sigma(0.25);
        let t = HilbertTruncation::new(5, 6);
        let o = build_operators(&params, t).unwrap();
        let ladder = |n: usize| DMatrix::from_fn(n, n, |i, j| if j == i + 1 { Complex64::new((j as f64).sqrt(), 0.0) } else { ZERO });
        let a1 = ladder(t.n_cav);
        let b1 = ladder(t.n_mech);
        let ic = DMatrix::<Complex64>::identity(t.n_cav, t.n_cav);
        let im = DMatrix::<Complex64>::identity(t.n_mech, t.n_mech);
        let a = a1.kronecker(&im);
        let b = ic.kronecker(&b1);
        let c = |z: f64| Complex64::new(z, 0.0);
        let na = a.adjoint() * &a;
        let x = &b + b.adjoint();
        let h = &na * c(-params.detuning) + &na * &x * c(o.g0) + b.adjoint() * &b + (&a + a.adjoint()) * c(o.alpha_l);
        // coherent-like normalized test state
        let psi: Vec<Complex64> = (0..t.dim())
            .map(|k| {
                let (n, m) = (k / t.n_mech, k % t.n_mech);
                Complex64::new(0.6f64.powi(n as i32) / (1..=n).map(|v| (v as f64).sqrt()).product::<f64>(), 0.0)
                    * Complex64::new(0.0, 0.5).powi(m as i32)
                    / (1..=m).map(|v| (v as f64).sqrt()).product::<f64>()
            })
            .collect();
        let s = QuantumState::from_amplitudes(t, psi).unwrap();
        let v = nalgebra::DVector::from_column_slice(&s.amplitudes);
        let dense = (v.adjoint() * &h * &v)[(0, 0)];
        let mut hp = vec![ZERO; t.dim()];
        o.apply_h(&s.amplitudes, &mut hp);
        let ours = dot(&s.amplitudes, &hp);
        assert!((dense - ours).norm() < 1e-12);
    }

    #[test]
    fn classical_limit_rejected() {
        let err = build_operators(&ModelParams::new(-0.7, 1.5), HilbertTruncation::new(4, 4)).unwrap_err();
        assert_eq!(err, Error::ClassicalLimit);
        let err = build_operators(&ModelParams::new(-0.7, 1.5).with_sigma(0.1), HilbertTruncation::new(1, 4)).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { .. }));
        let err = build_operators_with_budget(&ModelParams::new(-0.7, 1.5).with_sigma(0.1), HilbertTruncation::new(100, 100), 1000)
            .unwrap_err();
        assert!(matches!(err, Error::DimensionBudget { dim: 10000, budget: 1000 }));
    }

    #[test]
    fn vacuum_is_fixed_without_drive() {
        let o = ops(4, 4, ModelParams::new(-0.5, 0.0), 0.0, 0.0);
        let v = QuantumState::vacuum(o.truncation);
        let noise = [Complex64::new(0.3, -0.2), Complex64::new(-1.0, 0.5)];
        let next = qsd_step(&v, &o, 0.01, noise).unwrap();
        assert_eq!(next, v);
    }

    #[test]
    fn coherent_state_ignores_own_noise() {
        // cavity coherent state, no Hamiltonian coupling except detuning: the
        // noise term (a - <a>) psi vanishes up to truncation
        let t = HilbertTruncation::new(40, 2);
        let o = ops(40, 2, ModelParams::new(-0.5, 0.0).with_damping(1.0, 1e-3), 0.0, 0.0);
        let amp = Complex64::new(0.8, 0.3);
        let mut psi = vec![ZERO; t.dim()];
        let mut c = Complex64::new(1.0, 0.0);
        for n in 0..40 {
            if n > 0 {
                c *= amp / (n as f64).sqrt();
            }
            psi[t.index(n, 0)] = c;
        }
        let s = QuantumState::from_amplitudes(t, psi).unwrap();
        let quiet = qsd_step(&s, &o, 1e-3, [ZERO; 2]).unwrap();
        let noisy = qsd_step(&s, &o, 1e-3, [Complex64::new(0.7, 0.1), ZERO]).unwrap();
        let diff = quiet.amplitudes.iter().zip(&noisy.amplitudes).map(|(u, v)| (u - v).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn norm_is_restored() {
        let params = ModelParams::new(-0.7, 0.5).with_sigma(0.5);
        let t = HilbertTruncation::new(6, 6);
        let spec = QsdSpec { steps_per_period: 512, ..Default::default() };
        let o = build_operators(&params, t).unwrap();
        let mut s = QuantumState::vacuum(t);
        let mut st = QsdStepper::new(t.dim(), Scheme::EulerMaruyama);
        let mut rng = trajectory_rng(3, 0);
        for k in 0..200 {
            st.step(&mut s, &o, spec.dt(), wiener(&mut rng, spec.dt(), 1), k as f64 * spec.dt()).unwrap();
            assert!((s.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn deterministic_streams() {
        let params = ModelParams::new(-0.7, 0.3).with_sigma(0.5);
        let spec = QsdSpec { steps_per_period: 256, samples_per_period: 8, leak_tol: 1e-2, ..Default::default() };
        let t = HilbertTruncation::new(6, 6);
        let r1 = run_trajectory(&params, t, (0.0, TWO_PI), &spec, 11, 4).unwrap();
        let r2 = run_trajectory(&params, t, (0.0, TWO_PI), &spec, 11, 4).unwrap();
        let r3 = run_trajectory(&params, t, (0.0, TWO_PI), &spec, 11, 5).unwrap();
        assert_eq!(r1, r2);
        assert_ne!(r1.observables, r3.observables);
        assert_eq!(r1.times.len(), 9);
    }

    #[test]
    fn single_member_ensemble_is_the_trajectory() {
        let params = ModelParams::new(-0.7, 0.3).with_sigma(0.5);
        let spec = QsdSpec { steps_per_period: 256, samples_per_period: 8, leak_tol: 1e-2, ..Default::default() };
        let t = HilbertTruncation::new(5, 5);
        let r = run_trajectory(&params, t, (0.0, TWO_PI), &spec, 9, 0).unwrap();
        let e = run_ensemble(&params, t, (0.0, TWO_PI), &spec, 1, 9).unwrap();
        for (m, o) in e.moments.iter().zip(&r.observables) {
            assert_eq!(m.mean_observables(), *o);
            assert_eq!(m.a_re.1, 0.0);
        }
    }

    #[test]
    fn leakage_is_reported() {
        let params = ModelParams::new(-0.7, 1.5).with_sigma(0.1);
        let spec = QsdSpec { steps_per_period: 512, ..Default::default() };
        let err = run_trajectory(&params, HilbertTruncation::new(3, 3), (0.0, TWO_PI), &spec, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Leakage { .. }), "{err:?}");
    }

    #[test]
    fn oracle_vacuum_stays() {
        let o = ops(3, 3, ModelParams::new(-0.5, 0.0), 0.0, 0.0);
        let spec = QsdSpec { steps_per_period: 256, ..Default::default() };
        let r = master_equation_oracle(&o, &QuantumState::vacuum(o.truncation), (0.0, TWO_PI), &spec).unwrap();
        for obs in &r.observables {
            assert_eq!(obs.n_cav, 0.0);
            assert_eq!(obs.a, ZERO);
        }
    }

    #[test]
    fn oracle_single_photon_decay() {
        let o = ops(3, 2, ModelParams::new(-0.5, 0.0).with_damping(0.7, 1e-3), 0.0, 0.0);
        let spec = QsdSpec { steps_per_period: 512, samples_per_period: 16, ..Default::default() };
        let r = master_equation_oracle(&o, &QuantumState::fock(o.truncation, 1, 0), (0.0, 2.0 * TWO_PI), &spec).unwrap();
        for (t, obs) in r.times.iter().zip(&r.observables) {
            assert!((obs.n_cav - (-0.7 * t).exp()).abs() < 1e-9);
        }
        assert!(r.max_trace_error < 1e-10);
        assert!(r.min_eigenvalue > -1e-10);
    }

    #[test]
    fn oracle_budget() {
        let params = ModelParams::new(-0.5, 1.0).with_sigma(0.5);
        let o = build_operators(&params, HilbertTruncation::new(17, 16)).unwrap();
        let err = master_equation_oracle(&o, &QuantumState::vacuum(o.truncation), (0.0, 1.0), &QsdSpec::default()).unwrap_err();
        assert!(matches!(err, Error::DimensionBudget { dim: 272, .. }));
    }

    #[test]
    fn section_cadence() {
        let times: Vec<f64> = (0..100).map(|k| k as f64 * TWO_PI / 4.0).collect();
        let coords: Vec<CanonicalCoords> = (0..100).map(|k| CanonicalCoords { x: k as f64, p: 0.0 }).collect();
        let pts = stroboscopic_points(&times, &coords, 20).unwrap();
        assert_eq!(pts.len(), 5);
        assert_eq!(pts[0].x, 80.0);
        let odd: Vec<f64> = (0..100).map(|k| k as f64 * 0.3).collect();
        assert!(matches!(stroboscopic_points(&odd, &coords, 0), Err(Error::CadenceMismatch { .. })));
    }

    #[test]
    fn halved_spec_shares_path() {
        let spec = QsdSpec { steps_per_period: 128, noise_substeps: 2, ..Default::default() };
        let fine = spec.halved().unwrap();
        let mut r1 = trajectory_rng(5, 2);
        let mut r2 = trajectory_rng(5, 2);
        let coarse = wiener(&mut r1, spec.dt(), 2);
        let f1 = wiener(&mut r2, fine.dt(), 1);
        let f2 = wiener(&mut r2, fine.dt(), 1);
        assert!((coarse[0] - f1[0] - f2[0]).norm() < 1e-15);
        assert!(QsdSpec::default().halved().is_err());
    }

    #[test]
    fn truncation_heuristic() {
        let t = suggest_truncation(0.0, 3.0);
        assert_eq!(t.n_cav, 7);
        assert_eq!(t.n_mech, 37);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rk4_and_euler_drift_agree_to_first_order(seed in 0u64..1000) {
            let params = ModelParams::new(-0.6, 0.4).with_sigma(0.4);
            let t = HilbertTruncation::new(5, 5);
            let o = build_operators(&params, t).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = QuantumState::from_amplitudes(t, random_vec(&mut rng, t.dim())).unwrap();
            let dt = 1e-5;
            let mut a = s.clone();
            let mut b = s.clone();
            QsdStepper::new(t.dim(), Scheme::EulerMaruyama).step(&mut a, &o, dt, [ZERO; 2], 0.0).unwrap();
            QsdStepper::new(t.dim(), Scheme::Rk4Drift).step(&mut b, &o, dt, [ZERO; 2], 0.0).unwrap();
            let diff = a.amplitudes.iter().zip(&b.amplitudes).map(|(u, v)| (u - v).norm()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-8);
        }
    }
}
