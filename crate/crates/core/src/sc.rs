//! Semi-classical equations of motion for the rescaled amplitudes (alpha, beta).
//!
//! Internally the state is the real 4-vector `[Re alpha, Im alpha, Re beta, Im beta]`;
//! the vector field depends on alpha* and beta* and is not complex-analytic.

use nalgebra::Matrix4;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{CanonicalCoords, ModelParams, ScState};
use crate::ode::{Dopri5, Tolerances};

pub const TWO_PI: f64 = 2.0 * PI;

/// Default transient: 200 mechanical periods.
pub const DEFAULT_TRANSIENT: f64 = 400.0 * PI;

/// Default samples per mechanical period for uniform resampling.
pub const DEFAULT_SAMPLES_PER_PERIOD: usize = 128;

/// Time derivative (d alpha / d tau, d beta / d tau).
pub fn sc_rhs(state: &ScState, params: &ModelParams) -> ScState {
    let i = Complex64::i();
    let ScState { alpha, beta } = *state;
    let dalpha = i * (params.detuning * alpha - (beta + beta.conj()) * alpha - 0.5)
        - 0.5 * params.kappa * alpha;
    let dbeta = -i * (0.5 * params.pump * alpha.norm_sqr() + beta) - 0.5 * params.gamma * beta;
    ScState::new(dalpha, dbeta)
}

/// Real-form vector field, identical to [`sc_rhs`].
#[inline]
pub fn sc_rhs_real(y: &[f64], params: &ModelParams, dy: &mut [f64]) {
    let (ar, ai, br, bi) = (y[0], y[1], y[2], y[3]);
    let w = params.detuning - 2.0 * br;
    let hk = 0.5 * params.kappa;
    let hg = 0.5 * params.gamma;
    dy[0] = -w * ai - hk * ar;
    dy[1] = w * ar - 0.5 - hk * ai;
    dy[2] = bi - hg * br;
    dy[3] = -0.5 * params.pump * (ar * ar + ai * ai) - br - hg * bi;
}

/// 4x4 real Jacobian of the vector field at `state`.
pub fn sc_jacobian(state: &ScState, params: &ModelParams) -> Matrix4<f64> {
    let [ar, ai, br, _] = state.to_real();
    let w = params.detuning - 2.0 * br;
    let hk = 0.5 * params.kappa;
    let hg = 0.5 * params.gamma;
    let p = params.pump;
    Matrix4::new(
        -hk, -w, 2.0 * ai, 0.0, //
        w, -hk, -2.0 * ar, 0.0, //
        0.0, 0.0, -hg, 1.0, //
        -p * ar, -p * ai, -1.0, -hg,
    )
}

/// Perturbation of `[Re alpha, Im alpha, Re beta, Im beta]`.
pub type TangentState = [f64; 4];

/// Jacobian-vector product J(state) * delta, without forming J.
#[inline]
pub fn sc_jacobian_apply_real(y: &[f64], d: &[f64], params: &ModelParams, out: &mut [f64]) {
    let (ar, ai, br) = (y[0], y[1], y[2]);
    let w = params.detuning - 2.0 * br;
    let hk = 0.5 * params.kappa;
    let hg = 0.5 * params.gamma;
    out[0] = -hk * d[0] - w * d[1] + 2.0 * ai * d[2];
    out[1] = w * d[0] - hk * d[1] - 2.0 * ar * d[2];
    out[2] = -hg * d[2] + d[3];
    out[3] = -params.pump * (ar * d[0] + ai * d[1]) - d[2] - hg * d[3];
}

pub fn sc_jacobian_apply(state: &ScState, delta: &TangentState, params: &ModelParams) -> TangentState {
    let mut out = [0.0; 4];
    sc_jacobian_apply_real(&state.to_real(), delta, params, &mut out);
    out
}

/// Output sampling of [`integrate_sc`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Dense output resampled on `tau0 + k * step`.
    Uniform { step: f64 },
    /// Every accepted integrator step.
    Adaptive,
}

impl Sampling {
    pub fn per_period(samples: usize) -> Self {
        Sampling::Uniform {
            step: TWO_PI / samples as f64,
        }
    }
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::per_period(DEFAULT_SAMPLES_PER_PERIOD)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<ScState>,
    pub params: ModelParams,
    /// Samples with `tau < transient_cutoff` are transient.
    pub transient_cutoff: f64,
}

impl ScTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> Option<ScState> {
        self.states.last().copied()
    }

    /// Index of the first post-transient sample.
    pub fn transient_end(&self) -> usize {
        self.times.partition_point(|&t| t < self.transient_cutoff)
    }

    /// Post-transient part as a new trajectory.
    pub fn post_transient(&self) -> ScTrajectory {
        let k = self.transient_end();
        ScTrajectory {
            times: self.times[k..].to_vec(),
            states: self.states[k..].to_vec(),
            params: self.params,
            transient_cutoff: self.transient_cutoff,
        }
    }

    pub fn positions(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.coords().x).collect()
    }

    pub fn coords(&self) -> Vec<CanonicalCoords> {
        self.states.iter().map(|s| s.coords()).collect()
    }

    pub fn alphas(&self) -> Vec<Complex64> {
        self.states.iter().map(|s| s.alpha).collect()
    }

    /// Sampling step if the grid is uniform to within `1e-9` relative.
    pub fn uniform_step(&self) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        let n = self.times.len() - 1;
        let step = (self.times[n] - self.times[0]) / n as f64;
        let uniform = self
            .times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-9 * step.max(1.0));
        uniform.then_some(step)
    }
}

/// Adaptive integrator for the semi-classical system.
pub fn sc_integrator(
    initial: ScState,
    params: ModelParams,
    tau0: f64,
    tol: Tolerances,
) -> Dopri5<impl FnMut(f64, &[f64; 4], &mut [f64; 4]), 4> {
    let rhs = move |_t: f64, y: &[f64; 4], dy: &mut [f64; 4]| sc_rhs_real(y, &params, dy);
    Dopri5::new(rhs, tau0, initial.to_real(), tol)
}

fn check_span(span: (f64, f64)) -> Result<()> {
    if !(span.1 > span.0) || !span.0.is_finite() || !span.1.is_finite() {
        return Err(Error::InvalidParameter {
            name: "span",
            reason: format!("need tau1 > tau0, got {:?}", span),
        });
    }
    Ok(())
}

/// Integrates from `initial` over `span`. The transient cutoff is set to
/// `span.0 + DEFAULT_TRANSIENT`; use [`integrate_sc_with`] to override it.
pub fn integrate_sc(
    initial: ScState,
    params: &ModelParams,
    span: (f64, f64),
    sampling: Sampling,
) -> Result<ScTrajectory> {
    integrate_sc_with(
        initial,
        params,
        span,
        sampling,
        Tolerances::default(),
        span.0 + DEFAULT_TRANSIENT,
    )
}

pub fn integrate_sc_with(
    initial: ScState,
    params: &ModelParams,
    span: (f64, f64),
    sampling: Sampling,
    tol: Tolerances,
    transient_cutoff: f64,
) -> Result<ScTrajectory> {
    let params = params.validate()?;
    check_span(span)?;
    if !initial.is_finite() {
        return Err(Error::Divergence { tau: span.0 });
    }
    let mut ode = sc_integrator(initial, params, span.0, tol);
    let (times, states) = match sampling {
        Sampling::Uniform { step } => {
            if !(step > 0.0) {
                return Err(Error::InvalidParameter {
                    name: "sampling.step",
                    reason: format!("{step} must be positive"),
                });
            }
            let (times, ys) = ode.sample_uniform(span.1, span.0, step, true)?;
            (times, ys.iter().map(|y| ScState::from_real(y)).collect())
        }
        Sampling::Adaptive => {
            let mut times = vec![span.0];
            let mut states = vec![initial];
            ode.advance_to(span.1, |dense| {
                let t = dense.t_new().min(span.1);
                times.push(t);
                states.push(ScState::from_real(&dense.eval(t)));
            })?;
            (times, states)
        }
    };
    if let Some(k) = states.iter().position(|s| !s.is_finite()) {
        return Err(Error::Divergence { tau: times[k] });
    }
    Ok(ScTrajectory {
        times,
        states,
        params,
        transient_cutoff,
    })
}

/// Final state after integrating over `span`.
pub fn evolve(initial: ScState, params: &ModelParams, span: (f64, f64), tol: Tolerances) -> Result<ScState> {
    check_span(span)?;
    let mut ode = sc_integrator(initial, *params, span.0, tol);
    ode.advance_to(span.1, |_| {})?;
    let s = ScState::from_real(ode.state());
    if !s.is_finite() {
        return Err(Error::Divergence { tau: span.1 });
    }
    Ok(s)
}

/// A stationary solution with its linear stability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub state: ScState,
    pub photon_number: f64,
    pub stable: bool,
    /// Largest real part of the Jacobian spectrum.
    pub max_growth: f64,
}

/// Stationary amplitudes for a given photon number n = |alpha|^2.
pub fn stationary_state(n: f64, params: &ModelParams) -> ScState {
    let i = Complex64::i();
    let beta = -i * (0.5 * params.pump * n) / (i + 0.5 * params.gamma);
    let delta_eff = params.detuning - 2.0 * beta.re;
    let alpha = (0.5 * i) / (i * delta_eff - 0.5 * params.kappa);
    ScState::new(alpha, beta)
}

/// Coefficients `[c3, c2, c1, c0]` of the stationary cubic in n = |alpha|^2:
/// n ((Delta + c n)^2 + kappa^2/4) - 1/4 with c = P / (1 + Gamma^2/4).
pub fn stationary_cubic(params: &ModelParams) -> [f64; 4] {
    let c = params.pump / (1.0 + 0.25 * params.gamma * params.gamma);
    let d = params.detuning;
    [
        c * c,
        2.0 * d * c,
        d * d + 0.25 * params.kappa * params.kappa,
        -0.25,
    ]
}

fn poly(coef: &[f64; 4], n: f64) -> f64 {
    ((coef[0] * n + coef[1]) * n + coef[2]) * n + coef[3]
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi.abs().max(1e-300) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Roots of the stationary photon-number cubic, ascending.
pub fn stationary_photon_numbers(params: &ModelParams) -> Vec<f64> {
    let coef = stationary_cubic(params);
    // every root lies in (0, 1/kappa^2]
    let upper = 1.0 / (params.kappa * params.kappa);
    let f = |n: f64| poly(&coef, n);
    let mut breaks = vec![0.0];
    if coef[0] > 0.0 {
        // critical points of the cubic
        let (a, b, c) = (3.0 * coef[0], 2.0 * coef[1], coef[2]);
        let disc = b * b - 4.0 * a * c;
        if disc > 0.0 {
            let sq = disc.sqrt();
            let mut crit = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)];
            crit.sort_by(f64::total_cmp);
            breaks.extend(crit.into_iter().filter(|&x| x > 0.0 && x < upper));
        }
    }
    breaks.push(upper);
    let mut roots: Vec<f64> = Vec::new();
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let (flo, fhi) = (f(lo), f(hi));
        if flo == 0.0 && lo > 0.0 {
            roots.push(lo);
        } else if (flo < 0.0) != (fhi < 0.0) || fhi == 0.0 {
            roots.push(if fhi == 0.0 { hi } else { bisect(f, lo, hi) });
        }
    }
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * b.abs().max(1.0));
    roots
}

pub fn fixed_points(params: &ModelParams) -> Result<Vec<FixedPoint>> {
    let params = params.validate()?;
    Ok(stationary_photon_numbers(&params)
        .into_iter()
        .map(|n| {
            let state = stationary_state(n, &params);
            let max_growth = sc_jacobian(&state, &params)
                .complex_eigenvalues()
                .iter()
                .map(|z| z.re)
                .fold(f64::NEG_INFINITY, f64::max);
            FixedPoint {
                state,
                photon_number: n,
                stable: max_growth < 0.0,
                max_growth,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn rhs_drive_only() {
        let d = sc_rhs(&ScState::ORIGIN, &ModelParams::new(0.0, 0.0));
        assert_eq!(d.alpha, c(0.0, -0.5));
        assert_eq!(d.beta, c(0.0, 0.0));
    }

    #[test]
    fn rhs_undriven_fixed_point() {
        let d = sc_rhs(&ScState::new(c(0.0, -1.0), c(0.0, 0.0)), &ModelParams::new(0.0, 0.0));
        assert!(d.alpha.norm() < 1e-15 && d.beta.norm() < 1e-15);
    }

    #[test]
    fn rhs_reference_value() {
        // exact rational evaluation by hand:
        // dalpha = i[(-0.7)(0.3+0.1i) - 0*(...) - 0.5] - 0.5(0.3+0.1i)
        //        = i[-0.21 - 0.07i - 0.5] - 0.15 - 0.05i = 0.07 - 0.71i - 0.15 - 0.05i
        // dbeta  = -i[0.75 * 0.1 + (-0.2i)] - 0.0005 * (-0.2i) = -0.075i - 0.2 + 0.0001i
        let s = ScState::new(c(0.3, 0.1), c(0.0, -0.2));
        let d = sc_rhs(&s, &ModelParams::new(-0.7, 1.5));
        assert_relative_eq!(d.alpha.re, -0.08, epsilon = 1e-15);
        assert_relative_eq!(d.alpha.im, -0.76, epsilon = 1e-15);
        assert_relative_eq!(d.beta.re, -0.2, epsilon = 1e-15);
        assert_relative_eq!(d.beta.im, -0.0749, epsilon = 1e-15);
        let mut dy = [0.0; 4];
        sc_rhs_real(&s.to_real(), &ModelParams::new(-0.7, 1.5), &mut dy);
        assert_eq!(ScState::from_real(&dy), d);
    }

    #[test]
    fn jacobian_zero_delta() {
        let s = ScState::new(c(0.3, -0.4), c(0.1, 0.2));
        assert_eq!(sc_jacobian_apply(&s, &[0.0; 4], &ModelParams::new(-0.7, 1.5)), [0.0; 4]);
    }

    #[test]
    fn jacobian_spectrum_at_undriven_fixed_point() {
        let params = ModelParams::new(0.3, 0.0);
        let fps = fixed_points(&params).unwrap();
        assert_eq!(fps.len(), 1);
        let mut re: Vec<f64> = sc_jacobian(&fps[0].state, &params)
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .collect();
        re.sort_by(f64::total_cmp);
        assert_relative_eq!(re[0], -0.5, epsilon = 1e-12);
        assert_relative_eq!(re[3], -5e-4, epsilon = 1e-12);
        assert_relative_eq!(fps[0].max_growth, -5e-4, epsilon = 1e-12);
    }

    #[test]
    fn fixed_point_examples() {
        let fp = fixed_points(&ModelParams::new(0.0, 0.0)).unwrap();
        assert_eq!(fp.len(), 1);
        assert_relative_eq!(fp[0].photon_number, 1.0, epsilon = 1e-14);
        assert!((fp[0].state.alpha - c(0.0, -1.0)).norm() < 1e-14);
        assert!(fp[0].stable);

        let fp = fixed_points(&ModelParams::new(1.0, 0.0)).unwrap();
        assert_eq!(fp.len(), 1);
        assert_relative_eq!(fp[0].photon_number, 0.2, epsilon = 1e-14);
    }

    #[test]
    fn fixed_points_solve_the_vector_field() {
        for &(d, p) in &[(-0.7, 1.5), (-2.0, 1.5), (-1.5, 1.0), (0.5, 3.0)] {
            let params = ModelParams::new(d, p);
            for fp in fixed_points(&params).unwrap() {
                let r = sc_rhs(&fp.state, &params);
                assert!(r.alpha.norm() + r.beta.norm() < 1e-12, "{d} {p}");
            }
        }
    }

    #[test]
    fn bistable_region_has_three_roots() {
        // far red detuning with strong pump gives the optical-bistability S-curve
        let roots = stationary_photon_numbers(&ModelParams::new(-2.0, 4.0));
        assert_eq!(roots.len(), 3, "{roots:?}");
    }

    #[test]
    fn multistart_newton_finds_no_extra_roots() {
        use rand::{Rng, SeedableRng};
        let params = ModelParams::new(-0.7, 1.5);
        let known: Vec<ScState> = fixed_points(&params).unwrap().iter().map(|f| f.state).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut y: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
            let mut converged = false;
            for _ in 0..100 {
                let mut f = [0.0; 4];
                sc_rhs_real(&y, &params, &mut f);
                let res = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                if res < 1e-13 {
                    converged = true;
                    break;
                }
                let j = sc_jacobian(&ScState::from_real(&y), &params);
                let Some(step) = j.lu().solve(&nalgebra::Vector4::from(f)) else { break };
                for i in 0..4 {
                    y[i] -= step[i];
                }
            }
            if converged {
                let s = ScState::from_real(&y);
                assert!(
                    known.iter().any(|k| (k.alpha - s.alpha).norm() + (k.beta - s.beta).norm() < 1e-8),
                    "unlisted root {s:?}"
                );
            }
        }
    }

    #[test]
    fn undriven_relaxes_to_fixed_point() {
        let params = ModelParams::new(0.0, 0.0);
        let s = evolve(ScState::ORIGIN, &params, (0.0, 1e4), Tolerances::default()).unwrap();
        assert!((s.alpha.norm_sqr() - 1.0).abs() < 1e-8);
        let r = sc_rhs(&s, &params);
        assert!(r.alpha.norm() + r.beta.norm() < 1e-8);
    }

    #[test]
    fn undriven_mechanics_decays_at_gamma_over_two() {
        let params = ModelParams::new(0.0, 0.0);
        let start = ScState::new(c(0.0, -1.0), c(0.8, -0.3));
        let gamma = params.gamma;
        let traj = integrate_sc(start, &params, (0.0, 10.0 * 2.0 / gamma), Sampling::per_period(8)).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states).step_by(500) {
            let expected = start.beta.norm() * (-0.5 * gamma * t).exp();
            assert!((s.beta.norm() - expected).abs() <= 0.01 * expected, "t = {t}");
        }
    }

    #[test]
    fn time_translation_invariance() {
        let params = ModelParams::new(-0.8, 1.3);
        let t = 50.0;
        let whole = evolve(ScState::ORIGIN, &params, (0.0, 2.0 * t), Tolerances::default()).unwrap();
        let half = evolve(ScState::ORIGIN, &params, (0.0, t), Tolerances::default()).unwrap();
        let split = evolve(half, &params, (t, 2.0 * t), Tolerances::default()).unwrap();
        assert!((whole.alpha - split.alpha).norm() + (whole.beta - split.beta).norm() < 1e-7);
    }

    #[test]
    fn tolerance_refinement_converges() {
        let params = ModelParams::new(-0.6, 1.3);
        let run = |rtol: f64| evolve(ScState::ORIGIN, &params, (0.0, 60.0), Tolerances::new(rtol, rtol * 1e-3)).unwrap();
        let reference = run(1e-13);
        let err = |s: ScState| (s.alpha - reference.alpha).norm() + (s.beta - reference.beta).norm();
        let (e6, e8, e10) = (err(run(1e-6)), err(run(1e-8)), err(run(1e-10)));
        assert!(e8 < e6 / 10.0 && e10 < e8 / 10.0, "{e6:e} {e8:e} {e10:e}");
    }

    #[test]
    fn uniform_sampling_is_uniform() {
        let traj = integrate_sc(ScState::ORIGIN, &ModelParams::new(-0.4, 1.5), (0.0, 20.0 * TWO_PI), Sampling::default()).unwrap();
        assert_eq!(traj.len(), 20 * 128 + 1);
        let step = traj.uniform_step().unwrap();
        assert_relative_eq!(step, TWO_PI / 128.0, epsilon = 1e-12);
    }

    #[test]
    fn bad_span_is_rejected() {
        assert!(integrate_sc(ScState::ORIGIN, &ModelParams::new(0.0, 0.0), (1.0, 1.0), Sampling::Adaptive).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn jacobian_matches_central_differences(
            y in proptest::array::uniform4(-2.0f64..2.0),
            d in proptest::array::uniform4(-1.0f64..1.0),
            detuning in -2.0f64..1.0,
            pump in 0.0f64..2.0,
        ) {
            let params = ModelParams::new(detuning, pump);
            let state = ScState::from_real(&y);
            let jd = sc_jacobian_apply(&state, &d, &params);
            let eps = 1e-6;
            let plus: [f64; 4] = std::array::from_fn(|i| y[i] + eps * d[i]);
            let minus: [f64; 4] = std::array::from_fn(|i| y[i] - eps * d[i]);
            let (mut fp, mut fm) = ([0.0; 4], [0.0; 4]);
            sc_rhs_real(&plus, &params, &mut fp);
            sc_rhs_real(&minus, &params, &mut fm);
            let fd: Vec<f64> = (0..4).map(|i| (fp[i] - fm[i]) / (2.0 * eps)).collect();
            let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            let err = (0..4).map(|i| (jd[i] - fd[i]).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err / norm < 1e-6, "err {err:e}");
            let dense = sc_jacobian(&state, &params) * nalgebra::Vector4::from(d);
            for i in 0..4 {
                prop_assert!((dense[i] - jd[i]).abs() < 1e-13);
            }
        }
    }
}
