//! Sinusoidal-ansatz amplitudes of self-induced oscillations.
//!
//! The cantilever is prescribed as x(tau) = xbar + A cos(tau). The cavity then
//! obeys a linear ODE with periodic coefficients whose periodic solution is a
//! Fourier series with Bessel-function coefficients. Feeding |alpha|^2 back
//! into the cantilever equation gives two self-consistency residuals.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ScState};
use crate::ode::Tolerances;
use crate::sc::{integrate_sc_with, Sampling, TWO_PI};

/// Tail ratio required of an accepted Fourier response.
pub const TAIL_TOL: f64 = 1e-12;
/// Largest truncation tried by the automatic growth.
pub const MAX_TRUNCATION: usize = 2048;

/// J_0(z) ..= J_kmax(z) by Miller's backward recurrence.
pub fn bessel_j_table(kmax: usize, z: f64) -> Vec<f64> {
    let mut out = vec![0.0; kmax + 1];
    if z == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let az = z.abs();
    let top = kmax.max(az.ceil() as usize);
    let mut start = top + 20 + (160.0 * top as f64).sqrt() as usize;
    start += start % 2;
    let (mut jp, mut j) = (0.0f64, 1e-300f64);
    let mut norm = 0.0;
    for k in (1..=start).rev() {
        let jm = 2.0 * k as f64 / az * j - jp;
        jp = j;
        j = jm;
        if k - 1 <= kmax {
            out[k - 1] = j;
        }
        if (k - 1) % 2 == 0 && k > 1 {
            norm += 2.0 * j;
        }
        if j.abs() > 1e250 {
            j *= 1e-250;
            jp *= 1e-250;
            norm *= 1e-250;
            for v in out.iter_mut() {
                *v *= 1e-250;
            }
        }
    }
    norm += j;
    for v in out.iter_mut() {
        *v /= norm;
    }
    if z < 0.0 {
        for (k, v) in out.iter_mut().enumerate() {
            if k % 2 == 1 {
                *v = -*v;
            }
        }
    }
    out
}

/// J_n for any integer n from a nonnegative-order table.
fn bessel_signed(table: &[f64], n: i64) -> f64 {
    let k = n.unsigned_abs() as usize;
    let v = table.get(k).copied().unwrap_or(0.0);
    if n < 0 && k % 2 == 1 {
        -v
    } else {
        v
    }
}

/// Periodic cavity response alpha(tau) = sum_n alpha_n e^{i n tau}, n in [-N, N].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierResponse {
    pub coefficients: Vec<Complex64>,
    pub truncation: usize,
}

impl FourierResponse {
    pub fn coefficient(&self, n: i64) -> Complex64 {
        let idx = n + self.truncation as i64;
        if idx < 0 || idx as usize >= self.coefficients.len() {
            Complex64::new(0.0, 0.0)
        } else {
            self.coefficients[idx as usize]
        }
    }

    pub fn eval(&self, tau: f64) -> Complex64 {
        let n0 = -(self.truncation as i64);
        self.coefficients
            .iter()
            .enumerate()
            .map(|(k, c)| c * Complex64::new(0.0, (n0 + k as i64) as f64 * tau).exp())
            .sum()
    }

    /// Fourier coefficient k of |alpha(tau)|^2.
    pub fn intensity_harmonic(&self, k: i64) -> Complex64 {
        let n = self.truncation as i64;
        (-n..=n).map(|m| self.coefficient(m + k) * self.coefficient(m).conj()).sum()
    }

    /// Time average of |alpha|^2.
    pub fn mean_intensity(&self) -> f64 {
        self.coefficients.iter().map(|c| c.norm_sqr()).sum()
    }

    /// |alpha_N| / max_n |alpha_n| over both ends.
    pub fn tail_ratio(&self) -> f64 {
        let max = self.coefficients.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if max == 0.0 {
            return 0.0;
        }
        let ends = self.coefficients[0].norm().max(self.coefficients[self.coefficients.len() - 1].norm());
        ends / max
    }
}

fn effective_detuning(xbar: f64, params: &ModelParams) -> f64 {
    params.detuning - SQRT_2 * xbar
}

fn check_inputs(amplitude: f64, truncation: usize) -> Result<()> {
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::InvalidParameter {
            name: "amplitude",
            reason: format!("{amplitude} must be finite and non-negative"),
        });
    }
    if truncation < 1 {
        return Err(Error::InvalidParameter {
            name: "truncation",
            reason: "must be at least 1".into(),
        });
    }
    Ok(())
}

fn accept(resp: FourierResponse) -> Result<FourierResponse> {
    let tail = resp.tail_ratio();
    if tail < TAIL_TOL || resp.truncation == 0 {
        Ok(resp)
    } else {
        Err(Error::Truncation {
            truncation: resp.truncation,
            tail,
        })
    }
}

/// Closed-form (Jacobi-Anger) response for x(tau) = xbar + A cos tau.
///
/// With z = sqrt(2) A and Delta' = Delta - sqrt(2) xbar,
/// alpha_n = sum_m J_{m-n}(z) u_m, u_m = -(i/2) J_m(z) / (i (m - Delta') + kappa/2).
pub fn cavity_fourier_response(
    xbar: f64,
    amplitude: f64,
    params: &ModelParams,
    truncation: usize,
) -> Result<FourierResponse> {
    check_inputs(amplitude, truncation)?;
    accept(closed_form(xbar, amplitude, params, truncation))
}

fn closed_form(xbar: f64, amplitude: f64, params: &ModelParams, truncation: usize) -> FourierResponse {
    let z = SQRT_2 * amplitude;
    let dp = effective_detuning(xbar, params);
    let n = truncation as i64;
    let reach = if z == 0.0 { 0 } else { (z.ceil() as i64) + 30 };
    let m_max = n + reach;
    let table = bessel_j_table((m_max + n) as usize, z);
    let u: Vec<Complex64> = (-m_max..=m_max)
        .map(|m| {
            let den = Complex64::new(params.kappa / 2.0, m as f64 - dp);
            Complex64::new(0.0, -0.5) * bessel_signed(&table, m) / den
        })
        .collect();
    let coefficients = (-n..=n)
        .map(|k| {
            (-m_max..=m_max)
                .zip(&u)
                .map(|(m, um)| um * bessel_signed(&table, m - k))
                .sum()
        })
        .collect();
    FourierResponse {
        coefficients,
        truncation,
    }
}

/// Same response from the tridiagonal Fourier-space system
/// [i(n - Delta') + kappa/2] alpha_n + i (z/2)(alpha_{n-1} + alpha_{n+1}) = -(i/2) delta_{n0},
/// solved with alpha_{+-(N+1)} = 0.
pub fn cavity_fourier_response_recurrence(
    xbar: f64,
    amplitude: f64,
    params: &ModelParams,
    truncation: usize,
) -> Result<FourierResponse> {
    check_inputs(amplitude, truncation)?;
    let z = SQRT_2 * amplitude;
    let dp = effective_detuning(xbar, params);
    let n = truncation as i64;
    let off = Complex64::new(0.0, z / 2.0);
    let size = (2 * n + 1) as usize;
    let diag: Vec<Complex64> = (-n..=n)
        .map(|k| Complex64::new(params.kappa / 2.0, k as f64 - dp))
        .collect();
    let mut rhs = vec![Complex64::new(0.0, 0.0); size];
    rhs[n as usize] = Complex64::new(0.0, -0.5);

    // Thomas elimination
    let mut c_prime = vec![Complex64::new(0.0, 0.0); size];
    let mut d_prime = vec![Complex64::new(0.0, 0.0); size];
    c_prime[0] = off / diag[0];
    d_prime[0] = rhs[0] / diag[0];
    for i in 1..size {
        let m = diag[i] - off * c_prime[i - 1];
        c_prime[i] = off / m;
        d_prime[i] = (rhs[i] - off * d_prime[i - 1]) / m;
    }
    let mut x = vec![Complex64::new(0.0, 0.0); size];
    x[size - 1] = d_prime[size - 1];
    for i in (0..size - 1).rev() {
        x[i] = d_prime[i] - c_prime[i] * x[i + 1];
    }
    accept(FourierResponse {
        coefficients: x,
        truncation,
    })
}

/// Initial truncation ceil(4 + 3 sqrt(2) A).
pub fn initial_truncation(amplitude: f64) -> usize {
    (4.0 + 3.0 * SQRT_2 * amplitude).ceil() as usize
}

/// Closed-form response with N grown from [`initial_truncation`] until the
/// tail ratio is below [`TAIL_TOL`].
pub fn fourier_response_auto(xbar: f64, amplitude: f64, params: &ModelParams) -> Result<FourierResponse> {
    check_inputs(amplitude, 1)?;
    let mut n = initial_truncation(amplitude);
    loop {
        let resp = closed_form(xbar, amplitude, params, n);
        let tail = resp.tail_ratio();
        if tail < TAIL_TOL {
            return Ok(resp);
        }
        if n >= MAX_TRUNCATION {
            return Err(Error::Truncation { truncation: n, tail });
        }
        n = (n + n / 2 + 2).min(MAX_TRUNCATION);
    }
}

/// Fourier components beta_k (k = -1, 0, 1) of the periodic cantilever
/// response to the intensity of `resp`.
fn beta_harmonics(resp: &FourierResponse, params: &ModelParams) -> [Complex64; 3] {
    let f0 = params.pump / 2.0 * resp.intensity_harmonic(0);
    let f1 = params.pump / 2.0 * resp.intensity_harmonic(1);
    let fm1 = f1.conj();
    let i = Complex64::i();
    let beta = |f: Complex64, k: f64| -i * f / Complex64::new(params.gamma / 2.0, k + 1.0);
    [beta(fm1, -1.0), beta(f0, 0.0), beta(f1, 1.0)]
}

/// Self-consistency residuals (r_dc, r_harm) of the candidate (xbar, A).
///
/// r_dc is the DC part of the induced x(tau) minus xbar. r_harm is the cos(tau)
/// coefficient of the induced x(tau) minus A; the sin(tau) quadrature, which
/// fixes the frequency shift of the orbit, is not part of the balance.
pub fn ansatz_residuals(candidate: (f64, f64), params: &ModelParams) -> Result<(f64, f64)> {
    let (xbar, amplitude) = candidate;
    let resp = fourier_response_auto(xbar, amplitude, params)?;
    Ok(residuals_from(&resp, candidate, params))
}

fn residuals_from(resp: &FourierResponse, (xbar, amplitude): (f64, f64), params: &ModelParams) -> (f64, f64) {
    let [bm1, b0, b1] = beta_harmonics(resp, params);
    let x0 = SQRT_2 * b0.re;
    let x1 = (b1 + bm1.conj()) / SQRT_2;
    (x0 - xbar, 2.0 * x1.re - amplitude)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnsatzSolution {
    pub xbar: f64,
    pub amplitude: f64,
    pub residual: f64,
    pub branch_id: usize,
}

impl AnsatzSolution {
    /// State on the ansatz orbit at tau = 0 (x maximal, p = 0).
    pub fn initial_state(&self, params: &ModelParams) -> Result<ScState> {
        let resp = fourier_response_auto(self.xbar, self.amplitude, params)?;
        let [_, b0, _] = beta_harmonics(&resp, params);
        Ok(ScState::new(
            resp.eval(0.0),
            Complex64::new(self.xbar / SQRT_2, b0.im) + self.amplitude / SQRT_2,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnsatzSpec {
    pub xbar_points: usize,
    pub amp_points: usize,
    pub amp_max: f64,
    /// Accepted residual norm.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AnsatzSpec {
    fn default() -> Self {
        Self {
            xbar_points: 48,
            amp_points: 48,
            amp_max: 3.0,
            tol: 1e-10,
            max_iter: 60,
        }
    }
}

/// Solutions at one detuning, or the reason the point failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsatzPoint {
    pub detuning: f64,
    pub solutions: std::result::Result<Vec<AnsatzSolution>, String>,
}

/// Lower edge of the xbar search interval: |alpha|^2 <= 1/kappa^2 bounds the DC force.
fn xbar_floor(params: &ModelParams) -> f64 {
    -SQRT_2 * params.pump / (2.0 * params.kappa * params.kappa) * 1.01 - 1e-9
}

/// Roots of r_dc(xbar, 0) (the stationary states).
fn static_branch(params: &ModelParams, spec: &AnsatzSpec) -> Result<Vec<f64>> {
    let lo = xbar_floor(params);
    let f = |x: f64| ansatz_residuals((x, 0.0), params).map(|r| r.0);
    let n = 4 * spec.xbar_points;
    let grid: Vec<f64> = (0..=n).map(|k| lo + (0.0 - lo) * k as f64 / n as f64 + 1e-12).collect();
    let vals = grid.iter().map(|&x| f(x)).collect::<Result<Vec<_>>>()?;
    let mut roots = Vec::new();
    for k in 0..n {
        let (mut a, mut b, fa) = (grid[k], grid[k + 1], vals[k]);
        if fa == 0.0 {
            roots.push(a);
            continue;
        }
        if fa.signum() == vals[k + 1].signum() {
            continue;
        }
        let mut fa = fa;
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            let fm = f(m)?;
            if fm.signum() == fa.signum() {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
            if b - a < 1e-15 * (1.0 + a.abs()) {
                break;
            }
        }
        roots.push(0.5 * (a + b));
    }
    Ok(roots)
}

/// Scaled residual (r_dc, r_harm / A), whose A > 0 roots are the oscillating branches.
fn scaled(v: (f64, f64), params: &ModelParams) -> Result<[f64; 2]> {
    let (r0, r1) = ansatz_residuals(v, params)?;
    Ok([r0, r1 / v.1])
}

/// Damped Newton on the scaled residual from `start`; `None` if it fails to converge
/// or drifts to A <= 0.
fn newton(start: (f64, f64), params: &ModelParams, spec: &AnsatzSpec) -> Result<Option<AnsatzSolution>> {
    let (mut x, mut a) = start;
    let norm = |r: [f64; 2]| r[0].hypot(r[1]);
    let mut r = scaled((x, a), params)?;
    for _ in 0..spec.max_iter {
        let (r_dc, r_h) = ansatz_residuals((x, a), params)?;
        if r_dc.hypot(r_h) < spec.tol {
            return Ok(Some(AnsatzSolution {
                xbar: x,
                amplitude: a,
                residual: r_dc.hypot(r_h),
                branch_id: 0,
            }));
        }
        let hx = 1e-7 * (1.0 + x.abs());
        let ha = 1e-7 * (1.0 + a);
        let rx = scaled((x + hx, a), params)?;
        let ra = scaled((x, a + ha), params)?;
        let j = [
            [(rx[0] - r[0]) / hx, (ra[0] - r[0]) / ha],
            [(rx[1] - r[1]) / hx, (ra[1] - r[1]) / ha],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            return Ok(None);
        }
        let dx = -(j[1][1] * r[0] - j[0][1] * r[1]) / det;
        let da = -(-j[1][0] * r[0] + j[0][0] * r[1]) / det;
        let mut lambda = 1.0;
        loop {
            let (xn, an) = (x + lambda * dx, a + lambda * da);
            if an > 0.0 {
                let rn = scaled((xn, an), params)?;
                if norm(rn) < norm(r) * (1.0 - 1e-4 * lambda) || lambda < 1e-3 {
                    x = xn;
                    a = an;
                    r = rn;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return Ok(None);
            }
        }
    }
    Ok(None)
}

/// Starting points from grid cells in which both scaled residuals change sign.
fn grid_seeds(params: &ModelParams, spec: &AnsatzSpec) -> Result<Vec<(f64, f64)>> {
    let lo = xbar_floor(params);
    let xs: Vec<f64> = (0..spec.xbar_points)
        .map(|k| lo + (0.0 - lo) * k as f64 / (spec.xbar_points - 1) as f64)
        .collect();
    let amps: Vec<f64> = (1..=spec.amp_points)
        .map(|k| spec.amp_max * k as f64 / spec.amp_points as f64)
        .collect();
    let mut vals = Vec::with_capacity(xs.len() * amps.len());
    for &a in &amps {
        for &x in &xs {
            vals.push(scaled((x, a), params)?);
        }
    }
    let at = |i: usize, j: usize| vals[j * xs.len() + i];
    let mut seeds = Vec::new();
    for j in 0..amps.len() - 1 {
        for i in 0..xs.len() - 1 {
            let corners = [at(i, j), at(i + 1, j), at(i, j + 1), at(i + 1, j + 1)];
            let changes = |c: usize| {
                let pos = corners.iter().any(|r| r[c] >= 0.0);
                let neg = corners.iter().any(|r| r[c] <= 0.0);
                pos && neg
            };
            if changes(0) && changes(1) {
                seeds.push((0.5 * (xs[i] + xs[i + 1]), 0.5 * (amps[j] + amps[j + 1])));
            }
        }
    }
    Ok(seeds)
}

fn same(a: &AnsatzSolution, b: &AnsatzSolution) -> bool {
    (a.xbar - b.xbar).abs() < 1e-7 && (a.amplitude - b.amplitude).abs() < 1e-7
}

/// All ansatz solutions at one parameter set: the A = 0 branch and every
/// oscillating branch reachable from the grid seeds and `hints`. Branch ids
/// are left at 0.
pub fn solve_ansatz(params: &ModelParams, spec: &AnsatzSpec, hints: &[(f64, f64)]) -> Result<Vec<AnsatzSolution>> {
    let params = params.validate()?;
    let mut out: Vec<AnsatzSolution> = Vec::new();
    for x in static_branch(&params, spec)? {
        let (r, _) = ansatz_residuals((x, 0.0), &params)?;
        out.push(AnsatzSolution {
            xbar: x,
            amplitude: 0.0,
            residual: r.abs(),
            branch_id: 0,
        });
    }
    let mut starts: Vec<(f64, f64)> = hints.iter().copied().filter(|h| h.1 > 0.0).collect();
    starts.extend(grid_seeds(&params, spec)?);
    for s in starts {
        if let Some(sol) = newton(s, &params, spec)? {
            if sol.amplitude > 1e-6 && !out.iter().any(|o| same(o, &sol)) {
                out.push(sol);
            }
        }
    }
    out.sort_by(|a, b| a.amplitude.total_cmp(&b.amplitude).then(a.xbar.total_cmp(&b.xbar)));
    Ok(out)
}

/// Solves along a detuning grid. Oscillating branches are continued from one
/// grid point to the next and keep their id; the A = 0 solutions carry id 0
/// when unique and 0, 1, ... by xbar otherwise. Failures are reported per point.
pub fn solve_ansatz_branches(template: &ModelParams, grid: &[f64], spec: &AnsatzSpec) -> Result<Vec<AnsatzPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter {
            name: "detuning_grid",
            reason: "empty".into(),
        });
    }
    template.validate()?;
    // independent solves in parallel, then label by continuation
    let raw: Vec<Result<Vec<AnsatzSolution>>> = grid
        .par_iter()
        .map(|&d| solve_ansatz(&ModelParams { detuning: d, ..*template }, spec, &[]))
        .collect();

    let mut points = Vec::with_capacity(grid.len());
    // (branch id, last solution) of oscillating branches alive at the previous point
    let mut alive: Vec<(usize, AnsatzSolution)> = Vec::new();
    let mut next_id = 1000;
    for (k, (&d, res)) in grid.iter().zip(raw).enumerate() {
        let params = ModelParams { detuning: d, ..*template };
        let sols = match res {
            Err(e) => {
                points.push(AnsatzPoint {
                    detuning: d,
                    solutions: Err(e.to_string()),
                });
                alive.clear();
                continue;
            }
            Ok(s) => s,
        };
        let mut sols = sols;
        // continuation from the previous point picks up branches the grid missed
        if k > 0 {
            for (_, prev) in &alive {
                if let Ok(Some(sol)) = newton((prev.xbar, prev.amplitude), &params, spec) {
                    if sol.amplitude > 1e-6 && !sols.iter().any(|o| same(o, &sol)) {
                        sols.push(sol);
                    }
                }
            }
        }
        let mut labelled = Vec::with_capacity(sols.len());
        let mut static_idx = 0;
        let mut taken = vec![false; alive.len()];
        let mut new_alive = Vec::new();
        let mut sorted = sols;
        sorted.sort_by(|a, b| a.amplitude.total_cmp(&b.amplitude).then(a.xbar.total_cmp(&b.xbar)));
        for mut sol in sorted {
            if sol.amplitude == 0.0 {
                sol.branch_id = static_idx;
                static_idx += 1;
            } else {
                let nearest = alive
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .map(|(i, (id, p))| (i, *id, (p.xbar - sol.xbar).hypot(p.amplitude - sol.amplitude)))
                    .min_by(|a, b| a.2.total_cmp(&b.2));
                let step = if k > 0 { (d - grid[k - 1]).abs() } else { 0.0 };
                sol.branch_id = match nearest {
                    Some((i, id, dist)) if dist <= 10.0 * step + 1e-3 => {
                        taken[i] = true;
                        id
                    }
                    _ => {
                        next_id += 1;
                        next_id - 1
                    }
                };
                new_alive.push((sol.branch_id, sol));
            }
            labelled.push(sol);
        }
        alive = new_alive;
        points.push(AnsatzPoint {
            detuning: d,
            solutions: Ok(labelled),
        });
    }
    Ok(points)
}

/// Largest deviation of the simulated x(tau), started on the ansatz orbit,
/// from xbar + A cos(tau - phi_k), with the phase phi_k fitted per period.
pub fn ansatz_orbit_deviation(params: &ModelParams, sol: &AnsatzSolution, periods: usize) -> Result<f64> {
    let per = 128;
    let start = sol.initial_state(params)?;
    let traj = integrate_sc_with(
        start,
        params,
        (0.0, periods as f64 * TWO_PI),
        Sampling::per_period(per),
        Tolerances::default(),
        0.0,
    )?;
    let x = traj.positions();
    let mut worst: f64 = 0.0;
    for k in 0..periods {
        let window = k * per..(k + 1) * per + 1;
        let (mut c, mut s) = (0.0, 0.0);
        for i in window.clone() {
            let t = traj.times[i];
            c += (x[i] - sol.xbar) * t.cos();
            s += (x[i] - sol.xbar) * t.sin();
        }
        let phi = s.atan2(c);
        for i in window {
            let model = sol.xbar + sol.amplitude * (traj.times[i] - phi).cos();
            worst = worst.max((x[i] - model).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sc::fixed_points;
    use proptest::prelude::*;

    fn series_j(n: usize, z: f64) -> f64 {
        // power series, fine for small z
        let mut term = (z / 2.0).powi(n as i32) / (1..=n).map(|k| k as f64).product::<f64>();
        let mut sum = term;
        for m in 1..60 {
            term *= -(z * z / 4.0) / (m as f64 * (m + n) as f64);
            sum += term;
        }
        sum
    }

    #[test]
    fn bessel_reference_values() {
        let t = bessel_j_table(5, 1.0);
        assert!((t[0] - 0.7651976865579666).abs() < 1e-14);
        assert!((t[1] - 0.4400505857449335).abs() < 1e-14);
        let t = bessel_j_table(5, 10.0);
        assert!((t[0] + 0.2459357644513483).abs() < 1e-13);
        assert!((t[5] + 0.2340615281867936).abs() < 1e-13);
        assert_eq!(bessel_j_table(3, 0.0), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bessel_matches_series() {
        for &z in &[1e-6, 0.01, 0.3, 1.7, 3.2] {
            let t = bessel_j_table(12, z);
            for n in 0..=12 {
                let s = series_j(n, z);
                assert!((t[n] - s).abs() < 1e-14 * (1.0 + s.abs()) + 1e-300, "J_{n}({z})");
            }
        }
    }

    #[test]
    fn bessel_negative_argument() {
        let p = bessel_j_table(6, 2.5);
        let m = bessel_j_table(6, -2.5);
        for k in 0..=6 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            assert!((m[k] - sign * p[k]).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn bessel_identities(z in 0.0f64..30.0) {
            let t = bessel_j_table(80, z);
            // sum of squares J_0^2 + 2 sum J_k^2 = 1
            let s: f64 = t[0] * t[0] + 2.0 * t[1..].iter().map(|v| v * v).sum::<f64>();
            prop_assert!((s - 1.0).abs() < 1e-12);
            if z > 0.0 {
                for k in 1..40 {
                    let lhs = t[k - 1] + t[k + 1];
                    let rhs = 2.0 * k as f64 / z * t[k];
                    prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
                }
            }
        }
    }

    #[test]
    fn zero_amplitude_is_single_coefficient() {
        let p = ModelParams::new(-0.7, 1.3);
        let xbar = -0.3;
        let r = cavity_fourier_response(xbar, 0.0, &p, 3).unwrap();
        let dp = p.detuning - SQRT_2 * xbar;
        let expect = Complex64::new(0.0, 0.5) / Complex64::new(-p.kappa / 2.0, dp);
        assert!((r.coefficient(0) - expect).norm() < 1e-15);
        for n in [-3, -2, -1, 1, 2, 3] {
            assert_eq!(r.coefficient(n), Complex64::new(0.0, 0.0));
        }
    }

    fn rk4_alpha(xbar: f64, amp: f64, p: &ModelParams, periods: usize, steps: usize) -> Vec<(f64, Complex64)> {
        // alpha' = i[(Delta - sqrt2 x) alpha - 1/2] - kappa/2 alpha, x prescribed
        let f = |t: f64, a: Complex64| {
            let x = xbar + amp * t.cos();
            Complex64::i() * ((p.detuning - SQRT_2 * x) * a - 0.5) - p.kappa / 2.0 * a
        };
        let h = TWO_PI / steps as f64;
        let mut a = Complex64::new(0.0, 0.0);
        let mut out = Vec::new();
        for k in 0..periods * steps {
            let t = k as f64 * h;
            let k1 = f(t, a);
            let k2 = f(t + h / 2.0, a + h / 2.0 * k1);
            let k3 = f(t + h / 2.0, a + h / 2.0 * k2);
            let k4 = f(t + h, a + h * k3);
            a += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if k + 1 > (periods - 1) * steps {
                out.push((t + h, a));
            }
        }
        out
    }

    #[test]
    fn matches_direct_integration() {
        let p = ModelParams::new(-0.7, 1.3);
        let resp = fourier_response_auto(-0.5, 0.8, &p).unwrap();
        let tail = rk4_alpha(-0.5, 0.8, &p, 60, 4000);
        let err = tail.iter().map(|(t, a)| (resp.eval(*t) - a).norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max deviation {err}");
    }

    #[test]
    fn coefficients_decay_fast() {
        let p = ModelParams::new(-0.7, 1.3);
        let resp = cavity_fourier_response(-0.5, 0.8, &p, 30).unwrap();
        let z = SQRT_2 * 0.8;
        let mags: Vec<f64> = (z.ceil() as i64 + 2..=20).map(|n| resp.coefficient(n).norm()).collect();
        // successive ratios shrink beyond the Bessel scale
        let ratios: Vec<f64> = mags.windows(2).map(|w| w[1] / w[0]).collect();
        assert!(ratios.windows(2).all(|r| r[1] < r[0]), "{ratios:?}");
        assert!(ratios.last().unwrap() < &0.1);
    }

    #[test]
    fn too_small_truncation_is_reported() {
        let p = ModelParams::new(-0.7, 1.3);
        let err = cavity_fourier_response(-0.5, 2.0, &p, 2).unwrap_err();
        assert!(matches!(err, Error::Truncation { truncation: 2, .. }));
        assert!(cavity_fourier_response_recurrence(-0.5, 2.0, &p, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn closed_form_equals_recurrence(
            xbar in -1.5f64..0.5, amp in 0.0f64..3.0, det in -2.5f64..1.0, kappa in 0.3f64..2.0,
        ) {
            let p = ModelParams::new(det, 1.3).with_damping(kappa, 1e-3);
            let n = initial_truncation(amp) + 12;
            let a = cavity_fourier_response(xbar, amp, &p, n).unwrap();
            let b = cavity_fourier_response_recurrence(xbar, amp, &p, n).unwrap();
            for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
                prop_assert!((u - v).norm() < 1e-10);
            }
        }

        #[test]
        fn parseval(xbar in -1.0f64..0.0, amp in 0.0f64..2.5, det in -2.0f64..0.5) {
            let p = ModelParams::new(det, 1.3);
            let r = fourier_response_auto(xbar, amp, &p).unwrap();
            let m = 4 * r.truncation + 8;
            let avg: f64 = (0..m).map(|k| r.eval(TWO_PI * k as f64 / m as f64).norm_sqr()).sum::<f64>() / m as f64;
            prop_assert!((avg - r.mean_intensity()).abs() < 1e-10 * (1.0 + avg));
        }
    }

    #[test]
    fn static_branch_matches_fixed_points() {
        for (d, pump) in [(-0.5, 1.3), (-2.0, 4.0), (0.3, 0.8)] {
            let p = ModelParams::new(d, pump);
            let mut ours = static_branch(&p, &AnsatzSpec::default()).unwrap();
            let mut fp: Vec<f64> = fixed_points(&p).unwrap().iter().map(|f| f.state.coords().x).collect();
            ours.sort_by(f64::total_cmp);
            fp.sort_by(f64::total_cmp);
            assert_eq!(ours.len(), fp.len(), "d={d} P={pump}");
            for (a, b) in ours.iter().zip(&fp) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    /// Residuals by brute force: RK4 for alpha and beta with x prescribed,
    /// then DC and cos projections of the induced x over one late period.
    fn brute_residuals(xbar: f64, amp: f64, p: &ModelParams) -> (f64, f64) {
        let steps = 1000;
        let h = TWO_PI / steps as f64;
        let f = |t: f64, a: Complex64, b: Complex64| {
            let x = xbar + amp * t.cos();
            let da = Complex64::i() * ((p.detuning - SQRT_2 * x) * a - 0.5) - p.kappa / 2.0 * a;
            let db = -Complex64::i() * (p.pump / 2.0 * a.norm_sqr() + b) - p.gamma / 2.0 * b;
            (da, db)
        };
        let (mut a, mut b) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        let periods = (40.0 / p.gamma).ceil() as usize / 6;
        let (mut dc, mut c1) = (0.0, 0.0);
        for k in 0..periods * steps {
            let t = k as f64 * h;
            let (a1, b1) = f(t, a, b);
            let (a2, b2) = f(t + h / 2.0, a + h / 2.0 * a1, b + h / 2.0 * b1);
            let (a3, b3) = f(t + h / 2.0, a + h / 2.0 * a2, b + h / 2.0 * b2);
            let (a4, b4) = f(t + h, a + h * a3, b + h * b3);
            a += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            b += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
            if k >= (periods - 1) * steps {
                let x = SQRT_2 * b.re;
                dc += x / steps as f64;
                c1 += 2.0 * x * (t + h).cos() / steps as f64;
            }
        }
        (dc - xbar, c1 - amp)
    }

    #[test]
    fn residuals_match_time_domain() {
        let p = ModelParams::new(-0.9, 1.3).with_damping(1.0, 0.2);
        for (xbar, amp) in [(-0.2, 0.9), (-0.6, 0.3), (0.0, 1.7)] {
            let (r0, r1) = ansatz_residuals((xbar, amp), &p).unwrap();
            let (b0, b1) = brute_residuals(xbar, amp, &p);
            assert!((r0 - b0).abs() < 1e-6, "dc {r0} vs {b0}");
            assert!((r1 - b1).abs() < 1e-6, "harm {r1} vs {b1}");
        }
    }

    #[test]
    fn residual_is_odd_in_amplitude() {
        let p = ModelParams::new(-0.8, 1.3);
        let resp = fourier_response_auto(-0.4, 0.0, &p).unwrap();
        let (_, r) = residuals_from(&resp, (-0.4, 0.0), &p);
        assert!(r.abs() < 1e-15);
    }

    #[test]
    fn below_hopf_only_static() {
        let p = ModelParams::new(-0.5, 0.05);
        let sols = solve_ansatz(&p, &AnsatzSpec::default(), &[]).unwrap();
        assert!(!sols.is_empty());
        assert!(sols.iter().all(|s| s.amplitude == 0.0), "{sols:?}");
    }

    #[test]
    fn oscillating_branch_converges() {
        let p = ModelParams::new(-0.4, 1.3);
        let sols = solve_ansatz(&p, &AnsatzSpec::default(), &[]).unwrap();
        let osc: Vec<_> = sols.iter().filter(|s| s.amplitude > 0.0).collect();
        assert!(!osc.is_empty());
        for s in osc {
            let (r0, r1) = ansatz_residuals((s.xbar, s.amplitude), &p).unwrap();
            assert!(r0.abs() < 1e-8 && r1.abs() < 1e-8);
        }
    }
}
