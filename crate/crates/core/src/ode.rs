//! Dormand-Prince 5(4) integrator with PI step control and 4th-order dense output.
//!
//! The state is a fixed-size real array. The integrator keeps its step size
//! between calls to [`Dopri5::advance_to`], so a long run can be split into
//! segments (for renormalization or sampling) without restarting the step
//! selection.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Tolerances and step limits.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-12,
            h_max: 0.5,
            max_steps: 50_000_000,
        }
    }
}

impl Tolerances {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }
}

/// Continuous extension over the last accepted step.
#[derive(Debug, Clone, Copy)]
pub struct DenseStep<const N: usize> {
    pub t_old: f64,
    pub h: f64,
    rcont: [[f64; N]; 5],
}

impl<const N: usize> DenseStep<N> {
    pub fn t_new(&self) -> f64 {
        self.t_old + self.h
    }

    pub fn eval(&self, t: f64) -> [f64; N] {
        let theta = (t - self.t_old) / self.h;
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &self.rcont;
        std::array::from_fn(|i| {
            r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])))
        })
    }
}

pub struct Dopri5<F, const N: usize> {
    rhs: F,
    tol: Tolerances,
    t: f64,
    y: [f64; N],
    k1: [f64; N],
    h: f64,
    err_old: f64,
    fsal_valid: bool,
    steps: usize,
}

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    std::array::from_fn(|i| {
        let mut s = 0.0;
        for (c, k) in terms {
            s += c * k[i];
        }
        y[i] + h * s
    })
}

impl<F, const N: usize> Dopri5<F, N>
where
    F: FnMut(f64, &[f64; N], &mut [f64; N]),
{
    pub fn new(rhs: F, t0: f64, y0: [f64; N], tol: Tolerances) -> Self {
        Self {
            rhs,
            tol,
            t: t0,
            y: y0,
            k1: [0.0; N],
            h: 0.0,
            err_old: 1e-4,
            fsal_valid: false,
            steps: 0,
        }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &[f64; N] {
        &self.y
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Replaces the current state (e.g. after renormalizing a tangent vector).
    pub fn set_state(&mut self, y: [f64; N]) {
        self.y = y;
        self.fsal_valid = false;
    }

    fn ensure_k1(&mut self) {
        if !self.fsal_valid {
            (self.rhs)(self.t, &self.y, &mut self.k1);
            self.fsal_valid = true;
        }
    }

    fn initial_step(&mut self) -> f64 {
        // Hairer's heuristic for a 5th-order method
        let sc = |y: f64| self.tol.atol + self.tol.rtol * y.abs();
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..N {
            d0 += (self.y[i] / sc(self.y[i])).powi(2);
            d1 += (self.k1[i] / sc(self.y[i])).powi(2);
        }
        d0 = (d0 / N as f64).sqrt();
        d1 = (d1 / N as f64).sqrt();
        let h0 = if d0 < 1e-10 || d1 < 1e-10 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(self.tol.h_max);
        let y1 = axpy(&self.y, h0, &[(1.0, &self.k1)]);
        let mut f1 = [0.0; N];
        (self.rhs)(self.t + h0, &y1, &mut f1);
        let mut d2 = 0.0;
        for i in 0..N {
            d2 += ((f1[i] - self.k1[i]) / sc(self.y[i])).powi(2);
        }
        d2 = (d2 / N as f64).sqrt() / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(self.tol.h_max)
    }

    /// Integrates up to exactly `t_end`, calling `on_step` with the dense
    /// interpolant of every accepted step.
    pub fn advance_to<O>(&mut self, t_end: f64, mut on_step: O) -> Result<()>
    where
        O: FnMut(&DenseStep<N>),
    {
        const SAFE: f64 = 0.9;
        const FAC_MIN: f64 = 0.2;
        const FAC_MAX: f64 = 10.0;
        const BETA: f64 = 0.04;
        let expo1 = 0.2 - BETA * 0.75;

        if t_end <= self.t {
            return Ok(());
        }
        self.ensure_k1();
        if self.h <= 0.0 {
            self.h = self.initial_step();
        }
        let mut last = false;
        let mut reject = false;
        while !last {
            if self.steps >= self.tol.max_steps {
                return Err(Error::TooManySteps {
                    tau: self.t,
                    max_steps: self.tol.max_steps,
                });
            }
            let mut h = self.h.min(self.tol.h_max);
            if self.t + 1.01 * h >= t_end {
                h = t_end - self.t;
                last = true;
            }
            if h.abs() <= 1e-14 * self.t.abs().max(1.0) {
                return Err(Error::StepUnderflow { tau: self.t, step: h });
            }

            let t = self.t;
            let y = self.y;
            let k1 = self.k1;
            let mut k2 = [0.0; N];
            let mut k3 = [0.0; N];
            let mut k4 = [0.0; N];
            let mut k5 = [0.0; N];
            let mut k6 = [0.0; N];
            let mut k7 = [0.0; N];
            let rhs = &mut self.rhs;
            rhs(t + C2 * h, &axpy(&y, h, &[(A21, &k1)]), &mut k2);
            rhs(t + C3 * h, &axpy(&y, h, &[(A31, &k1), (A32, &k2)]), &mut k3);
            rhs(
                t + C4 * h,
                &axpy(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
                &mut k4,
            );
            rhs(
                t + C5 * h,
                &axpy(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
                &mut k5,
            );
            let ysti = axpy(
                &y,
                h,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            );
            rhs(t + h, &ysti, &mut k6);
            let y_new = axpy(
                &y,
                h,
                &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
            );
            rhs(t + h, &y_new, &mut k7);
            self.steps += 1;

            let mut err = 0.0;
            for i in 0..N {
                let e = h
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                        + E7 * k7[i]);
                let sc = self.tol.atol + self.tol.rtol * y[i].abs().max(y_new[i].abs());
                err += (e / sc).powi(2);
            }
            let err = (err / N as f64).sqrt();
            if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                if h < 1e-12 {
                    return Err(Error::Divergence { tau: t });
                }
                self.h = h * FAC_MIN;
                last = false;
                reject = true;
                continue;
            }

            let fac11 = err.powf(expo1);
            let mut fac = fac11 / self.err_old.powf(BETA);
            fac = (1.0 / FAC_MAX).max((1.0 / FAC_MIN).min(fac / SAFE));
            let h_new = h / fac;

            if err <= 1.0 {
                self.err_old = err.max(1e-4);
                let mut rcont = [[0.0; N]; 5];
                for i in 0..N {
                    let ydiff = y_new[i] - y[i];
                    let bspl = h * k1[i] - ydiff;
                    rcont[0][i] = y[i];
                    rcont[1][i] = ydiff;
                    rcont[2][i] = bspl;
                    rcont[3][i] = ydiff - h * k7[i] - bspl;
                    rcont[4][i] = h
                        * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                            + D7 * k7[i]);
                }
                let dense = DenseStep { t_old: t, h, rcont };
                self.t = if last { t_end } else { t + h };
                self.y = y_new;
                self.k1 = k7;
                on_step(&dense);
                let h_next = if reject { h_new.min(h) } else { h_new };
                // the clamped final step says nothing about the natural step size
                if !last || h_next > self.h {
                    self.h = h_next;
                }
                reject = false;
            } else {
                self.h = h / (1.0 / FAC_MIN).min(fac11 / SAFE);
                last = false;
                reject = true;
            }
        }
        Ok(())
    }

    /// Integrates to `t_end` and records samples on the grid `t0 + k * dt`
    /// (for every grid point in `(self.t, t_end]`, plus `self.t` itself when
    /// `include_start`).
    pub fn sample_uniform(
        &mut self,
        t_end: f64,
        grid_origin: f64,
        dt: f64,
        include_start: bool,
    ) -> Result<(Vec<f64>, Vec<[f64; N]>)> {
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut k = ((self.t - grid_origin) / dt).round() as i64;
        let grid = |k: i64| grid_origin + k as f64 * dt;
        if include_start && (grid(k) - self.t).abs() <= 1e-9 * dt {
            times.push(grid(k));
            states.push(self.y);
        }
        if grid(k) <= self.t + 1e-9 * dt {
            k += 1;
        }
        let end_tol = 1e-9 * dt;
        self.advance_to(t_end, |dense| {
            let t_new = dense.t_new();
            while grid(k) <= t_new + end_tol && grid(k) <= t_end + end_tol {
                let tk = grid(k);
                times.push(tk);
                states.push(dense.eval(tk.min(t_new)));
                k += 1;
            }
        })?;
        Ok((times, states))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harmonic(_t: f64, y: &[f64; 2], dy: &mut [f64; 2]) {
        dy[0] = y[1];
        dy[1] = -y[0];
    }

    #[test]
    fn harmonic_oscillator_accuracy() {
        let mut ode = Dopri5::new(harmonic, 0.0, [1.0, 0.0], Tolerances::default());
        let t_end = 20.0 * std::f64::consts::PI;
        ode.advance_to(t_end, |_| {}).unwrap();
        assert!((ode.t() - t_end).abs() < 1e-15);
        assert!((ode.state()[0] - 1.0).abs() < 1e-7);
        assert!(ode.state()[1].abs() < 1e-7);
    }

    #[test]
    fn dense_output_matches_solution() {
        let mut ode = Dopri5::new(harmonic, 0.0, [1.0, 0.0], Tolerances::new(1e-10, 1e-12));
        let (times, states) = ode.sample_uniform(10.0, 0.0, 0.01, true).unwrap();
        assert_eq!(times.len(), 1001);
        for (t, y) in times.iter().zip(&states) {
            assert!((y[0] - t.cos()).abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn segmented_equals_single_run() {
        let tol = Tolerances::new(1e-11, 1e-13);
        let mut a = Dopri5::new(harmonic, 0.0, [1.0, 0.5], tol);
        a.advance_to(30.0, |_| {}).unwrap();
        let mut b = Dopri5::new(harmonic, 0.0, [1.0, 0.5], tol);
        for k in 1..=30 {
            b.advance_to(k as f64, |_| {}).unwrap();
        }
        for i in 0..2 {
            assert!((a.state()[i] - b.state()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn order_of_convergence() {
        // global error should scale roughly like tol^(5/6) or better, i.e. shrink when tol shrinks
        let exact = [(5.0f64).cos(), -(5.0f64).sin()];
        let err = |rtol: f64| {
            let mut ode = Dopri5::new(harmonic, 0.0, [1.0, 0.0], Tolerances::new(rtol, rtol * 1e-3));
            ode.advance_to(5.0, |_| {}).unwrap();
            let y = ode.state();
            ((y[0] - exact[0]).powi(2) + (y[1] - exact[1]).powi(2)).sqrt()
        };
        let e1 = err(1e-6);
        let e2 = err(1e-8);
        let e3 = err(1e-10);
        assert!(e2 < e1 / 10.0 && e3 < e2 / 10.0, "{e1} {e2} {e3}");
    }

    #[test]
    fn divergence_is_reported() {
        let blowup = |_t: f64, y: &[f64; 1], dy: &mut [f64; 1]| dy[0] = y[0] * y[0];
        let mut ode = Dopri5::new(blowup, 0.0, [1.0], Tolerances::default());
        assert!(ode.advance_to(2.0, |_| {}).is_err());
    }
}
