//! Power spectra of the cavity amplitude and detection of subharmonic order.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::sc::{ScTrajectory, TWO_PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            // periodic Hann, exact for integer-period records
            Window::Hann => (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

/// Which signal derived from alpha(tau) is transformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumQuantity {
    /// Complex field amplitude alpha.
    #[default]
    Amplitude,
    /// Intensity |alpha|^2.
    Intensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSpec {
    pub window: Window,
    /// Number of trailing mechanical periods transformed.
    pub n_periods: usize,
    pub quantity: SpectrumQuantity,
}

impl Default for SpectrumSpec {
    fn default() -> Self {
        Self {
            window: Window::Hann,
            n_periods: 512,
            quantity: SpectrumQuantity::Amplitude,
        }
    }
}

pub const MIN_PERIODS: usize = 64;

/// One-sided power spectrum, frequencies in units of Omega.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    pub frequencies: Vec<f64>,
    pub power: Vec<f64>,
    pub window: Window,
    /// Bin width in units of Omega.
    pub resolution: f64,
}

/// Windowed DFT of uniformly sampled complex data. Positive and negative
/// frequencies are folded onto |nu|; `power` is normalized so that its sum
/// equals the windowed time-domain energy sum |w_k z_k|^2.
pub fn power_spectrum_samples(samples: &[Complex64], step: f64, window: Window) -> Result<PowerSpectrum> {
    let n = samples.len();
    if n < 4 {
        return Err(Error::TooFewSamples { needed: 4, got: n });
    }
    let w = window.coefficients(n);
    let mut buf: Vec<Complex64> = samples.iter().zip(&w).map(|(z, w)| z * w).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    let half = n / 2;
    let mut power = Vec::with_capacity(half + 1);
    power.push(buf[0].norm_sqr() * scale);
    for k in 1..=half {
        let p = if 2 * k == n {
            buf[k].norm_sqr()
        } else {
            buf[k].norm_sqr() + buf[n - k].norm_sqr()
        };
        power.push(p * scale);
    }
    // bin k is angular frequency 2 pi k / (n step), i.e. k / (n step / 2 pi) in Omega units
    let resolution = TWO_PI / (n as f64 * step);
    Ok(PowerSpectrum {
        frequencies: (0..=half).map(|k| k as f64 * resolution).collect(),
        power,
        window,
        resolution,
    })
}

/// Spectrum of the last `spec.n_periods` periods of a uniformly sampled,
/// post-transient trajectory.
pub fn power_spectrum(traj: &ScTrajectory, spec: &SpectrumSpec) -> Result<PowerSpectrum> {
    let post = traj.post_transient();
    let step = post.uniform_step().ok_or(Error::NonUniformSampling)?;
    let per_period = (TWO_PI / step).round() as usize;
    if per_period < 2 || (per_period as f64 * step - TWO_PI).abs() > 1e-9 || !per_period.is_power_of_two() {
        return Err(Error::CadenceMismatch { step });
    }
    if spec.n_periods < MIN_PERIODS {
        return Err(Error::InvalidParameter {
            name: "n_periods",
            reason: format!("{} is below the minimum of {MIN_PERIODS}", spec.n_periods),
        });
    }
    let needed = spec.n_periods * per_period;
    // the record holds needed + 1 samples when it spans whole periods; drop the endpoint
    if post.len() < needed {
        return Err(Error::TooFewSamples {
            needed,
            got: post.len(),
        });
    }
    let start = post.len() - needed;
    let samples: Vec<Complex64> = post.states[start..]
        .iter()
        .map(|s| match spec.quantity {
            SpectrumQuantity::Amplitude => s.alpha,
            SpectrumQuantity::Intensity => Complex64::new(s.alpha.norm_sqr(), 0.0),
        })
        .collect();
    power_spectrum_samples(&samples, step, spec.window)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubharmonicOrder {
    Order(usize),
    Continuous,
}

pub const DEFAULT_PEAK_THRESHOLD: f64 = 1e-4;

/// Peak-to-grid tolerance as a fraction of the finest (nu_1 / 8) grid spacing.
const GRID_TOL: f64 = 0.1;
/// Off-grid broadband power within this factor of the median on-grid peak
/// power (20 dB) means a continuous spectrum.
const CONTINUUM_RATIO: f64 = 1e-2;

/// A spectral line: local maximum bin with parabolically refined frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub frequency: f64,
    pub power: f64,
}

/// Bins below this index belong to the DC line and its window leakage.
const DC_BINS: usize = 2;

/// Non-DC local-maximum bins with power at least `threshold` times the largest.
pub fn spectral_lines(spec: &PowerSpectrum, threshold: f64) -> Vec<Line> {
    let p = &spec.power;
    let n = p.len();
    let is_peak = |k: usize| {
        let left = if k == 0 { f64::NEG_INFINITY } else { p[k - 1] };
        let right = if k + 1 == n { f64::NEG_INFINITY } else { p[k + 1] };
        p[k] > left && p[k] >= right
    };
    let peaks: Vec<usize> = (DC_BINS.min(n)..n).filter(|&k| is_peak(k)).collect();
    let max = peaks.iter().map(|&k| p[k]).fold(0.0, f64::max);
    peaks
        .into_iter()
        .filter(|&k| p[k] >= threshold * max && p[k] > 0.0)
        .map(|k| {
            let offset = if k > 0 && k + 1 < n && p[k - 1] > 0.0 && p[k + 1] > 0.0 {
                let (a, b, c) = (p[k - 1].ln(), p[k].ln(), p[k + 1].ln());
                let den = a - 2.0 * b + c;
                if den < 0.0 {
                    (0.5 * (a - c) / den).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            Line {
                frequency: (k as f64 + offset) * spec.resolution,
                power: p[k],
            }
        })
        .collect()
}

/// Fundamental frequency: among lines in [0.75, 1.25] Omega, the one whose
/// nu/8 grid carries the most line power.
pub fn fundamental(lines: &[Line]) -> Option<f64> {
    let score = |nu: f64| -> f64 {
        let tol = GRID_TOL * nu / 8.0;
        lines.iter().filter(|l| on_grid(l.frequency, nu / 8.0, tol)).map(|l| l.power).sum()
    };
    lines
        .iter()
        .filter(|l| (0.75..=1.25).contains(&l.frequency))
        .map(|l| (score(l.frequency), l))
        .max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.power.total_cmp(&b.1.power)))
        .map(|(_, l)| l.frequency)
}

fn on_grid(freq: f64, spacing: f64, tol: f64) -> bool {
    let r = freq / spacing;
    (r - r.round()).abs() * spacing <= tol
}

/// Smallest n in {1, 2, 4, 8} whose nu_1/n grid holds every significant line,
/// where nu_1 is the measured fundamental (close to Omega). Broadband power
/// between the nu_1/8 grid lines signals a continuous spectrum.
pub fn detect_subharmonic_order(spec: &PowerSpectrum, threshold: f64) -> SubharmonicOrder {
    let lines = spectral_lines(spec, threshold);
    let Some(nu1) = fundamental(&lines) else {
        return SubharmonicOrder::Order(1);
    };
    let tol = (GRID_TOL * nu1 / 8.0).max(2.0 * spec.resolution);
    let band = lines.iter().map(|l| l.frequency).fold(nu1, f64::max);

    let mut on_grid_power: Vec<f64> = lines
        .iter()
        .filter(|l| on_grid(l.frequency, nu1 / 8.0, tol))
        .map(|l| l.power)
        .collect();
    let mut off_grid_bins: Vec<f64> = spec
        .frequencies
        .iter()
        .zip(&spec.power)
        .filter(|(f, _)| **f <= band && !on_grid(**f, nu1 / 8.0, tol))
        .map(|(_, p)| *p)
        .collect();
    if !on_grid_power.is_empty() && !off_grid_bins.is_empty() {
        let median_peak = median(&mut on_grid_power);
        let median_floor = median(&mut off_grid_bins);
        if median_floor >= CONTINUUM_RATIO * median_peak {
            return SubharmonicOrder::Continuous;
        }
    }
    for n in [1, 2, 4, 8] {
        if lines.iter().all(|l| on_grid(l.frequency, nu1 / n as f64, tol)) {
            return SubharmonicOrder::Order(n);
        }
    }
    SubharmonicOrder::Continuous
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
