//! System parameters in units of the mechanical frequency (Omega = 1, tau = Omega t).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};

pub const DEFAULT_KAPPA: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 1e-3;

/// Dimensionless parameters of the driven optomechanical system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Laser-cavity detuning Delta / Omega.
    #[serde(default)]
    pub detuning: f64,
    /// Cavity loss rate kappa / Omega.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Mechanical damping Gamma / Omega.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Pump parameter P = 8 alpha_L^2 g0^2 / Omega^4.
    #[serde(default)]
    pub pump: f64,
    /// Quantum-classical scaling parameter sigma = g0 / kappa.
    #[serde(default)]
    pub sigma: f64,
}

fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            detuning: 0.0,
            kappa: DEFAULT_KAPPA,
            gamma: DEFAULT_GAMMA,
            pump: 0.0,
            sigma: 0.0,
        }
    }
}

impl ModelParams {
    /// Semi-classical parameters with the default damping rates.
    pub fn new(detuning: f64, pump: f64) -> Self {
        Self {
            detuning,
            pump,
            ..Self::default()
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_damping(mut self, kappa: f64, gamma: f64) -> Self {
        self.kappa = kappa;
        self.gamma = gamma;
        self
    }

    pub fn validate(self) -> Result<Self> {
        validate_params(self)
    }
}

/// Range-checks a parameter set. Defaults are filled by construction
/// (`ModelParams::new`, `Default`, or serde defaults).
pub fn validate_params(params: ModelParams) -> Result<ModelParams> {
    let check = |name: &'static str, value: f64, ok: bool, what: &str| {
        if !value.is_finite() {
            Err(Error::InvalidParameter {
                name,
                reason: format!("{value} is not finite"),
            })
        } else if !ok {
            Err(Error::InvalidParameter {
                name,
                reason: format!("{value} must be {what}"),
            })
        } else {
            Ok(())
        }
    };
    check("detuning", params.detuning, true, "finite")?;
    check("kappa", params.kappa, params.kappa > 0.0, "positive")?;
    check("gamma", params.gamma, params.gamma > 0.0, "positive")?;
    check("pump", params.pump, params.pump >= 0.0, "non-negative")?;
    check("sigma", params.sigma, params.sigma >= 0.0, "non-negative")?;
    Ok(params)
}

/// Bare couplings g0 and alpha_L in units of Omega.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedCouplings {
    pub g0: f64,
    pub alpha_l: f64,
}

impl DerivedCouplings {
    /// Pump parameter reconstructed from the couplings.
    pub fn pump(&self) -> f64 {
        8.0 * self.alpha_l * self.alpha_l * self.g0 * self.g0
    }
}

pub fn derive_couplings(params: &ModelParams) -> Result<DerivedCouplings> {
    let params = validate_params(*params)?;
    let g0 = params.sigma * params.kappa;
    if params.pump == 0.0 {
        return Ok(DerivedCouplings { g0, alpha_l: 0.0 });
    }
    if g0 == 0.0 {
        return Err(Error::UndefinedCoupling { pump: params.pump });
    }
    Ok(DerivedCouplings {
        g0,
        alpha_l: (params.pump / 8.0).sqrt() / g0,
    })
}

/// Rescaled cavity and cantilever amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScState {
    pub alpha: Complex64,
    pub beta: Complex64,
}

impl ScState {
    pub const ORIGIN: ScState = ScState {
        alpha: Complex64::new(0.0, 0.0),
        beta: Complex64::new(0.0, 0.0),
    };

    pub fn new(alpha: Complex64, beta: Complex64) -> Self {
        Self { alpha, beta }
    }

    /// Real layout `[Re alpha, Im alpha, Re beta, Im beta]`.
    pub fn to_real(self) -> [f64; 4] {
        [self.alpha.re, self.alpha.im, self.beta.re, self.beta.im]
    }

    pub fn from_real(y: &[f64]) -> Self {
        Self {
            alpha: Complex64::new(y[0], y[1]),
            beta: Complex64::new(y[2], y[3]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite()
    }

    pub fn coords(&self) -> CanonicalCoords {
        canonical_coords(self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CanonicalCoords {
    pub x: f64,
    pub p: f64,
}

/// Phase-space variables x = (beta + beta*)/sqrt 2 and p = -i (beta* - beta)/sqrt 2.
///
/// The momentum follows the sign convention of the model literally, which
/// gives p = -sqrt(2) Im beta.
pub fn canonical_coords(beta: Complex64) -> CanonicalCoords {
    let x = (beta + beta.conj()) / SQRT_2;
    let p = -Complex64::i() * (beta.conj() - beta) / SQRT_2;
    CanonicalCoords { x: x.re, p: p.re }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn couplings_zero_pump() {
        let c = derive_couplings(&ModelParams::new(0.0, 0.0).with_sigma(0.1)).unwrap();
        assert_relative_eq!(c.g0, 0.1);
        assert_eq!(c.alpha_l, 0.0);
    }

    #[test]
    fn couplings_p15() {
        let c = derive_couplings(&ModelParams::new(0.0, 1.5).with_sigma(0.1)).unwrap();
        assert_relative_eq!(c.g0, 0.1);
        // sqrt(1.5 / 8) / 0.1
        assert_relative_eq!(c.alpha_l, 4.330127018922193, epsilon = 1e-12);
        assert_relative_eq!(c.pump(), 1.5, max_relative = 1e-12);
    }

    #[test]
    fn couplings_classical_limit_with_pump_fails() {
        let err = derive_couplings(&ModelParams::new(0.0, 1.5)).unwrap_err();
        assert!(matches!(err, Error::UndefinedCoupling { .. }));
    }

    #[test]
    fn validation() {
        let p = ModelParams::new(-0.7, 1.5).validate().unwrap();
        assert_eq!((p.detuning, p.kappa, p.gamma, p.pump), (-0.7, 1.0, 1e-3, 1.5));
        assert!(ModelParams::new(0.0, 1.0).with_damping(-1.0, 1e-3).validate().is_err());
        assert!(ModelParams::new(0.0, 1.0).with_damping(1.0, 0.0).validate().is_err());
        assert!(ModelParams::new(0.0, -0.1).validate().is_err());
        assert!(ModelParams::new(0.0, 1.0).with_sigma(-0.1).validate().is_err());
        assert!(ModelParams::new(f64::NAN, 1.0).validate().is_err());
        // classical limit is legal for the semi-classical modules
        assert!(ModelParams::new(0.0, 1.4).validate().is_ok());
    }

    #[test]
    fn coords_examples() {
        let c = canonical_coords(Complex64::new(0.0, 0.0));
        assert_eq!((c.x, c.p), (0.0, 0.0));
        let c = canonical_coords(Complex64::new(1.0 / SQRT_2, 0.0));
        assert_relative_eq!(c.x, 1.0, epsilon = 1e-15);
        assert_relative_eq!(c.p, 0.0, epsilon = 1e-15);
        let c = canonical_coords(Complex64::new(0.0, -1.0 / SQRT_2));
        assert_relative_eq!(c.x, 0.0, epsilon = 1e-15);
        assert_relative_eq!(c.p, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn serde_defaults_fill() {
        let p: ModelParams = serde_json::from_str(r#"{"detuning": -0.7, "pump": 1.5}"#).unwrap();
        assert_eq!(p, ModelParams::new(-0.7, 1.5));
        assert!(serde_json::from_str::<ModelParams>(r#"{"detuning": 0, "tempreature": 1}"#).is_err());
        let p: ModelParams = serde_json::from_str(r#"{"pump": 1.4}"#).unwrap();
        assert_eq!(p, ModelParams::new(0.0, 1.4));
    }

    proptest! {
        #[test]
        fn pump_round_trip(pump in 0.0f64..10.0, sigma in 1e-3f64..1.0, kappa in 0.1f64..5.0) {
            let params = ModelParams::new(0.0, pump).with_sigma(sigma).with_damping(kappa, 1e-3);
            let c = derive_couplings(&params).unwrap();
            prop_assert!((c.pump() - pump).abs() <= 1e-12 * pump.max(1e-300));
        }

        #[test]
        fn coords_norm(re in -10.0f64..10.0, im in -10.0f64..10.0) {
            let beta = Complex64::new(re, im);
            let c = canonical_coords(beta);
            prop_assert!((c.x * c.x + c.p * c.p - 2.0 * beta.norm_sqr()).abs() < 1e-12 * (1.0 + beta.norm_sqr()));
            prop_assert!((c.p + SQRT_2 * im).abs() < 1e-12 * (1.0 + im.abs()));
        }
    }
}
