//! Semi-classical and quantum dynamics of the driven optomechanical system:
//! limit cycles, period-doubling cascades, Lyapunov exponents, optical
//! spectra, and quantum-state-diffusion trajectories on a truncated Fock space.

pub mod error;
pub mod model;
pub mod ode;
pub mod sc;
pub mod chaos;
pub mod spectrum;
pub mod ansatz;
pub mod qsd;

pub use error::{Error, Result};
pub use model::{canonical_coords, derive_couplings, validate_params, CanonicalCoords, DerivedCouplings, ModelParams, ScState};
