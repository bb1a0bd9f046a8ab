//! Sharpness-aware minimization laboratory.
//!
//! Discrete SAM/USAM optimizer variants, the SDEs that approximate them,
//! and harnesses that measure how closely the two agree on synthetic
//! objectives with exact gradient and Hessian oracles.

pub mod error;
pub mod linalg;
pub mod objectives;
pub mod optimizers;
pub mod rng;
pub mod sde;
pub mod stochastic;
pub mod verify;

pub use error::{Error, Result};
pub use objectives::{Ensemble, EnsembleSpec, Objective, ParameterVector};
pub use rng::SeedStream;
