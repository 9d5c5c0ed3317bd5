//! EDMD surrogate modelling and model predictive control for dose
//! scheduling on chains of advection–reaction population balance models.
//!
//! The crate is organised bottom-up:
//!
//! - [`spectral`]: Legendre modal basis, differentiation, boundary traces.
//! - [`plant`]: the nonlinear population chain, pharmacokinetics, stepping.
//! - [`edmd`]: lifting dictionaries and least-squares surrogate fitting.
//! - [`control`]: finite-horizon dose optimisation (projected BFGS).
//! - [`mpc`]: the receding-horizon loop with surrogate refits.
//! - [`harness`]: scenario files, trace export, and run comparison.

pub mod control;
pub mod edmd;
pub mod error;
pub mod harness;
pub mod mpc;
pub mod plant;
pub mod spectral;

pub use error::{Error, Result};
