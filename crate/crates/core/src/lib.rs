//! Continuum dropout for neural ODEs.
//!
//! Each latent dimension of a neural ODE is switched on and off by an
//! exponential alternating renewal process; while a dimension is off its
//! state is frozen. The crate covers the rate calculus that maps the user
//! hyperparameters `(p, m)` to renewal intensities, an event-aligned fixed-step
//! integrator with exact reverse-mode gradients, training, and Monte-Carlo
//! inference with calibration metrics.

pub mod data;
pub mod error;
pub mod infercalib;
pub mod model;
pub mod netcore;
pub mod odeint;
pub mod renewal;
pub mod stream;
pub mod train;

pub use error::{Error, Result};
pub use renewal::{DropoutSpec, IndicatorPath, McEstimate, RenewalRates};
