//! Adaptive delay model: multi-region latent Gaussian processes with
//! time-varying inter-region delays, approximated by time-varying
//! state-space models for linear-time inference.

pub mod convert;
pub mod error;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod learning;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod perf;
pub mod presets;

pub use error::{AdmError, ErrorCategory, Result};
