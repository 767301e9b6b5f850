//! Heterogeneous, time-varying treatment effects in dynamic event studies.

pub mod baselines;
pub mod eb;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod qmle;
pub mod simulate;
pub mod wald;

pub use error::{Error, Result};
