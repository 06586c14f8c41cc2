//! Runtime failure detection for stochastic action-chunk policies.

pub mod baselines;
pub mod conformal;
pub mod distance;
pub mod error;
pub mod eval;
pub mod policy;
pub mod rollout;
pub mod stac;
pub mod vlm;

pub use error::{Error, Result};
