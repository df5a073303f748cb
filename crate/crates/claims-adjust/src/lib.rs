//! Bayesian propensity-score adjustment for high-dimensional claims codes.
//!
//! The pipeline: ingest a claims/registry pair ([`ingest`]), pick a prior
//! family over the code coefficients ([`priors`], [`model`]), sample the
//! propensity posterior by HMC ([`sampler`]), check it ([`diagnostics`],
//! [`causal::standardized_differences`]), and push per-draw inverse
//! probability weights through a conjugate beta outcome posterior for risk
//! differences ([`causal`]). Synthetic cohorts with known truth live in
//! [`synth`]; the `examples/` directory walks every stage end to end.

pub mod causal;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod ingest;
pub mod model;
pub mod priors;
pub mod sampler;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
