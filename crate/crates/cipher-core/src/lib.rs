//! Differentially private synthetic categorical microdata.
//!
//! The pipeline sanitizes a collection of low-dimensional contingency
//! tables under the Laplace mechanism, reconstructs a full joint
//! distribution from them by solving regularized block linear systems,
//! and samples synthetic records from the result. Full-table
//! sanitization and MWEM are included as baselines, together with
//! utility metrics (total variation distance, l-infinity error,
//! significance-sign screening) and a multinomial-logit inference
//! module with a replicate combining rule.

pub mod baselines;
pub mod cipher;
pub mod cli;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod privacy;
pub mod rng;
pub mod synth;
pub mod tables;

pub use error::{CipherError, Result};
