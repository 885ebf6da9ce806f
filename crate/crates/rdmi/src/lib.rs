//! Retrieved-dropout multiple imputation for longitudinal clinical trials.
//!
//! Implements a reference-anchored imputation model for treatment-policy
//! estimands: a reference-based core (MAR, J2R, CIR, LMCF, RTB, MAR+delta)
//! extended with compliance-model deviation parameters under mildly
//! informative zero-centred priors, fitted by conjugate Gibbs sampling with
//! data augmentation, plus classic reference-based imputation, ANCOVA per
//! completed dataset, and Rubin's-rules pooling.

pub mod analyze;
pub mod cli;
pub mod design;
pub mod error;
pub mod exec;
pub mod gibbs;
pub mod impute;
mod linalg;
pub mod model_spec;
pub mod trial_data;
pub mod verify;

pub use error::{Error, Result};
