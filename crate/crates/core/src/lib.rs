//! Fair longitudinal medical deconfounder: a two-stage model that learns
//! latent confounders from patient histories and trains a counterfactually
//! fair predictor on top of them.

pub mod ehr;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod scm;
pub mod stage1;
pub mod stage2;

pub use error::{FlmdError, Result};
