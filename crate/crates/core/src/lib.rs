//! Bayesian hybrid modeling: Gaussian-process surrogates calibrated against
//! experiments with a learned discrepancy, plus uncertainty propagation,
//! sensitivity analysis, model distillation and multi-source fusion.

pub mod bench;
pub mod data;
pub mod error;
pub mod ga;
pub mod gp;
pub mod koh;
pub mod lasso;
pub mod linalg;
pub mod mcmc;
pub mod multisource;
pub mod optimize;
pub mod portable;
pub mod qmc;
pub mod robust;
pub mod seed;
pub mod sobol;
pub mod stats;
pub mod surrogate;
pub mod transient;

pub use error::{Error, Result};
