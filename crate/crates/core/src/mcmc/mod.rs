//! Hyperparameter and calibration-parameter sampling.

pub mod diagnostics;
pub mod priors;
pub mod sampler;

pub use diagnostics::{diagnose, ess, split_rhat, Diagnostics};
pub use priors::{Prior, PriorSpec};
pub use sampler::{
    gibbs_step, pooled, run_chain, run_chain_on_stream, run_parallel_chains, ChainState, FnTarget, LogTarget,
    McmcConfig, ParallelRun, PosteriorChain,
};
