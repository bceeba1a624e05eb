//! Twisted sequential Monte Carlo for steering autoregressive models toward
//! sparse, potential-defined targets, with contrastive twist learning and
//! iterated self-distillation of the base model.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod ctl;
pub mod distill;
pub mod error;
pub mod eval;
pub mod math;
pub mod mlp;
pub mod oracle;
pub mod persist;
pub mod potential;
pub mod rng;
pub mod seqmodel;
pub mod smc;
pub mod twist;

pub use error::{Error, Result};
