//! Discrete neural flow samplers.
//!
//! Learns the rate matrix of a continuous-time Markov chain so that its
//! dynamics follow an annealed probability path from a uniform prior to an
//! unnormalised discrete target, then uses the chain for sampling,
//! importance-weighted inference, energy-based-model training, and
//! combinatorial optimisation.

pub mod combopt;
pub mod ctmc;
pub mod ebm;
pub mod infer;
pub mod lenet;
pub mod mcmc;
pub mod oracle;
pub mod path;
pub mod targets;
pub mod tensor;
pub mod train;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
