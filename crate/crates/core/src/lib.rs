//! Neural contextual-bandit simulation for ad recommendation.
//!
//! The crate wires together a small CTR network engine ([`nn`]), six
//! posterior-approximation samplers ([`posterior`]), slate-selection policies
//! ([`policy`]), a simulated ad-serving environment ([`env`]), the continuous
//! self-training loop ([`simulation`]), evaluation metrics ([`metrics`]) and
//! the file formats ([`dataio`]).

pub mod config;
pub mod dataio;
pub mod env;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod posterior;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
