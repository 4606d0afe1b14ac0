//! Ensembled soft Q-learning with bootstrapped self-attention critics.

pub mod actor;
pub mod archive;
pub mod critic;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod harness;
pub mod layers;
pub mod numcore;
pub mod replay;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
