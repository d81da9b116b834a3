//! Few-shot semantic segmentation with latent-class mining.
//!
//! The pipeline: generate or load a dataset, mine pseudo masks for latent
//! classes with a frozen encoder ([`miner`]), train the encoder jointly on
//! episodes and pseudo masks ([`trainer`]), then evaluate 1-way episodes
//! with optional prototype rectification ([`rectifier`], [`evaluator`]).

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod evaluator;
pub mod grid;
pub mod miner;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod protomath;
pub mod rectifier;
pub mod synth;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
