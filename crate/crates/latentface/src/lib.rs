//! Command-line pipeline for LatentFace: corpus I/O, checkpoints, training
//! and evaluation commands built on `latentface-core`.

pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod imageio;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
