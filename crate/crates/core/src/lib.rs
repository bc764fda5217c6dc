//! Semantic segmentation trained from per-image class proportions.

pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod io;
pub mod nn;
pub mod annotate;
pub mod cli;
pub mod objectives;
pub mod sweeps;
pub mod train;
pub mod types;

pub use error::{Error, Result};
