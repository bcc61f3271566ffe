//! Training, evaluation, ablation and enhancement on top of `evlight-core`.

pub mod ablate;
pub mod adam;
pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod train;

pub use error::{Error, Result};
