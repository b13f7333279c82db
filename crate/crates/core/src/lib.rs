//! Depth-guided multimodal fusion for semantic segmentation at desk scale.
//!
//! - [`scenegen`]: synthetic multimodal scenes, sensor densification, file formats.
//! - [`fusenet`]: the fusion network (shared backbone, depth branch, condition
//!   branch, depth-guided windowed cross-attention, segmentation head).
//! - [`losskit`]: the multi-task loss stack and its brute-force oracles.
//! - [`harness`]: optimisation, metrics, ablations, gradient checks and the CLI.

pub mod cli;
pub mod config;
pub mod error;
pub mod fusenet;
pub mod harness;
pub mod losskit;
pub mod scenegen;

pub use config::RunConfig;
pub use error::{Error, Result};
