//! Part-prototype image classifiers and their interpretability metrics.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: `f64` tensors, a reverse-mode tape, conv/pool kernels and Adam.
//! - [`synthdata`]: a synthetic dataset of part-annotated "creature" images.
//! - [`model`]: the prototype network with score-aggregation or fully-connected head.
//! - [`losses`]: training objectives, including shallow-deep structure alignment.
//! - [`trainer`]: the warm-up + joint training schedule.
//! - [`metrics`]: consistency and stability scores plus ablation diagnostics.
//! - [`cli`]: the `partproto` command-line driver.

pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{AdamState, Tape, Tensor, Var};

/// Version string embedded in every artifact the crate writes.
pub const TOOL_VERSION: &str = concat!("partproto ", env!("CARGO_PKG_VERSION"));
