//! Auto-encoder objectives with a prior constraint on the aggregate
//! (mini-batch) posterior rather than each per-sample posterior, plus the
//! standard per-sample baselines, Monte-Carlo oracles for every analytic
//! approximation, and desk-scale experiments on synthetic sine waves and
//! IDX-format image data.
//!
//! Layout:
//! - [`autodiff`]: dense arrays, the Wengert tape, the finite-difference
//!   gradient certifier.
//! - [`gaussian`]: diagonal-Gaussian posteriors, the aggregate mixture, the
//!   analytic KL upper bound and its Monte-Carlo oracle.
//! - [`objective`]: the three training objectives and the full pairwise
//!   reconstruction oracle.
//! - [`model`]: fully-connected encoder/decoder with checkpointing.
//! - [`data`]: sine-wave generator, IDX loader/writer, synthetic digits.
//! - [`trainer`]: Adam/SGD mini-batch training loop, evaluation, metrics.
//! - [`report`]: SVG scatter/curve/reconstruction figures from metrics.
//! - [`cli`]: the `wise-ale` command-line entry point.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod model;
pub mod objective;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
