//! Minimal dense-array engine with reverse-mode differentiation and an
//! independent finite-difference certifier.
//!
//! Everything downstream builds on three pieces: [`DenseArray`] (the sole
//! numeric carrier), [`Tape`] (a dynamic graph rebuilt per step), and
//! [`finite_diff_check`] (the gradient oracle). 64-bit floats throughout.

mod array;
mod check;
mod tape;

pub use array::{broadcast_binary, broadcast_shape, reduce_to_shape, DenseArray};
pub use check::{finite_diff_check, CheckReport, CoordFailure, MAX_COORDS};
pub use tape::{logsumexp, sigmoid_scalar, Gradients, NodeId, Tape, LOG_CLAMP};
