//! Dense-matrix reverse-mode differentiation.
//!
//! Forward values are computed eagerly as operations are recorded on a
//! [`Tape`]; [`Tape::backward`] then sweeps the tape once in reverse order.
//! Trainable weights live in a [`ParamStore`] that owns gradients and Adam
//! moments.

mod matrix;
mod params;
mod tape;

pub use matrix::Matrix;
pub use params::{AdamConfig, ParamId, ParamSnapshot, ParamStore, SnapshotEntry, SNAPSHOT_FORMAT};
pub use tape::{Gradients, Tape, Unary, Var};


/// Additive pre-softmax sentinel for masked attention pairs.
pub const MASK_SENTINEL: f64 = -1e9;
