//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Tensors are rank 1..=3, contiguous, and generic over [`Scalar`] (`f32` or
//! `f64`). Every forward operation validates shapes, checks its output for
//! non-finite values, and (when gradients are enabled) records enough
//! information to backpropagate. Buffer allocations are counted by a
//! thread-local [`meter`] so benchmarks can report peak algorithmic memory.

mod core;
pub mod meter;
mod scalar;
mod store;

pub use self::core::{grad_enabled, NoGradGuard, Tensor};
pub use self::scalar::Scalar;
pub use self::store::{finite_diff_check, AdamParams, FdReport, ParamStore};
