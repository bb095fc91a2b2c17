//! RetMIL: hierarchical retentive multiple-instance learning over
//! pre-extracted feature sequences.
//!
//! A whole-slide bag arrives as an N x d feature sequence. The pipeline
//! splits it into fixed-length subsequences, updates each with a multi-head
//! retention layer, aggregates per-subsequence features with gated attention
//! pooling, repeats retention + pooling at the global level, and classifies
//! the resulting slide embedding. The crate also ships the numeric substrate
//! (tensors with reverse-mode autodiff and an allocation meter), synthetic
//! MIL task generation, evaluation metrics, a scaling benchmark against a
//! softmax-attention baseline, and a CLI wiring it all together.

pub mod bench;
pub mod check;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod pooling;
pub mod retention;
pub mod sequencer;
pub mod tensor;

pub use error::{Error, Result};
