//! Relative-position gated MLP operators for video recognition.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a define-by-run gradient tape and a
//!   finite-difference checker.
//! - [`rpe`]: learnable relative-position dictionaries and their expansion
//!   into Toeplitz-structured relation matrices.
//! - [`gating`]: the temporal, spatial and joint positional gating units and
//!   the dense gMLP baselines.
//! - [`blocks`]: the gated MLP module and its spatio-temporal compositions.
//! - [`network`]: patch embedding, windowed stages, downsampling, head,
//!   presets and checkpoints.
//! - [`accounting`]: symbolic parameter and FLOP counts.
//! - [`bench`]: operator micro-benchmarks.
//! - [`harness`]: synthetic order-sensitive tasks, training and evaluation.

pub mod accounting;
pub mod bench;
pub mod blocks;
pub mod error;
pub mod gating;
pub mod harness;
pub mod network;
pub mod params;
pub mod rpe;
pub mod tensor;

pub use error::{Error, Result};
