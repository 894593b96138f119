//! Multivariate time-series forecasting with two-stage cross-patch attention.
//!
//! Each variable's lookback window is cut into overlapping patches, embedded
//! as tokens, and passed through a stack of sensor attention blocks. A block
//! first compresses all tokens into one vector per variable (queries are the
//! last patch of each variable) and then lets every token attend over those
//! compressed vectors, which keeps the cost linear in the number of patches.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode tape, Adam, finite-difference checks
//! - [`patching`]: patch extraction, positional encoding, embedding
//! - [`attention`]: multi-head attention, the two stages and ablation blocks
//! - [`model`]: the full forecaster and checkpoints
//! - [`training`]: losses, metrics, training loop, multi-seed protocol
//! - [`data`]: CSV loading, chronological splits, windows, synthetic data
//! - [`laglab`]: Pearson-based lag statistics between variables
//! - [`bench`]: wall-clock and allocation scaling measurements

pub mod attention;
pub mod bench;
pub mod data;
mod error;
pub mod exec;
pub mod laglab;
pub mod model;
pub mod numerics;
pub mod patching;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
