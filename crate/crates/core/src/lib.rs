//! Desk-scale rotated-text detection by sparse feature sampling and
//! transformer grouping.
//!
//! The crate trains and runs a small end-to-end detector: a toy FPN backbone,
//! a score-based multi-scale feature sampler, a transformer encoder that
//! groups the sampled tokens, Hungarian-matched set losses built on a
//! scale-invariant Gaussian-Wasserstein box distance, and NMS-free decoding.
//! Everything runs on the CPU in f64 against synthetic scenes.

pub mod backbone;
pub mod criterion;
pub mod error;
pub mod geometry;
pub mod grouper;
pub mod nn;
pub mod sampler;

pub use error::{Error, Result};
pub use geometry::RotatedBox;
