//! Multi-camera 3D multi-object tracking with track queries.
//!
//! The crate bundles a synthetic driving-scene simulator, a small
//! query-based tracking model with a custom reverse-mode autodiff core,
//! Kalman-filter baselines, and a tracking-metrics suite, all behind one CLI.

pub mod baselines;
pub mod cli;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod records;
pub mod sim;
pub mod tensor;
pub mod tracker;

pub use error::{Error, Result};
