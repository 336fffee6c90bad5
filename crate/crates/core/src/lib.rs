//! Simulated vision-based proprioception for a three-bellow spherical soft arm.
//!
//! The crate covers the whole loop: a fixed-step plant, procedural rendering of
//! the three internal bellow cameras, a small convolutional regressor trained
//! from scratch, the cascaded pressure/position controller, dataset storage and
//! a multi-rate scheduler that closes the loop on either ground truth or the
//! network's predictions.
//!
//! Data-parallel work (per-sample rendering, per-sample gradients, batch
//! inference) runs on rayon when the `parallel` feature is enabled and falls
//! back to plain iterators otherwise. Both paths produce bit-identical results.

pub mod camera;
pub mod config;
pub mod control;
pub mod dataset;
pub mod error;
pub mod kinematics;
pub mod net;
pub mod par;
pub mod pipeline;
pub mod plant;

pub use error::{Error, Result};
