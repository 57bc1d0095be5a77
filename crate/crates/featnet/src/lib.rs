//! Modular image classification with per-cell feedforward networks.
//!
//! A model is a grid of small nets indexed by (feature channel, label
//! module, submodule). Each net is trained to zero error on its own slice
//! of the data; classification is a majority vote across the grid.

pub mod dataset;
pub mod error;
pub mod features;
pub mod fnn;
pub mod synth;
pub mod training;
pub mod util;

pub use error::{Error, Result};
