//! Tool shape and trajectory optimization through a learned forward model.
//!
//! A convolutional encoder-decoder predicts the task image that results from
//! sweeping a pixel-represented tool along a joint-space trajectory. Tool
//! pixels and trajectory are then refined by backpropagating the task loss
//! through the frozen model. A deterministic 2D quasi-static push simulator
//! stands in for the robot for data collection and evaluation.

pub mod dataset;
pub mod error;
pub mod harness;
pub mod imgcore;
pub mod optimizer;
pub mod sim2d;
pub mod toolnet;

pub use error::{Error, Result};
pub use imgcore::{BinaryImage, GrayImage};
