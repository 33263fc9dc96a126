//! Probabilistic multiview motion capture from 2D keypoints.

pub mod ad;
pub mod calibration;
pub mod camera;
pub mod chain;
pub mod error;
pub mod gait;
pub mod geometry;
pub mod inference;
pub mod initialize;
pub mod observation;
pub mod stats;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
