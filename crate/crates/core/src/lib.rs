//! Radar-visual-inertial odometry on an iterated error-state Kalman filter.

pub mod cli_io;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod filter;
pub mod geometry;
pub mod propagation;
pub mod radar;
pub mod simulator;
pub mod vision;
pub mod voxel_map;

pub use error::{Error, Result};
