//! Tightly-coupled dense RGB-D-inertial tracking and surfel mapping.
//!
//! The tracker jointly estimates pose, velocity, IMU biases and gravity
//! direction of the current and previous camera frames by minimizing a
//! photometric + point-to-plane ICP + preintegrated-IMU cost, then
//! marginalizes the previous state into a prior. The surfel map is kept
//! consistent by a deformation graph with a gravity-alignment term.

// NaN-rejecting comparisons and index loops over fixed-size blocks are intended.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod camera;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod imu;
pub mod io;
pub mod manifold;
pub mod map;
pub mod par;
pub mod pipeline;
pub mod residuals;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
