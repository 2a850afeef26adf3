//! Timestamp-driven Lidar/Radar fusion at the Lidar rate, with a synthetic
//! world, sweep samplers, a geometric detector and an offset-sweep evaluator.

pub mod calibration;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod pairing;
pub mod scene;
pub mod selfcheck;
pub mod sensors;
pub mod sweep;
pub mod timebase;

pub use error::{Error, Result};
