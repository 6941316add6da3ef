//! Collaborative semi-supervised segmentation of LiDAR point clouds with
//! students trained on different representations of the same scans.

pub mod cda;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod mixing;
pub mod reliability;
pub mod repr;
pub mod rng;
pub mod students;
pub mod trainer;

pub use error::{Error, Result};
