//! Dense visual alignment of image collections supervised by a generator.

pub mod checkpoint;
pub mod config;
pub mod correspond;
pub mod datapipe;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod keypoints;
pub mod nn;
pub mod par;
pub mod perceptual;
pub mod stn;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
