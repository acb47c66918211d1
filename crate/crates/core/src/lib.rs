//! Train small convolutional classifiers with cross-entropy, supervised
//! contrastive or triplet objectives, explain them with Grad-CAM and
//! Eigen-CAM, and score the explanations.

pub mod data;
pub mod error;
pub mod explain;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
