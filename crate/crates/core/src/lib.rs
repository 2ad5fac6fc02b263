//! Adversarial camouflage of images against co-salient object detection.
//!
//! The attack perturbs a target image with a smooth multiplicative exposure
//! field (a log-domain polynomial over locally offset coordinates) and a
//! bounded additive noise, both tuned by momentum sign-gradient ascent so
//! that multi-layer convolutional features of the image lose their spatial
//! contrast, optionally jointly with reference images. A built-in
//! cluster-based co-saliency detector and the usual saliency metrics
//! measure the effect.

pub mod attack;
pub mod detector;
pub mod error;
pub mod exposure;
pub mod features;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod objective;
pub mod raster;
pub mod rng;

pub use error::{Error, Result};
