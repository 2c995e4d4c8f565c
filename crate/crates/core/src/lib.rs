//! Weakly supervised object detection from image-level or point-wise labels.
//!
//! A small fully convolutional network emits one activation map per class.
//! Pooled class scores are trained either with a binary logistic loss or with a
//! cosine loss measured after projecting scores and labels through a fixed
//! positive-PMI label embedding. Points and boxes are read directly off the
//! class activation maps.

pub mod cam;
pub mod dataset;
pub mod detection;
pub mod embedding;
pub mod evaluation;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod pyramid;
pub mod rng;

pub use cam::ClassActivationMap;
pub use error::{Error, Result};
