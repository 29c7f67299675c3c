//! Building blocks for studying and removing grid artifacts in
//! gradient-based saliency maps of convolutional networks.
//!
//! The crate provides a small reverse-mode tape over NCHW tensors, a compact
//! residual classifier, three artifact-removal strategies (a trained bilinear
//! surrogate plus two phase-averaging hooks), the usual gradient attribution
//! methods, and the evaluation metrics used to compare them.

pub mod checkpoint;
pub mod dataset;
pub mod denoise;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod render;
pub mod report;
pub mod rng;
pub mod saliency;
pub mod stns;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
