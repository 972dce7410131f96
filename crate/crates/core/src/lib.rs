//! Deep metric learning for person re-identification with a part-based
//! siamese convolutional network.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`layers`]: dense `f64` tensors and the five layer
//!   primitives (convolution, max pooling, cross-channel normalization, ReLU,
//!   fully connected), each with a backward pass.
//! - [`scnn`]: the three-part CNN and its siamese parameter sets.
//! - [`pairwise`]: connection functions, pair masks, binomial deviance and
//!   Fisher costs, and their matrix-form gradients.
//! - [`trainer`]: mini-batch SGD with momentum and weight decay.
//! - [`dataio`]: manifests, preprocessing, mirroring, part cropping, split
//!   protocols and a synthetic dataset generator.
//! - [`eval`]: score tables, mirror and multi-model fusion, CMC curves.
//! - [`gradcheck`]: finite-difference verification suites.
//! - [`filters`]: first-layer filter grid rendering.
//! - [`cli`]: the `siamnet` command-line front end.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod filters;
pub mod gradcheck;
pub mod layers;
pub mod pairwise;
pub mod scnn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use pairwise::{CostFunction, PairMasks};
pub use scnn::{Branch, NetworkConfig, NetworkParams, PartStack, SharingMode};
pub use tensor::Tensor;
