//! Streaming causal spatio-temporal transformer for 4D geometry.
//!
//! The crate bundles a small reverse-mode autodiff tensor library, the
//! spatial / temporal-causal / cached-memory attention operators, the
//! encoder-decoder model with camera, geometry and track heads, the training
//! losses and distillation trainer, a ray-cast synthetic scene generator and
//! the evaluation metrics.

pub mod attention;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Real, Tensor};
