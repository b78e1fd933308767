//! Core algorithms for an oblique-view vision transformer: a small
//! reverse-mode autodiff engine, viewing geometry, keystone pair warping,
//! windowed attention with depthwise frequency enhancement, masked-image and
//! contrastive objectives, bottleneck adapters, and the training loop.

pub mod adapter;
pub mod checkpoint;
pub mod error;
pub mod freq;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod model;
pub mod objectives;
pub mod plot;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, ErrorKind, Result};
pub use graph::{Gradients, Graph, Var};
pub use image::Image;
pub use tensor::Tensor;
