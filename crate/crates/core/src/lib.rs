//! Speaker-identity sanitization of frame-level feature representations.
//!
//! A speaker-ID model provides SmoothGrad saliency maps, a Transformer
//! estimator learns to predict them, and the sanitizer adds Laplace noise to
//! the top-k% predicted positions.

// `!(x >= 0.0)` is used on purpose throughout: it rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod saliency;
pub mod sanitizer;
pub mod synth;
pub mod tensor;

pub use error::{Category, Error, Result};
pub use tensor::Tensor;
