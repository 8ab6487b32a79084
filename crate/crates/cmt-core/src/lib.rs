//! Desk-scale library behind the `cmt` CLI: a dense f64 tensor with
//! reverse-mode gradients and MAC instrumentation, beta-sampled image fusion
//! augmentation, windowed two-level self-attention with an analytic cost
//! model, the full conv + encoder + sigmoid-head classifier, its training
//! recipe, the multi-label metric suite, and Grad-CAM heatmaps.

pub mod attention;
pub mod error;
pub mod ffa;
pub mod gradcheck;
pub mod imageio;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
