//! Multi-view vision-language engine.
//!
//! Adapter-augmented transformer encoders for images and text, token-level
//! fusion of several image views inside the vision encoder, a cosine
//! similarity head, parameter-efficient fine-tuning and the evaluation stack
//! (k-fold CV, ROC/AUC, PR/PRAUC, bootstrap intervals), all on a small
//! reverse-mode tensor engine.

pub mod adapters;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result, TensorError};
pub use tensor::{Real, Tensor};
