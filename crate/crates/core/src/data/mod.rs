//! Images, manifests, synthetic cases, label prompts and checkpoints.

pub mod checkpoint;
pub mod image;
pub mod manifest;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::PromptSet;

/// A preprocessed case: one `[H, W, C]` tensor per view on the `[0, 255]`
/// scale, in fusion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub label: usize,
    pub images: Vec<Tensor<f32>>,
}

/// Training prompt for a label: 0 is negative, 1 positive.
pub fn label_text(label: usize, prompts: &PromptSet) -> Result<&str> {
    match label {
        0 => Ok(&prompts.train_negative),
        1 => Ok(&prompts.train_positive),
        l => Err(Error::Data(format!("label {l} is not binary"))),
    }
}
