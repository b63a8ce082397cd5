//! Cosine similarity head, temperature-scaled class probabilities and the
//! image-logit cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Class index of the positive (abnormal) label; negative is 0.
pub const POSITIVE: usize = 1;
pub const NEGATIVE: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipHeadConfig {
    /// Logits are `cos / temperature`. Not trained.
    pub temperature: f64,
}

impl Default for ClipHeadConfig {
    fn default() -> Self {
        ClipHeadConfig { temperature: 0.07 }
    }
}

impl ClipHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "head: temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    /// `[negative, positive]`.
    pub logits: [f64; 2],
    pub probabilities: [f64; 2],
    pub label: usize,
}

impl CasePrediction {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
        let s = e[0] + e[1];
        let probabilities = [e[0] / s, e[1] / s];
        // a knife-edge tie is called negative
        let label = if logits[1] > logits[0] { POSITIVE } else { NEGATIVE };
        CasePrediction {
            logits,
            probabilities,
            label,
        }
    }

    pub fn positive_probability(&self) -> f64 {
        self.probabilities[POSITIVE]
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Tensor(crate::error::TensorError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        }));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb).max(COSINE_EPS)).clamp(-1.0, 1.0))
}

/// Class probabilities of an image embedding against the two class text
/// embeddings.
pub fn predict(image: &[f64], t_neg: &[f64], t_pos: &[f64], cfg: &ClipHeadConfig) -> Result<CasePrediction> {
    let s_neg = cosine_similarity(image, t_neg)?;
    let s_pos = cosine_similarity(image, t_pos)?;
    Ok(CasePrediction::from_logits([
        s_neg / cfg.temperature,
        s_pos / cfg.temperature,
    ]))
}

/// Mean of `-ln p_label` over the batch.
pub fn image_ce_loss(predictions: &[CasePrediction], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Data("cross-entropy over an empty batch".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in predictions.iter().zip(labels) {
        if y > 1 {
            return Err(Error::Data(format!("label {y} is not binary")));
        }
        // log-softmax for accuracy near p = 1
        let m = p.logits[0].max(p.logits[1]);
        let lse = m + ((p.logits[0] - m).exp() + (p.logits[1] - m).exp()).ln();
        total += lse - p.logits[y];
    }
    Ok(total / predictions.len() as f64)
}

/// Differentiable `[B, 2]` logits from image rows `[B, D_e]` and the class
/// text rows `[2, D_e]` (negative first).
pub fn similarity_logits<T: Real>(
    g: &mut Graph<T>,
    images: Var,
    texts: Var,
    cfg: &ClipHeadConfig,
) -> Result<Var> {
    let i = g.l2_normalize(images, COSINE_EPS)?;
    let t = g.l2_normalize(texts, COSINE_EPS)?;
    let tt = g.transpose(t)?;
    let cos = g.matmul(i, tt)?;
    Ok(g.scale(cos, 1.0 / cfg.temperature)?)
}

/// Mean image-side cross-entropy over `[B, 2]` logits; no text-side term.
pub fn graph_image_ce_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Data("cross-entropy over an empty batch".into()));
    }
    Ok(g.cross_entropy(logits, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_basics() {
        let a = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn tie_is_negative_and_half() {
        let p = predict(&[1.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], &ClipHeadConfig::default()).unwrap();
        assert_eq!(p.probabilities, [0.5, 0.5]);
        assert_eq!(p.label, NEGATIVE);
    }

    #[test]
    fn decisive_positive_probability() {
        let p = predict(&[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], &ClipHeadConfig::default()).unwrap();
        let expect = 1.0 / (1.0 + (-1.0f64 / 0.07).exp());
        assert!((p.positive_probability() - expect).abs() < 1e-15);
        assert!((p.positive_probability() - (1.0 - 6.2e-7)).abs() < 1e-8);
        assert_eq!(p.label, POSITIVE);
    }

    #[test]
    fn uniform_loss_is_ln2() {
        let p = CasePrediction::from_logits([0.3, 0.3]);
        assert!((image_ce_loss(&[p], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(image_ce_loss(&[], &[]).is_err());
        let sure = CasePrediction::from_logits([-40.0, 40.0]);
        assert!(image_ce_loss(&[sure], &[1]).unwrap() < 1e-30);
    }

    #[test]
    fn graph_logits_match_scalar_path() {
        let cfg = ClipHeadConfig::default();
        let img = [[0.2, -0.4, 0.9], [1.5, 0.1, -0.3]];
        let txt = [[0.5, 0.5, 0.0], [-0.1, 0.3, 0.8]];
        let mut g = Graph::<f64>::new();
        let iv = g.constant(Tensor::new([2, 3], img.concat()).unwrap());
        let tv = g.constant(Tensor::new([2, 3], txt.concat()).unwrap());
        let logits = similarity_logits(&mut g, iv, tv, &cfg).unwrap();
        for (b, row) in img.iter().enumerate() {
            let p = predict(row, &txt[0], &txt[1], &cfg).unwrap();
            for k in 0..2 {
                assert!((g.value(logits).at(&[b, k]) - p.logits[k]).abs() < 1e-9);
            }
        }
        let loss = graph_image_ce_loss(&mut g, logits, &[0, 1]).unwrap();
        let preds: Vec<_> = img
            .iter()
            .map(|r| predict(r, &txt[0], &txt[1], &cfg).unwrap())
            .collect();
        let expect = image_ce_loss(&preds, &[0, 1]).unwrap();
        assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-9);
    }
}
