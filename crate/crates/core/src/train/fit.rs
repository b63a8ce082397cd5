//! The fine-tuning loop and batched evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{apply_freeze_policy, FreezeMode, FreezePolicy};
use crate::autograd::{Graph, Var};
use crate::data::Case;
use crate::error::{Error, Result};
use crate::model::ClipModel;
use crate::nn::registry::{stream_rng, GradMode, ParameterRegistry};
use crate::objective::{graph_image_ce_loss, predict, similarity_logits, CasePrediction};
use crate::tensor::Tensor;
use crate::text::Tokenized;
use crate::train::augment::{augment, prepare_eval, AugmentConfig, Normalization};
use crate::train::metrics::accuracy;
use crate::train::optim::{adamw_step, collect_param_grads, lr_at, AdamWConfig, AdamWState, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub mode: FreezeMode,
    /// Also train the projection heads in `adapters_only` mode.
    pub train_heads: bool,
    pub augment: AugmentConfig,
    /// Stop once validation accuracy reaches this value.
    pub early_stop_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 8,
            base_lr: 5e-4,
            warmup_epochs: 10,
            min_lr: 1e-5,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            mode: FreezeMode::AdaptersOnly,
            train_heads: false,
            augment: AugmentConfig::default(),
            early_stop_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.base_lr < 0.0 || self.min_lr < 0.0 || self.weight_decay < 0.0 {
            return bad("learning rates and weight decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            base_lr: self.base_lr,
            min_lr: self.min_lr,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        FreezePolicy {
            mode: self.mode,
            train_heads: self.train_heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Epoch with the highest validation accuracy; ties go to the earlier.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_params: ParameterRegistry<f32>,
    pub history: Vec<EpochRecord>,
    pub normalization: Normalization,
}

/// Loss and gradient step over one batch; returns the batch loss.
fn train_step(
    model: &mut ClipModel<f32>,
    batch: &[Vec<Tensor<f32>>],
    labels: &[usize],
    pair: &[Tokenized; 2],
    state: &mut AdamWState<f32>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, GradMode::Trainable)?;
    let texts = b.encode_class_texts(&mut g, pair)?;
    let mut rows = Vec::with_capacity(batch.len());
    for views in batch {
        let vars: Vec<Var> = views.iter().map(|t| g.constant(t.clone())).collect();
        rows.push(b.encode_case(&mut g, &model.config, &vars)?);
    }
    let images = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
    let logits = similarity_logits(&mut g, images, texts, &model.config.head)?;
    let loss = graph_image_ce_loss(&mut g, logits, labels)?;
    let value = g.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(Error::Tensor(crate::error::TensorError::NonFinite { op: "loss" }));
    }
    let mut grads = g.backward(loss)?;
    let pg = collect_param_grads(&model.params, &b.params, &mut grads)?;
    drop(g);
    adamw_step(&mut model.params, &pg, state, lr, cfg)?;
    Ok(value)
}

/// Class predictions for `cases` against a prompt pair, with evaluation
/// preprocessing applied.
pub fn predict_cases(
    model: &ClipModel<f32>,
    cases: &[Case],
    pair: [&str; 2],
    augment_cfg: &AugmentConfig,
    norm: &Normalization,
) -> Result<Vec<CasePrediction>> {
    let t_neg = model.text_embedding(pair[0])?;
    let t_pos = model.text_embedding(pair[1])?;
    cases
        .iter()
        .map(|c| {
            let views = prepare_eval(&c.images, augment_cfg, norm);
            predict(&model.image_embedding(&views)?, &t_neg, &t_pos, &model.config.head)
        })
        .collect()
}

pub fn evaluate_accuracy(
    model: &ClipModel<f32>,
    cases: &[Case],
    pair: [&str; 2],
    augment_cfg: &AugmentConfig,
    norm: &Normalization,
) -> Result<f64> {
    let preds = predict_cases(model, cases, pair, augment_cfg, norm)?;
    let labels: Vec<usize> = cases.iter().map(|c| c.label).collect();
    accuracy(&preds.iter().map(|p| p.label).collect::<Vec<_>>(), &labels)
}

/// Fine-tunes `model` on `train`, scoring `val` after every epoch with the
/// training prompts. `model` ends holding the last epoch's weights; the best
/// epoch's weights are returned. Augmentation draws, batch order and every
/// recorded number depend only on the inputs and `cfg.seed`.
pub fn fit(
    model: &mut ClipModel<f32>,
    train: &[Case],
    val: &[Case],
    cfg: &TrainConfig,
    pair: [&str; 2],
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "fit needs non-empty sets, got {} training and {} validation cases",
            train.len(),
            val.len()
        )));
    }
    let policy = cfg.freeze_policy();
    apply_freeze_policy(&mut model.params, policy);
    model.config.freeze = policy;

    let norm = if cfg.augment.normalize {
        Normalization::fit(train.iter().flat_map(|c| c.images.iter()))?
    } else {
        Normalization::IDENTITY
    };
    let tokens = model.tokenize_pair(pair)?;
    let schedule = cfg.schedule();
    let adamw = cfg.adamw();
    let mut state = AdamWState::new();
    let mut shuffle_rng = stream_rng(cfg.seed, "train/shuffle");
    let mut augment_rng = stream_rng(cfg.seed, "train/augment");

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParameterRegistry<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &schedule)?;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<Tensor<f32>>> = chunk
                .iter()
                .map(|&i| augment(&train[i].images, &mut augment_rng, &cfg.augment, &norm))
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let loss = train_step(model, &batch, &labels, &tokens, &mut state, lr, &adamw)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let val_accuracy = evaluate_accuracy(model, val, pair, &cfg.augment, &norm)?;
        let train_loss = loss_sum / train.len() as f64;
        log::info!("epoch {epoch}: lr {lr:.3e} loss {train_loss:.4} val_acc {val_accuracy:.4}");
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|b| val_accuracy > b.1) {
            best = Some((epoch, val_accuracy, model.params.clone()));
        }
        if cfg.early_stop_accuracy.is_some_and(|t| val_accuracy >= t) {
            break;
        }
    }
    let (best_epoch, best_val_accuracy, best_params) = best.expect("at least one epoch ran");
    Ok(FitResult {
        best_epoch,
        best_val_accuracy,
        best_params,
        history,
        normalization: norm,
    })
}
