//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::nn::registry::{BoundParams, ParameterRegistry};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments per trainable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState<T = f32> {
    pub step: u64,
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new() -> Self {
        AdamWState {
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// Gradients of named parameters.
pub type ParamGrads<T> = IndexMap<String, Tensor<T>>;

/// Pulls the gradient of every trainable parameter out of `grads`.
pub fn collect_param_grads<T: Real>(
    registry: &ParameterRegistry<T>,
    bound: &BoundParams,
    grads: &mut Gradients<T>,
) -> Result<ParamGrads<T>> {
    let mut out = IndexMap::new();
    for (name, p) in registry.iter() {
        if !p.trainable {
            continue;
        }
        let var = bound.get(name)?;
        let g = grads
            .take(var)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        out.insert(name.to_string(), g);
    }
    Ok(out)
}

/// One AdamW update of every trainable parameter. Decay is decoupled:
/// `p -= lr * wd * p` before the moment step. Frozen parameters are never
/// touched, whatever `grads` holds for them.
pub fn adamw_step<T: Real>(
    registry: &mut ParameterRegistry<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, p) in registry.iter() {
        if p.trainable {
            match grads.get(name) {
                Some(g) if g.shape() == p.tensor.shape() => {}
                Some(g) => {
                    return Err(Error::ParameterShape {
                        name: name.to_string(),
                        expected: p.tensor.shape().to_vec(),
                        found: g.shape().to_vec(),
                    })
                }
                None => return Err(Error::MissingGradient(name.to_string())),
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1t, b2t, one) = (c(b1), c(b2), T::one());
    let decay = c(1.0 - lr * cfg.weight_decay);
    let step_size = c(lr / bc1);
    let bc2_sqrt = c(bc2.sqrt());
    let eps = c(cfg.eps);
    for (name, p) in registry.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = grads[name].data();
        let n = g.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= decay;
            *mi = b1t * *mi + (one - b1t) * gi;
            *vi = b2t * *vi + (one - b2t) * gi * gi;
            *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

/// Learning-rate schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr` at the last
/// epoch.
pub fn lr_at(epoch: usize, s: &Schedule) -> Result<f64> {
    if epoch >= s.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} is outside the schedule of {} epochs",
            s.epochs
        )));
    }
    if epoch < s.warmup_epochs {
        return Ok(s.base_lr * (epoch + 1) as f64 / s.warmup_epochs as f64);
    }
    let span = (s.epochs - 1).saturating_sub(s.warmup_epochs).max(1);
    let progress = (epoch - s.warmup_epochs) as f64 / span as f64;
    Ok(s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule {
            epochs: 400,
            warmup_epochs: 10,
            base_lr: 5e-4,
            min_lr: 1e-5,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(lr_at(9, &s).unwrap(), 5e-4);
        assert_eq!(lr_at(10, &s).unwrap(), 5e-4);
        assert!((lr_at(399, &s).unwrap() - 1e-5).abs() < 1e-18);
        assert!(lr_at(400, &s).is_err());
        // decay spans epochs 10..=399, midpoint 204.5; use an odd span instead
        let s = Schedule { epochs: 21, warmup_epochs: 10, ..sched() };
        assert!((lr_at(15, &s).unwrap() - (5e-4 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(lr_at(0, &s).unwrap(), 5e-5);
    }

    fn one_param(v: f32, trainable: bool) -> ParameterRegistry<f32> {
        let mut r = ParameterRegistry::new();
        r.insert("w", Tensor::new([1], vec![v]).unwrap(), trainable).unwrap();
        r
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut r = one_param(0.5, true);
        let mut grads = ParamGrads::new();
        grads.insert("w".into(), Tensor::new([1], vec![1.0]).unwrap());
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut r, &grads, &mut AdamWState::new(), 1e-3, &cfg).unwrap();
        let w = r.tensor("w").unwrap().data()[0];
        assert!((w - (0.5 - 1e-3)).abs() < 1e-7, "{w}");
    }

    #[test]
    fn zero_grad_no_decay_is_noop_and_decay_shrinks() {
        let mut r = one_param(0.5, true);
        let mut grads = ParamGrads::new();
        grads.insert("w".into(), Tensor::zeros([1]).unwrap());
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut r, &grads, &mut AdamWState::new(), 1e-2, &cfg).unwrap();
        assert_eq!(r.tensor("w").unwrap().data()[0], 0.5);
        adamw_step(&mut r, &grads, &mut AdamWState::new(), 1e-2, &AdamWConfig::default()).unwrap();
        assert!(r.tensor("w").unwrap().data()[0] < 0.5);
    }

    #[test]
    fn frozen_parameter_does_not_move() {
        let mut r = one_param(0.5, false);
        let mut grads = ParamGrads::new();
        grads.insert("w".into(), Tensor::new([1], vec![3.0]).unwrap());
        adamw_step(&mut r, &grads, &mut AdamWState::new(), 1e-1, &AdamWConfig::default()).unwrap();
        assert_eq!(r.tensor("w").unwrap().data()[0], 0.5);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut r = one_param(0.5, true);
        let err = adamw_step(&mut r, &ParamGrads::new(), &mut AdamWState::new(), 1e-3, &AdamWConfig::default());
        assert!(matches!(err, Err(Error::MissingGradient(n)) if n == "w"));
    }
}
