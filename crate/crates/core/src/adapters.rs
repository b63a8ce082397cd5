//! Bottleneck adapters, their injection into transformer stacks, the
//! parameter-efficient freeze policy and the parameter audit.
//!
//! An adapter maps `x -> x + up(gelu(down(x)))` with `down: D -> D/r` and
//! `up: D/r -> D`. With a zero-initialized up-projection it is exactly the
//! identity, so injecting adapters into a trained encoder leaves its outputs
//! untouched until fine-tuning moves them.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::layers::linear;
use crate::nn::registry::{
    init_tensor, BoundParams, Init, ParamDesc, ParamLayout, ParameterRegistry, INIT_STD,
};
use crate::tensor::Real;

/// Where adapters go inside each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    MsaOnly,
    MlpOnly,
    #[default]
    Both,
}

impl Placement {
    pub fn slots(self) -> &'static [u8] {
        match self {
            Placement::MsaOnly => &[1],
            Placement::MlpOnly => &[2],
            Placement::Both => &[1, 2],
        }
    }
}

/// Adapters sit after the sublayer's residual sum. No parallel variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    #[default]
    SequentialAfter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub bottleneck_ratio: usize,
    pub placement: Placement,
    pub arrangement: Arrangement,
    pub zero_init_up: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            bottleneck_ratio: 32,
            placement: Placement::Both,
            arrangement: Arrangement::SequentialAfter,
            zero_init_up: true,
        }
    }
}

impl AdapterConfig {
    /// Bottleneck width for a host of width `width`.
    pub fn bottleneck(&self, width: usize) -> Result<usize> {
        let r = self.bottleneck_ratio;
        if r == 0 || width % r != 0 || width / r == 0 {
            return Err(Error::AdapterDivisibility { width, ratio: r });
        }
        Ok(width / r)
    }
}

/// Closed-form size of one adapter: `2*D*d + d + D`.
pub fn adapter_param_count(width: usize, bottleneck: usize) -> usize {
    2 * width * bottleneck + bottleneck + width
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterParams {
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

impl AdapterParams {
    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(AdapterParams {
            down_w: p.get(&format!("{prefix}.down.weight"))?,
            down_b: p.get(&format!("{prefix}.down.bias"))?,
            up_w: p.get(&format!("{prefix}.up.weight"))?,
            up_b: p.get(&format!("{prefix}.up.bias"))?,
        })
    }

    /// `None` when no adapter was injected at `prefix`.
    pub fn bind_optional(p: &BoundParams, prefix: &str) -> Result<Option<Self>> {
        if p.has(&format!("{prefix}.down.weight")) {
            Self::bind(p, prefix).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// `x + up(gelu(down(x)))`.
pub fn adapter_forward<T: Real>(g: &mut Graph<T>, x: Var, p: &AdapterParams) -> Result<Var> {
    let width = *g.shape(x).last().unwrap_or(&0);
    if g.shape(p.down_w).first() != Some(&width) {
        return Err(Error::ParameterShape {
            name: "adapter.down.weight".into(),
            expected: vec![width],
            found: g.shape(p.down_w).to_vec(),
        });
    }
    let h = linear(g, x, p.down_w, Some(p.down_b))?;
    let h = g.gelu(h)?;
    let h = linear(g, h, p.up_w, Some(p.up_b))?;
    Ok(g.add(x, h)?)
}

/// A stack of transformer blocks that adapters can be injected into.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostStack {
    /// e.g. `vision.local`; blocks are `{prefix}.{n}`.
    pub prefix: String,
    pub depth: usize,
    pub width: usize,
    /// Random streams are keyed `{key_base}.{n + key_offset}`, so blocks at
    /// the same overall depth draw the same values whichever stack holds them.
    pub key_base: String,
    pub key_offset: usize,
}

impl HostStack {
    pub fn new(prefix: impl Into<String>, depth: usize, width: usize) -> Self {
        let prefix = prefix.into();
        HostStack {
            key_base: prefix.clone(),
            prefix,
            depth,
            width,
            key_offset: 0,
        }
    }

    pub fn with_key(mut self, base: impl Into<String>, offset: usize) -> Self {
        self.key_base = base.into();
        self.key_offset = offset;
        self
    }
}

/// Descriptors of every adapter the config places in `hosts`. Names follow
/// `{prefix}.{n}.adapter{1,2}.{down,up}.{weight,bias}`.
pub fn adapter_layout(hosts: &[HostStack], cfg: &AdapterConfig) -> Result<Vec<ParamDesc>> {
    let mut out = Vec::new();
    for host in hosts {
        if host.depth == 0 {
            continue;
        }
        let d = cfg.bottleneck(host.width)?;
        for n in 0..host.depth {
            for slot in cfg.placement.slots() {
                let base = format!("{}.{n}.adapter{slot}", host.prefix);
                let key = format!("{}.{}.adapter{slot}", host.key_base, n + host.key_offset);
                let up_init = if cfg.zero_init_up {
                    Init::Zeros
                } else {
                    Init::TruncNormal { std: INIT_STD }
                };
                let parts = [
                    ("down.weight", vec![host.width, d], Init::TruncNormal { std: INIT_STD }),
                    ("down.bias", vec![d], Init::Zeros),
                    ("up.weight", vec![d, host.width], up_init),
                    ("up.bias", vec![host.width], Init::Zeros),
                ];
                for (leaf, shape, init) in parts {
                    out.push(
                        ParamDesc::new(format!("{base}.{leaf}"), shape, init)
                            .with_init_key(format!("{key}.{leaf}")),
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Adds adapters to every block of `hosts`; returns the number of adapters.
pub fn inject_adapters<T: Real>(
    registry: &mut ParameterRegistry<T>,
    hosts: &[HostStack],
    cfg: &AdapterConfig,
    seed: u64,
) -> Result<usize> {
    let descs = adapter_layout(hosts, cfg)?;
    let count = descs.len() / 4;
    for d in descs {
        let t = init_tensor(&d, seed)?;
        registry.insert(d.name, t, d.trainable)?;
    }
    Ok(count)
}

pub fn is_adapter_param(name: &str) -> bool {
    name.contains(".adapter1.") || name.contains(".adapter2.")
}

/// Linear heads mapping encoder features into the shared embedding space.
pub fn is_projection_head(name: &str) -> bool {
    name.starts_with("vision.proj.") || name.starts_with("text.proj.")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    Full,
    #[default]
    AdaptersOnly,
}

/// Which parameters train. `train_heads` additionally unfreezes the
/// projection heads in `AdaptersOnly` mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FreezePolicy {
    pub mode: FreezeMode,
    pub train_heads: bool,
}

impl FreezePolicy {
    pub fn full() -> Self {
        FreezePolicy {
            mode: FreezeMode::Full,
            train_heads: false,
        }
    }

    pub fn adapters_only() -> Self {
        FreezePolicy {
            mode: FreezeMode::AdaptersOnly,
            train_heads: false,
        }
    }

    pub fn trains(&self, name: &str) -> bool {
        match self.mode {
            FreezeMode::Full => true,
            FreezeMode::AdaptersOnly => {
                is_adapter_param(name) || (self.train_heads && is_projection_head(name))
            }
        }
    }
}

pub fn apply_freeze_policy<T: Real>(registry: &mut ParameterRegistry<T>, policy: FreezePolicy) {
    for (name, p) in registry.iter_mut() {
        p.trainable = policy.trains(name);
    }
}

pub fn apply_freeze_policy_layout(layout: &mut ParamLayout, policy: FreezePolicy) {
    for d in layout.iter_mut() {
        d.trainable = policy.trains(&d.name);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
}

pub fn audit(layout: &ParamLayout) -> AuditReport {
    let total = layout.param_count(false);
    let trainable = layout.param_count(true);
    let fraction = if total == 0 {
        0.0
    } else {
        trainable as f64 / total as f64
    };
    AuditReport {
        total,
        trainable,
        fraction,
    }
}

pub fn audit_registry<T: Real>(registry: &ParameterRegistry<T>) -> AuditReport {
    audit(&registry.layout())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::registry::GradMode;
    use crate::tensor::Tensor;

    fn host(prefix: &str, depth: usize, width: usize) -> HostStack {
        HostStack::new(prefix, depth, width)
    }

    #[test]
    fn closed_form_count_for_768_and_ratio_32() {
        assert_eq!(adapter_param_count(768, 24), 37_656);
        let descs = adapter_layout(&[host("v", 1, 768)], &AdapterConfig::default()).unwrap();
        let per_adapter: usize = descs.iter().take(4).map(ParamDesc::numel).sum();
        assert_eq!(per_adapter, 37_656);
    }

    #[test]
    fn placement_controls_adapter_count() {
        let mut cfg = AdapterConfig::default();
        let mut reg = ParameterRegistry::<f32>::new();
        let n = inject_adapters(&mut reg, &[host("vision.local", 12, 64)], &cfg, 0).unwrap();
        assert_eq!(n, 24);
        cfg.placement = Placement::MsaOnly;
        let mut reg = ParameterRegistry::<f32>::new();
        let n = inject_adapters(&mut reg, &[host("vision.local", 12, 64)], &cfg, 0).unwrap();
        assert_eq!(n, 12);
        assert!(reg.contains("vision.local.3.adapter1.up.bias"));
        assert!(!reg.contains("vision.local.3.adapter2.up.bias"));
    }

    #[test]
    fn divisibility_error_names_width() {
        let cfg = AdapterConfig::default();
        let err = adapter_layout(&[host("t", 2, 48)], &cfg).unwrap_err();
        assert!(err.to_string().contains("48"), "{err}");
    }

    #[test]
    fn zero_init_adapter_is_identity_and_up_bias_shifts() {
        let mut reg = ParameterRegistry::<f64>::new();
        inject_adapters(&mut reg, &[host("a", 1, 64)], &AdapterConfig::default(), 1).unwrap();
        let x = Tensor::<f64>::from_fn([5, 64], |i| ((i * 37) % 11) as f64 - 5.0).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &reg, GradMode::None);
        let xv = g.constant(x.clone());
        let p = AdapterParams::bind(&bound, "a.0.adapter1").unwrap();
        let y = adapter_forward(&mut g, xv, &p).unwrap();
        assert_eq!(g.value(y), &x);

        // zero down/up weights, nonzero up bias: x + b
        let b = Tensor::<f64>::from_fn([64], |i| i as f64 * 0.5).unwrap();
        reg.set_tensor("a.0.adapter1.down.weight", Tensor::zeros([64, 2]).unwrap()).unwrap();
        reg.set_tensor("a.0.adapter1.up.bias", b.clone()).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &reg, GradMode::None);
        let xv = g.constant(x.clone());
        let p = AdapterParams::bind(&bound, "a.0.adapter1").unwrap();
        let y = adapter_forward(&mut g, xv, &p).unwrap();
        for r in 0..5 {
            for c in 0..64 {
                assert_eq!(g.value(y).at(&[r, c]), x.at(&[r, c]) + b.data()[c]);
            }
        }
    }

    #[test]
    fn adapter_matches_direct_recomputation() {
        use crate::autograd::gelu_scalar;
        let cfg = AdapterConfig {
            zero_init_up: false,
            bottleneck_ratio: 4,
            ..Default::default()
        };
        let mut reg = ParameterRegistry::<f64>::new();
        inject_adapters(&mut reg, &[host("a", 1, 8)], &cfg, 5).unwrap();
        let x = Tensor::<f64>::from_fn([3, 8], |i| (i as f64 * 0.37).sin()).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &reg, GradMode::None);
        let xv = g.constant(x.clone());
        let p = AdapterParams::bind(&bound, "a.0.adapter2").unwrap();
        let y = adapter_forward(&mut g, xv, &p).unwrap();

        let dw = reg.tensor("a.0.adapter2.down.weight").unwrap();
        let db = reg.tensor("a.0.adapter2.down.bias").unwrap();
        let uw = reg.tensor("a.0.adapter2.up.weight").unwrap();
        let ub = reg.tensor("a.0.adapter2.up.bias").unwrap();
        for r in 0..3 {
            let mut hidden = [0.0; 2];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut s = db.data()[j];
                for i in 0..8 {
                    s += x.at(&[r, i]) * dw.at(&[i, j]);
                }
                *h = gelu_scalar(s);
            }
            for c in 0..8 {
                let mut s = ub.data()[c];
                for (j, h) in hidden.iter().enumerate() {
                    s += h * uw.at(&[j, c]);
                }
                let expect = x.at(&[r, c]) + s;
                assert!((g.value(y).at(&[r, c]) - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn freeze_policy_flags() {
        let mut reg = ParameterRegistry::<f32>::new();
        reg.insert("vision.class_token", Tensor::zeros([4]).unwrap(), true).unwrap();
        reg.insert("vision.proj.weight", Tensor::zeros([4, 2]).unwrap(), true).unwrap();
        reg.insert("vision.global.0.adapter1.up.bias", Tensor::zeros([4]).unwrap(), false).unwrap();
        apply_freeze_policy(&mut reg, FreezePolicy::adapters_only());
        let flags: Vec<bool> = reg.iter().map(|(_, p)| p.trainable).collect();
        assert_eq!(flags, [false, false, true]);
        apply_freeze_policy(
            &mut reg,
            FreezePolicy {
                mode: FreezeMode::AdaptersOnly,
                train_heads: true,
            },
        );
        assert!(reg.get("vision.proj.weight").unwrap().trainable);
        apply_freeze_policy(&mut reg, FreezePolicy::full());
        let a = audit_registry(&reg);
        assert_eq!(a.trainable, a.total);
        assert_eq!(a.fraction, 1.0);
    }

    #[test]
    fn empty_audit_is_zero() {
        let a = audit(&ParamLayout::new());
        assert_eq!((a.total, a.trainable, a.fraction), (0, 0, 0.0));
    }
}
