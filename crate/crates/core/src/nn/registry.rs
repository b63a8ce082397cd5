//! Named parameters with trainable flags, their shape-only layouts, and
//! binding into a compute graph.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel_of, Real, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

/// Shape-only description of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: Init,
    /// Key of the random stream used to initialize this parameter. Blocks at
    /// the same encoder depth share a key whatever stack they belong to.
    pub init_key: String,
}

impl ParamDesc {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        let name = name.into();
        ParamDesc {
            init_key: name.clone(),
            name,
            shape: shape.into(),
            trainable: true,
            init,
        }
    }

    pub fn with_init_key(mut self, key: impl Into<String>) -> Self {
        self.init_key = key.into();
        self
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.shape)
    }
}

/// Ordered list of parameter descriptors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamDesc>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, desc: ParamDesc) {
        self.entries.push(desc);
    }

    pub fn extend(&mut self, other: impl IntoIterator<Item = ParamDesc>) {
        self.entries.extend(other);
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamDesc> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamDesc> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|d| d.trainable || !trainable_only)
            .map(ParamDesc::numel)
            .sum()
    }

    /// Allocates and initializes every parameter.
    pub fn instantiate<T: Real>(&self, seed: u64) -> Result<ParameterRegistry<T>> {
        let mut reg = ParameterRegistry::new();
        for d in &self.entries {
            let tensor = init_tensor(d, seed)?;
            reg.insert(d.name.clone(), tensor, d.trainable)?;
        }
        Ok(reg)
    }
}

impl IntoIterator for ParamLayout {
    type Item = ParamDesc;
    type IntoIter = std::vec::IntoIter<ParamDesc>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.into_iter()
    }
}

/// Independent random stream for `(seed, key)`.
pub fn stream_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(bytes)
}

pub(crate) fn init_tensor<T: Real>(desc: &ParamDesc, seed: u64) -> Result<Tensor<T>> {
    let shape = desc.shape.clone();
    let t = match desc.init {
        Init::Zeros => Tensor::zeros(shape)?,
        Init::Ones => Tensor::ones(shape)?,
        Init::TruncNormal { std } => {
            let mut rng = stream_rng(seed, &desc.init_key);
            Tensor::from_fn(shape, |_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::from_f64_lossy(z * std);
                }
            })?
        }
    };
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered map of dotted parameter names to tensors and trainable flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterRegistry<T = f32> {
    entries: IndexMap<String, Parameter<T>>,
}

impl<T> Default for ParameterRegistry<T> {
    fn default() -> Self {
        ParameterRegistry {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Real> ParameterRegistry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.entries.insert(name, Parameter { tensor, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.entries.get_mut(name)
    }

    /// Replaces a tensor, keeping the flag; the shape must match.
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: p.tensor.shape().to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Exact number of scalars, optionally only those flagged trainable.
    pub fn param_count(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Shape-only view; every descriptor gets `Init::Zeros`.
    pub fn layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        for (name, p) in self.iter() {
            let mut d = ParamDesc::new(name, p.tensor.shape().to_vec(), Init::Zeros);
            d.trainable = p.trainable;
            l.push(d);
        }
        l
    }

    pub fn cast<U: Real>(&self) -> ParameterRegistry<U> {
        ParameterRegistry {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and value bits of entries matching `keep`.
    pub fn checksum(&self, keep: impl Fn(&str, &Parameter<T>) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.iter().filter(|(n, p)| keep(n, p)) {
            h.update(name.as_bytes());
            for &s in p.tensor.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checksum of every parameter not flagged trainable.
    pub fn frozen_checksum(&self) -> String {
        self.checksum(|_, p| !p.trainable)
    }
}

/// Which bound parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Follow each parameter's trainable flag.
    Trainable,
    All,
    None,
}

/// Graph handles for a registry's parameters.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl BoundParams {
    pub fn bind<T: Real>(g: &mut Graph<T>, reg: &ParameterRegistry<T>, mode: GradMode) -> Self {
        let mut b = BoundParams::default();
        for (name, p) in reg.iter() {
            let rg = match mode {
                GradMode::Trainable => p.trainable,
                GradMode::All => true,
                GradMode::None => false,
            };
            let v = g.leaf(p.tensor.clone(), rg);
            b.vars.insert(name.to_string(), v);
            b.order.push(name.to_string());
        }
        b
    }

    /// Binds names to variables already on a graph, in the given order.
    pub fn from_vars<'a>(entries: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        let mut b = BoundParams::default();
        for (name, v) in entries {
            b.vars.insert(name.to_string(), v);
            b.order.push(name.to_string());
        }
        b
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Entries in registry order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|n| (n.as_str(), self.vars[n]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_duplicate_names() {
        let mut r = ParameterRegistry::<f32>::new();
        r.insert("a.weight", Tensor::zeros([768, 768]).unwrap(), true).unwrap();
        r.insert("a.bias", Tensor::zeros([768]).unwrap(), false).unwrap();
        assert_eq!(r.param_count(false), 590_592);
        assert_eq!(r.param_count(true), 589_824);
        assert!(matches!(
            r.insert("a.bias", Tensor::zeros([1]).unwrap(), true),
            Err(Error::DuplicateParameter(_))
        ));
        assert_eq!(r.layout().param_count(false), 590_592);
    }

    #[test]
    fn init_is_deterministic_and_truncated() {
        let d = ParamDesc::new("w", [64, 64], Init::TruncNormal { std: INIT_STD });
        let a: Tensor<f32> = init_tensor(&d, 3).unwrap();
        let b: Tensor<f32> = init_tensor(&d, 3).unwrap();
        let c: Tensor<f32> = init_tensor(&d, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
        let mean = a.sum_f64() / a.numel() as f64;
        assert!(mean.abs() < 2e-3);
    }

    #[test]
    fn shared_init_key_gives_identical_values() {
        let d1 = ParamDesc::new("x.local.0.w", [4, 4], Init::TruncNormal { std: 0.02 })
            .with_init_key("x.depth0.w");
        let d2 = ParamDesc::new("x.global.0.w", [4, 4], Init::TruncNormal { std: 0.02 })
            .with_init_key("x.depth0.w");
        let a: Tensor<f64> = init_tensor(&d1, 9).unwrap();
        let b: Tensor<f64> = init_tensor(&d2, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_checksum_ignores_trainable_entries() {
        let mut r = ParameterRegistry::<f32>::new();
        r.insert("frozen", Tensor::ones([3]).unwrap(), false).unwrap();
        r.insert("live", Tensor::ones([3]).unwrap(), true).unwrap();
        let before = r.frozen_checksum();
        r.set_tensor("live", Tensor::zeros([3]).unwrap()).unwrap();
        assert_eq!(before, r.frozen_checksum());
        r.set_tensor("frozen", Tensor::zeros([3]).unwrap()).unwrap();
        assert_ne!(before, r.frozen_checksum());
    }
}
