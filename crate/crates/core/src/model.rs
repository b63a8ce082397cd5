//! The two-tower model: configuration, parameter layout and inference
//! helpers.

use serde::{Deserialize, Serialize};

use crate::adapters::{adapter_layout, apply_freeze_policy_layout, AdapterConfig, FreezePolicy, HostStack};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::registry::{BoundParams, GradMode, ParamLayout, ParameterRegistry};
use crate::objective::{predict, CasePrediction, ClipHeadConfig};
use crate::tensor::{Real, Tensor};
use crate::text::{encode_text, tokenize, PromptSet, TextEncoderConfig, TextParams, Tokenized, Vocabulary};
use crate::vision::{encode_views, Pooling, VisionEncoderConfig, VisionParams};

/// Which encoders receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTargets {
    pub vision: bool,
    pub text: bool,
}

impl Default for AdapterTargets {
    fn default() -> Self {
        AdapterTargets {
            vision: true,
            text: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
    #[serde(default)]
    pub adapters: AdapterConfig,
    #[serde(default)]
    pub adapter_targets: AdapterTargets,
    #[serde(default)]
    pub head: ClipHeadConfig,
    #[serde(default)]
    pub freeze: FreezePolicy,
}

/// Published CLIP backbone sizes, for counting parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Vitb32,
    Vitb16,
    Vitl14,
}

impl Backbone {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vitb32" => Some(Backbone::Vitb32),
            "vitb16" => Some(Backbone::Vitb16),
            "vitl14" => Some(Backbone::Vitl14),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Vitb32 => "vitb32",
            Backbone::Vitb16 => "vitb16",
            Backbone::Vitl14 => "vitl14",
        }
    }
}

impl ModelConfig {
    /// Four-view model at a size that trains on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vision: VisionEncoderConfig::desk(),
            text: TextEncoderConfig::desk(vocab_size),
            adapters: AdapterConfig::default(),
            adapter_targets: AdapterTargets::default(),
            head: ClipHeadConfig::default(),
            freeze: FreezePolicy::default(),
        }
    }

    /// Full-size configuration of a backbone with a 49,408-entry vocabulary
    /// and 77-token context. The split between local and global blocks does
    /// not change any count.
    pub fn backbone(b: Backbone) -> Self {
        let (patch, width, heads, depth, embed, text_width, text_heads) = match b {
            Backbone::Vitb32 => (32, 768, 12, 12, 512, 512, 8),
            Backbone::Vitb16 => (16, 768, 12, 12, 512, 512, 8),
            Backbone::Vitl14 => (14, 1024, 16, 24, 768, 768, 12),
        };
        ModelConfig {
            vision: VisionEncoderConfig {
                image_size: 224,
                channels: 3,
                patch_size: patch,
                width,
                heads,
                depth,
                local_depth: depth / 2,
                views: 4,
                embed_dim: embed,
                pooling: Pooling::MeanClassTokens,
                view_embedding: false,
            },
            text: TextEncoderConfig {
                vocab_size: 49_408,
                context_length: 77,
                width: text_width,
                heads: text_heads,
                depth: 12,
                embed_dim: embed,
            },
            adapters: AdapterConfig::default(),
            adapter_targets: AdapterTargets::default(),
            head: ClipHeadConfig::default(),
            freeze: FreezePolicy::adapters_only(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        self.head.validate()?;
        if self.vision.embed_dim != self.text.embed_dim {
            return Err(Error::Config(format!(
                "vision embed_dim {} differs from text embed_dim {}",
                self.vision.embed_dim, self.text.embed_dim
            )));
        }
        if self.adapters.bottleneck_ratio == 0 {
            return Err(Error::Config("adapters: bottleneck_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn host_stacks(&self) -> Vec<HostStack> {
        let mut hosts = Vec::new();
        if self.adapter_targets.vision {
            hosts.extend(self.vision.host_stacks());
        }
        if self.adapter_targets.text {
            hosts.extend(self.text.host_stacks());
        }
        hosts
    }

    /// Every parameter with its trainable flag set by the freeze policy.
    pub fn layout(&self) -> Result<ParamLayout> {
        self.validate()?;
        let mut l = self.vision.layout();
        l.extend(self.text.layout());
        l.extend(adapter_layout(&self.host_stacks(), &self.adapters)?);
        apply_freeze_policy_layout(&mut l, self.freeze);
        Ok(l)
    }
}

/// Parameters of both encoders bound into one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub params: BoundParams,
    pub vision: VisionParams,
    pub text: TextParams,
}

impl BoundModel {
    pub fn bind<T: Real>(
        g: &mut Graph<T>,
        registry: &ParameterRegistry<T>,
        cfg: &ModelConfig,
        mode: GradMode,
    ) -> Result<Self> {
        let params = BoundParams::bind(g, registry, mode);
        let vision = VisionParams::bind(&params, &cfg.vision)?;
        let text = TextParams::bind(&params, &cfg.text)?;
        Ok(BoundModel { params, vision, text })
    }

    /// `[1, D_e]` case embedding.
    pub fn encode_case<T: Real>(&self, g: &mut Graph<T>, cfg: &ModelConfig, images: &[Var]) -> Result<Var> {
        encode_views(g, images, &self.vision, &cfg.vision)
    }

    /// `[1, D_e]` text embedding.
    pub fn encode_text<T: Real>(&self, g: &mut Graph<T>, tokens: &Tokenized) -> Result<Var> {
        encode_text(g, tokens, &self.text)
    }

    /// `[2, D_e]` class text rows, negative first.
    pub fn encode_class_texts<T: Real>(&self, g: &mut Graph<T>, pair: &[Tokenized; 2]) -> Result<Var> {
        let neg = self.encode_text(g, &pair[0])?;
        let pos = self.encode_text(g, &pair[1])?;
        Ok(g.concat(&[neg, pos], 0)?)
    }
}

#[derive(Clone, Debug)]
pub struct ClipModel<T: Real = f32> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParameterRegistry<T>,
}

impl<T: Real> ClipModel<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if vocab.len() > config.text.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but text.vocab_size is {}",
                vocab.len(),
                config.text.vocab_size
            )));
        }
        let params = config.layout()?.instantiate(seed)?;
        Ok(ClipModel { config, vocab, params })
    }

    /// Wraps existing parameters after checking them against the config.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParameterRegistry<T>) -> Result<Self> {
        let layout = config.layout()?;
        if layout.len() != params.len() {
            for d in layout.iter() {
                if !params.contains(&d.name) {
                    return Err(Error::MissingParameter(d.name.clone()));
                }
            }
            let extra = params
                .names()
                .find(|n| !layout.iter().any(|d| d.name == *n))
                .unwrap_or_default()
                .to_string();
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        for d in layout.iter() {
            let t = params.tensor(&d.name)?;
            if t.shape() != d.shape.as_slice() {
                return Err(Error::ParameterShape {
                    name: d.name.clone(),
                    expected: d.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(ClipModel { config, vocab, params })
    }

    pub fn bind(&self, g: &mut Graph<T>, mode: GradMode) -> Result<BoundModel> {
        BoundModel::bind(g, &self.params, &self.config, mode)
    }

    pub fn tokenize(&self, text: &str) -> Result<Tokenized> {
        tokenize(text, &self.vocab, self.config.text.context_length)
    }

    pub fn tokenize_pair(&self, pair: [&str; 2]) -> Result<[Tokenized; 2]> {
        Ok([self.tokenize(pair[0])?, self.tokenize(pair[1])?])
    }

    pub fn image_embedding(&self, images: &[Tensor<T>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, GradMode::None)?;
        let vars: Vec<Var> = images.iter().map(|t| g.constant(t.clone())).collect();
        let e = b.encode_case(&mut g, &self.config, &vars)?;
        Ok(g.value(e).to_f64_vec())
    }

    pub fn text_embedding(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = self.tokenize(text)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, GradMode::None)?;
        let e = b.encode_text(&mut g, &tokens)?;
        Ok(g.value(e).to_f64_vec())
    }

    /// Predictions for many cases against one prompt pair; the two text
    /// embeddings are computed once.
    pub fn classify_cases(&self, cases: &[Vec<Tensor<T>>], pair: [&str; 2]) -> Result<Vec<CasePrediction>> {
        let t_neg = self.text_embedding(pair[0])?;
        let t_pos = self.text_embedding(pair[1])?;
        cases
            .iter()
            .map(|c| predict(&self.image_embedding(c)?, &t_neg, &t_pos, &self.config.head))
            .collect()
    }

    pub fn classify(&self, images: &[Tensor<T>], pair: [&str; 2]) -> Result<CasePrediction> {
        Ok(self.classify_cases(std::slice::from_ref(&images.to_vec()), pair)?[0])
    }
}

/// Encodes the case once and scores it against the short prompts.
pub fn zero_shot_classify<T: Real>(
    model: &ClipModel<T>,
    images: &[Tensor<T>],
    prompts: &PromptSet,
) -> Result<CasePrediction> {
    model.classify(images, prompts.zeroshot_pair())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::audit;
    use crate::text::canonical_prompts;

    #[test]
    fn vitb32_audit_near_published_counts() {
        let a = audit(&ModelConfig::backbone(Backbone::Vitb32).layout().unwrap());
        assert!((a.total as f64 - 151.3e6).abs() <= 0.1 * 151.3e6, "{a:?}");
        assert!((a.trainable as f64 - 1.3e6).abs() <= 0.1 * 1.3e6, "{a:?}");
        assert_eq!(a.trainable, 903_744 + 405_888);
    }

    #[test]
    fn embed_dim_mismatch_is_rejected() {
        let mut c = ModelConfig::desk(40);
        c.text.embed_dim = 16;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn from_parts_names_bad_tensor() {
        let vocab = Vocabulary::build(&canonical_prompts().all());
        let mut cfg = ModelConfig::desk(vocab.len());
        cfg.vision.depth = 1;
        cfg.vision.local_depth = 0;
        cfg.text.depth = 1;
        let m = ClipModel::<f32>::new(cfg.clone(), vocab.clone(), 0).unwrap();
        let mut other = cfg.clone();
        other.vision.embed_dim = 16;
        other.text.embed_dim = 16;
        let err = ClipModel::from_parts(other, vocab, m.params).unwrap_err();
        assert!(err.to_string().contains("proj.weight"), "{err}");
    }
}
