//! The JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mvclip_core::adapters::{AdapterConfig, FreezePolicy};
use mvclip_core::data::synthetic::SyntheticSpec;
use mvclip_core::model::{AdapterTargets, ModelConfig};
use mvclip_core::objective::ClipHeadConfig;
use mvclip_core::text::TextEncoderConfig;
use mvclip_core::train::TrainConfig;
use mvclip_core::vision::{View, VisionEncoderConfig};

use crate::error::{CliError, CliResult};

/// Text encoder section. `vocab_size` defaults to the size of the
/// vocabulary built from the prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextSection {
    #[serde(default)]
    pub vocab_size: Option<usize>,
    pub context_length: usize,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vision: VisionEncoderConfig,
    pub text: TextSection,
    #[serde(default)]
    pub adapters: AdapterConfig,
    #[serde(default)]
    pub adapter_targets: AdapterTargets,
    #[serde(default)]
    pub head: ClipHeadConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TextEncoderConfig::desk(0);
        ModelSection {
            vision: VisionEncoderConfig::desk(),
            text: TextSection {
                vocab_size: None,
                context_length: t.context_length,
                width: t.width,
                heads: t.heads,
                depth: t.depth,
                embed_dim: t.embed_dim,
            },
            adapters: AdapterConfig::default(),
            adapter_targets: AdapterTargets::default(),
            head: ClipHeadConfig::default(),
        }
    }
}

impl ModelSection {
    /// The model config for a vocabulary of `vocab_len` tokens.
    pub fn build(&self, vocab_len: usize, freeze: FreezePolicy) -> CliResult<ModelConfig> {
        let vocab_size = self.text.vocab_size.unwrap_or(vocab_len);
        if vocab_size < vocab_len {
            return Err(CliError::validation(format!(
                "model.text.vocab_size: {vocab_size} is smaller than the {vocab_len}-token prompt vocabulary"
            )));
        }
        let cfg = ModelConfig {
            vision: self.vision.clone(),
            text: TextEncoderConfig {
                vocab_size,
                context_length: self.text.context_length,
                width: self.text.width,
                heads: self.text.heads,
                depth: self.text.depth,
                embed_dim: self.text.embed_dim,
            },
            adapters: self.adapters,
            adapter_targets: self.adapter_targets,
            head: self.head,
            freeze,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn all_views() -> Vec<View> {
    View::ALL.to_vec()
}

/// Exactly one of `manifest` and `synthetic`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Views fed to the encoder, in fusion order.
    #[serde(default = "all_views")]
    pub views: Vec<View>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub folds: usize,
    /// Train only the first this many folds.
    pub run_folds: Option<usize>,
    /// Train folds on separate threads; results are identical.
    pub parallel: bool,
}

impl Default for CvSection {
    fn default() -> Self {
        CvSection {
            folds: 5,
            run_folds: None,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_boot: usize,
    pub alpha: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_boot: 1000,
            alpha: 0.05,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

/// A complete experiment definition. The top-level `seed` drives weight
/// initialization, fold assignment and the training streams; it replaces
/// `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default)]
    pub cv: CvSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Desk-scale model on a synthetic task.
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        RunConfig {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection {
                manifest: None,
                synthetic: Some(spec),
                views: all_views(),
            },
            cv: CvSection::default(),
            eval: EvalSection::default(),
            output_dir: default_output(),
            seed: 0,
        }
    }

    /// Cross-section checks; messages name the offending field.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Validation(m));
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                return bad("data: give exactly one of `manifest` and `synthetic`".into())
            }
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        let views = &self.data.views;
        if views.is_empty() {
            return bad("data.views: at least one view is required".into());
        }
        let mut sorted = views.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != views.len() {
            return bad("data.views: duplicate view".into());
        }
        if views.len() != self.model.vision.views {
            return bad(format!(
                "model.vision.views: {} does not match the {} views in data.views",
                self.model.vision.views,
                views.len()
            ));
        }
        if self.model.vision.embed_dim != self.model.text.embed_dim {
            return bad(format!(
                "model.text.embed_dim: {} differs from model.vision.embed_dim {}",
                self.model.text.embed_dim, self.model.vision.embed_dim
            ));
        }
        if self.cv.folds < 2 {
            return bad(format!("cv.folds: need at least 2, got {}", self.cv.folds));
        }
        if self.cv.run_folds.is_some_and(|r| r == 0 || r > self.cv.folds) {
            return bad(format!("cv.run_folds: must lie in 1..={}", self.cv.folds));
        }
        if self.eval.n_boot == 0 || !(0.0..1.0).contains(&self.eval.alpha) || self.eval.alpha == 0.0 {
            return bad("eval: need n_boot >= 1 and alpha in (0, 1)".into());
        }
        self.train
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.model
            .build(crate::commands::prompt_vocabulary().len(), self.train.freeze_policy())?;
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

/// SHA-256 of a JSON value's compact serialization.
pub fn hash_json(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Parses a config; errors carry the JSON path of the offending field.
pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Validation(format!("config field `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a config file. A relative manifest path is taken
/// relative to the file's directory.
pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Some(m) = &cfg.data.manifest {
        if m.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.data.manifest = Some(base.join(m));
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_its_path() {
        let err = parse_config(r#"{"data": {"synthetic": {}}, "train": {"epochz": 3}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("train"), "{err}");
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn minimal_config_uses_desk_defaults() {
        let cfg = parse_config(r#"{"data": {"synthetic": {"n_cases": 10}}}"#).unwrap();
        assert_eq!(cfg.model.vision.width, 64);
        assert_eq!(cfg.cv.folds, 5);
    }

    #[test]
    fn view_count_must_match() {
        let err = parse_config(r#"{"data": {"synthetic": {}, "views": ["LCC", "RCC"]}}"#).unwrap_err();
        assert!(err.to_string().contains("model.vision.views"), "{err}");
    }

    #[test]
    fn embed_dims_must_match() {
        let mut cfg = RunConfig::synthetic(SyntheticSpec::default());
        cfg.model.text.embed_dim = 16;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("embed_dim"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::synthetic(SyntheticSpec::default());
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
