//! Checkpoints: a JSON manifest plus one blob of little-endian f32 values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClipModel, ModelConfig};
use crate::nn::registry::ParameterRegistry;
use crate::tensor::{numel_of, Tensor};
use crate::text::Vocabulary;
use crate::train::augment::Normalization;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (JSON) and a sibling `.bin` blob.
pub fn save_checkpoint(path: &Path, registry: &ParameterRegistry<f32>, config: serde_json::Value) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(registry.param_count(false) * 4);
    let mut tensors = Vec::with_capacity(registry.len());
    for (name, p) in registry.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            offset: bytes.len() as u64,
            trainable: p.trainable,
        });
        for v in p.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        config,
        tensors,
    };
    std::fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, checking the version and that tensor extents tile the
/// blob exactly.
pub fn load_checkpoint(path: &Path) -> Result<(ParameterRegistry<f32>, serde_json::Value)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found: manifest.format_version,
        });
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut reg = ParameterRegistry::new();
    let mut cursor = 0u64;
    for t in manifest.tensors {
        if t.offset != cursor {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{}` starts at byte {} but the previous one ends at {cursor}",
                t.name, t.offset
            )));
        }
        let n = numel_of(&t.shape) as u64;
        let end = cursor + 4 * n;
        if end > bytes.len() as u64 {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{}` needs bytes {cursor}..{end} but the blob has {}",
                t.name,
                bytes.len()
            )));
        }
        let data = bytes[cursor as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(t.shape, data).map_err(|e| Error::CorruptCheckpoint(format!("`{}`: {e}", t.name)))?;
        reg.insert(t.name, tensor, t.trainable)?;
        cursor = end;
    }
    if cursor != bytes.len() as u64 {
        return Err(Error::CorruptCheckpoint(format!(
            "blob has {} bytes but tensors cover {cursor}",
            bytes.len()
        )));
    }
    Ok((reg, manifest.config))
}

/// Everything besides the weights needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSnapshot {
    pub model: ModelConfig,
    /// Vocabulary file contents.
    pub vocab: String,
    pub normalization: Normalization,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_model(
    path: &Path,
    model: &ClipModel<f32>,
    normalization: Normalization,
    extra: serde_json::Value,
) -> Result<()> {
    let snap = ModelSnapshot {
        model: model.config.clone(),
        vocab: model.vocab.to_text(),
        normalization,
        extra,
    };
    save_checkpoint(path, &model.params, serde_json::to_value(snap)?)
}

/// Loads a model. With `expected`, the stored weights must fit that config
/// instead of the stored one.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<(ClipModel<f32>, ModelSnapshot)> {
    let (reg, config) = load_checkpoint(path)?;
    let snap: ModelSnapshot = serde_json::from_value(config)
        .map_err(|e| Error::CorruptCheckpoint(format!("config snapshot: {e}")))?;
    let vocab = Vocabulary::from_text(&snap.vocab)?;
    let cfg = expected.cloned().unwrap_or_else(|| snap.model.clone());
    let model = ClipModel::from_parts(cfg, vocab, reg)?;
    Ok((model, snap))
}
