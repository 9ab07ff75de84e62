//! Checkpoints: a JSON manifest naming every tensor with its shape and
//! byte offset, plus a flat little-endian f64 blob next to it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FineModel, ModelConfig, ModelError, Result};
use crate::seed::fnv1a64;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub blob: String,
    pub blob_fnv1a64: String,
    pub tensors: Vec<TensorEntry>,
}

fn io(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `model` to `path` (manifest) and `path` with a `.bin` extension.
pub fn save_checkpoint(model: &FineModel, path: &Path) -> Result<CheckpointManifest> {
    let mut blob = Vec::with_capacity(model.params.numel() * 8);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = path.with_extension("bin");
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        blob: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_fnv1a64: format!("{:016x}", fnv1a64(&blob)),
        tensors,
    };
    std::fs::write(&bin, &blob).map_err(|e| io(&bin, e))?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io(path, e))?;
    Ok(manifest)
}

/// Loads a checkpoint, checking every declared tensor against the shapes
/// the stored configuration implies.
pub fn load_checkpoint(path: &Path) -> Result<FineModel> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Config(format!(
            "unsupported checkpoint format_version {}",
            manifest.format_version
        )));
    }
    let bin = path.parent().unwrap_or_else(|| Path::new(".")).join(&manifest.blob);
    let blob = std::fs::read(&bin).map_err(|e| io(&bin, e))?;
    if format!("{:016x}", fnv1a64(&blob)) != manifest.blob_fnv1a64 {
        return Err(ModelError::Shape("checkpoint blob digest does not match manifest".into()));
    }
    let mut model = FineModel::new(manifest.model.clone())?;
    if manifest.tensors.len() != model.params.len() {
        return Err(ModelError::Shape(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    for entry in &manifest.tensors {
        let idx = model
            .params
            .index_of(&entry.name)
            .ok_or_else(|| ModelError::Shape(format!("unknown tensor {}", entry.name)))?;
        let t = model.params.get_mut(idx);
        if t.shape() != entry.shape.as_slice() {
            return Err(ModelError::Shape(format!(
                "{}: checkpoint shape {:?}, model shape {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let end = entry.offset + t.numel() * 8;
        let bytes = blob.get(entry.offset..end).ok_or_else(|| {
            ModelError::Shape(format!("{}: bytes {}..{end} outside blob of {}", entry.name, entry.offset, blob.len()))
        })?;
        for (v, b) in t.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneKind;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_side: 8,
            embed_dim: 8,
            backbone: BackboneKind::Nice,
            nice_layers: 2,
            memories: 2,
            seed: 1,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = FineModel::new(cfg()).unwrap();
        m.params.get_mut(0).data_mut()[0] = std::f64::consts::PI;
        let p = dir.path().join("ck.json");
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
    }

    #[test]
    fn declared_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        save_checkpoint(&FineModel::new(cfg()).unwrap(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut man: CheckpointManifest = serde_json::from_str(&text).unwrap();
        man.tensors[0].shape = vec![9];
        std::fs::write(&p, serde_json::to_string(&man).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(ModelError::Shape(_))));
    }
}
