use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MBertModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::tensor_io::{decode_tensors, encode_tensors, TensorEntry};
use crate::numerics::Parameterized;

pub const CHECKPOINT_FORMAT: u32 = 1;
const MANIFEST_FILE: &str = "manifest.toml";
const BLOB_FILE: &str = "weights.bin";

/// Text half of a checkpoint directory; the tensors live in `weights.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &MBertModel, dir: &Path, vocab_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = model.parameters();
    let (blob, tensors) = encode_tensors(params.iter().map(|(n, p)| (n.clone(), &p.value)));
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        vocab_hash: vocab_hash.to_string(),
        vocab_size: model.vocab_size(),
        config: model.config().clone(),
        tensors,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Checkpoint(format!("cannot encode manifest: {e}")))?;
    let blob_path = dir.join(BLOB_FILE);
    std::fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
            m.format
        )));
    }
    Ok(m)
}

/// Loads a checkpoint, refusing it when `expected_vocab_hash` differs from the
/// hash recorded at save time.
pub fn load_checkpoint(
    dir: &Path,
    expected_vocab_hash: Option<&str>,
) -> Result<(MBertModel, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if let Some(h) = expected_vocab_hash {
        if h != manifest.vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint was trained with {}, got {h}",
                manifest.vocab_hash
            )));
        }
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let tensors = decode_tensors(&blob, &manifest.tensors)?;
    let model = MBertModel::from_parts(manifest.config.clone(), manifest.vocab_size, tensors)?;
    Ok((model, manifest))
}
