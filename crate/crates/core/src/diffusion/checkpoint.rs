use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DenoiserModel, DiffusionError, ModelConfig};
use crate::numerics::{RngStream, Tensor};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Reproducibility triple embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactStamp {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl ArtifactStamp {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            code_version: crate::CODE_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    /// [`DenoiserModel::content_hash`] of the stored (merged) weights.
    pub content_hash: String,
    /// Rank of the adapter folded in before saving, if any.
    pub merged_adapter_rank: Option<usize>,
    pub stamp: ArtifactStamp,
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> DiffusionError {
    if source.kind() == std::io::ErrorKind::NotFound {
        DiffusionError::MissingFile(path.to_path_buf())
    } else {
        DiffusionError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn f64_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_f64(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    )
}

/// Writes `model` (adapters merged) as a manifest plus one blob per tensor.
/// Returns the manifest.
pub fn save_checkpoint(
    model: &DenoiserModel,
    dir: &Path,
    stamp: &ArtifactStamp,
) -> Result<CheckpointManifest, DiffusionError> {
    let rank = model.layers().iter().find_map(|l| l.adapter.as_ref().map(|a| a.rank));
    let merged = model.merge_adapters();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut params = Vec::new();
    for (name, t) in merged.params() {
        let file = format!("{name}.f64");
        let bytes = f64_bytes(t.data());
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
        params.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT,
        model: merged.config().clone(),
        params,
        content_hash: merged.content_hash(),
        merged_adapter_rank: rank,
        stamp: stamp.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest, DiffusionError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| DiffusionError::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_FORMAT {
        return Err(DiffusionError::FormatVersion {
            found: manifest.format_version,
            expected: CHECKPOINT_FORMAT,
        });
    }
    Ok(manifest)
}

/// Loads a checkpoint and verifies every blob digest.
pub fn load_checkpoint(dir: &Path) -> Result<(DenoiserModel, CheckpointManifest), DiffusionError> {
    let manifest = read_checkpoint_manifest(dir)?;
    // Architecture only; every tensor is overwritten below.
    let mut model = DenoiserModel::new(manifest.model.clone(), &mut RngStream::new(0, 0).rng());
    let expected: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let stored: Vec<&str> = manifest.params.iter().map(|p| p.name.as_str()).collect();
    if expected != stored {
        return Err(DiffusionError::Manifest(format!(
            "parameter list {stored:?} does not match architecture {expected:?}"
        )));
    }
    for entry in &manifest.params {
        let path: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(DiffusionError::Manifest(format!("digest mismatch for {}", path.display())));
        }
        let data = bytes_f64(&bytes)
            .ok_or_else(|| DiffusionError::Manifest(format!("truncated blob {}", path.display())))?;
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        model.set_param(&entry.name, tensor)?;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = DenoiserModel::new(
            ModelConfig {
                hidden: 8,
                ..ModelConfig::default()
            },
            &mut RngStream::new(5, 0).rng(),
        );
        let stamp = ArtifactStamp::new("abc", 5);
        let man = save_checkpoint(&m, dir.path(), &stamp).unwrap();
        let (back, man2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(man, man2);
        assert_eq!(man.content_hash, m.content_hash());
    }

    #[test]
    fn missing_directory_is_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, DiffusionError::MissingFile(_)));
    }

    #[test]
    fn adapters_are_merged_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DenoiserModel::new(
            ModelConfig {
                hidden: 8,
                ..ModelConfig::default()
            },
            &mut RngStream::new(5, 0).rng(),
        )
        .apply_lowrank_adapter(2, 2.0, &mut RngStream::new(6, 0).rng())
        .unwrap();
        for p in m.trainable_params_mut() {
            for v in p.data_mut() {
                *v += 0.01;
            }
        }
        let man = save_checkpoint(&m, dir.path(), &ArtifactStamp::new("x", 0)).unwrap();
        assert_eq!(man.merged_adapter_rank, Some(2));
        let (back, _) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m.merge_adapters());
    }
}
