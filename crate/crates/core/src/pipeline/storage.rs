use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::build::{BuildStats, Dataset, PreferenceRecord, Provenance};
use super::{PipelineConfig, PipelineError};
use crate::diffusion::{bytes_f64, f64_bytes, ArtifactStamp, Context};
use crate::preference::{PairKind, PreferencePair};
use crate::world::{Canvas, ConditionMap, PromptSpec, WorldConfig};

pub const DATASET_FORMAT: u32 = 1;
pub const DATASET_MANIFEST: &str = "manifest.json";

const ROLES: [&str; 6] = ["text_pos", "text_neg", "cond_pos", "cond_neg", "s0", "s1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub index: usize,
    pub source: PromptSpec,
    pub target: PromptSpec,
    pub provenance: Provenance,
    /// Raw little-endian f64 blob per role.
    pub blobs: BTreeMap<String, BlobRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub count: usize,
    pub seed: u64,
    pub generator_hash: String,
    pub config: PipelineConfig,
    pub world: WorldConfig,
    pub stats: BuildStats,
    pub records: Vec<RecordEntry>,
    pub stamp: ArtifactStamp,
}

fn role_data(record: &PreferenceRecord, role: &str) -> Vec<f64> {
    match role {
        "text_pos" => record.text_pair.preferred.data().to_vec(),
        "text_neg" => record.text_pair.dispreferred.data().to_vec(),
        "cond_pos" => record.cond_pair.preferred.data().to_vec(),
        "cond_neg" => record.cond_pair.dispreferred.data().to_vec(),
        "s0" => record.s0().to_f64(),
        "s1" => record.s1().to_f64(),
        _ => unreachable!("unknown role {role}"),
    }
}

fn blob_name(index: usize, role: &str) -> String {
    format!("{index:06}_{role}.f64")
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl DatasetManifest {
    pub fn describe(
        records: &[PreferenceRecord],
        seed: u64,
        generator_hash: &str,
        config: &PipelineConfig,
        world: &WorldConfig,
        stats: &BuildStats,
    ) -> Self {
        let config_json = serde_json::to_vec(&(config, world)).expect("config serializes");
        let entries = records
            .iter()
            .enumerate()
            .map(|(index, r)| RecordEntry {
                index,
                source: r.source.clone(),
                target: r.target().clone(),
                provenance: r.provenance.clone(),
                blobs: ROLES
                    .iter()
                    .map(|role| {
                        let bytes = f64_bytes(&role_data(r, role));
                        (
                            role.to_string(),
                            BlobRef {
                                file: blob_name(index, role),
                                sha256: sha_hex(&bytes),
                            },
                        )
                    })
                    .collect(),
            })
            .collect();
        Self {
            format_version: DATASET_FORMAT,
            count: records.len(),
            seed,
            generator_hash: generator_hash.to_string(),
            config: config.clone(),
            world: world.clone(),
            stats: stats.clone(),
            records: entries,
            stamp: ArtifactStamp::new(sha_hex(&config_json), seed),
        }
    }

    /// SHA-256 of the canonical JSON encoding. Blob digests are part of the
    /// manifest, so this covers the data too.
    pub fn content_hash(&self) -> String {
        sha_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    for (record, entry) in dataset.records.iter().zip(&dataset.manifest.records) {
        for role in ROLES {
            let blob = &entry.blobs[role];
            let path = dir.join(&blob.file);
            fs::write(&path, f64_bytes(&role_data(record, role))).map_err(|e| PipelineError::io(&path, e))?;
        }
    }
    let path = dir.join(DATASET_MANIFEST);
    let json = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| PipelineError::io(&path, e))
}

fn read_blob(dir: &Path, blob: &BlobRef) -> Result<Vec<f64>, PipelineError> {
    let path = dir.join(&blob.file);
    let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
    if sha_hex(&bytes) != blob.sha256 {
        return Err(PipelineError::Manifest(format!("digest mismatch for {}", path.display())));
    }
    bytes_f64(&bytes).ok_or_else(|| PipelineError::Manifest(format!("truncated blob {}", path.display())))
}

fn mask(data: Vec<f64>) -> Result<ConditionMap, PipelineError> {
    Ok(ConditionMap::new(data.into_iter().map(|v| v != 0.0).collect())?)
}

/// Reads a dataset written by [`write_dataset`], verifying every blob digest.
pub fn read_dataset(dir: &Path) -> Result<Dataset, PipelineError> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.format_version != DATASET_FORMAT {
        return Err(PipelineError::Manifest(format!(
            "format version {}, expected {DATASET_FORMAT}",
            manifest.format_version
        )));
    }
    if manifest.records.len() != manifest.count {
        return Err(PipelineError::Manifest(format!(
            "{} record entries for count {}",
            manifest.records.len(),
            manifest.count
        )));
    }
    let mut records = Vec::with_capacity(manifest.count);
    for entry in &manifest.records {
        let mut blobs = BTreeMap::new();
        for role in ROLES {
            let blob = entry
                .blobs
                .get(role)
                .ok_or_else(|| PipelineError::Manifest(format!("record {} lacks role {role}", entry.index)))?;
            blobs.insert(role, read_blob(dir, blob)?);
        }
        let mut take = |role: &str| blobs.remove(role).expect("read above");
        let canvas = |data: Vec<f64>| -> Result<Canvas, PipelineError> { Ok(Canvas::new(data)?) };
        let (tp, tn, cp, cn) = (take("text_pos"), take("text_neg"), take("cond_pos"), take("cond_neg"));
        let (s0, s1) = (mask(take("s0"))?, mask(take("s1"))?);
        records.push(PreferenceRecord {
            source: entry.source.clone(),
            text_pair: PreferencePair::new(
                canvas(tp)?,
                canvas(tn)?,
                Context::new(entry.target.clone(), s0),
                PairKind::Text,
            ),
            cond_pair: PreferencePair::new(
                canvas(cp)?,
                canvas(cn)?,
                Context::new(entry.target.clone(), s1),
                PairKind::Condition,
            ),
            provenance: entry.provenance.clone(),
        });
    }
    Ok(Dataset { records, manifest })
}
