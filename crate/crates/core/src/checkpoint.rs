//! Checkpoints: `manifest.json`, one little-endian array per parameter under
//! `params/`, and the vocabulary as `vocab.tsv`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::{f32_bytes, sha256_hex};
use crate::error::{Error, Result};
use crate::lm::Vocabulary;
use crate::metrics::Summary;
use crate::model::SegPoint;
use crate::precision::Precision;
use crate::train::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub iteration: usize,
    pub dtype: String,
    pub feat_dim: usize,
    pub config: TrainConfig,
    pub metrics: Option<Summary>,
    pub params: Vec<ParamEntry>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn encode(values: &[f64], precision: Precision) -> Vec<u8> {
    match precision {
        Precision::F32 => f32_bytes(values.iter().map(|&v| v as f32)),
        Precision::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

fn decode(bytes: &[u8], precision: Precision) -> Vec<f64> {
    match precision {
        Precision::F32 => crate::data::io::f32_from_bytes(bytes).into_iter().map(f64::from).collect(),
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    }
}

pub fn save_checkpoint(
    dir: &Path,
    model: &SegPoint,
    config: &TrainConfig,
    iteration: usize,
    metrics: Option<Summary>,
) -> Result<CheckpointManifest> {
    let precision = Precision::from_dtype(model.dtype())?;
    fs::create_dir_all(dir.join("params"))?;
    let mut params = Vec::with_capacity(model.store.len());
    for (name, var) in model.store.iter() {
        let values = model.store.values_f64(name)?;
        let bytes = encode(&values, precision);
        let file = format!("params/{name}.{}", precision.name());
        fs::write(dir.join(&file), &bytes)?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: var.dims().to_vec(),
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    model.vocab.save(&dir.join("vocab.tsv"))?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        iteration,
        dtype: precision.name().to_string(),
        feat_dim: model.feat_dim,
        config: config.clone(),
        metrics,
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(SegPoint, CheckpointManifest)> {
    let path = dir.join("manifest.json");
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| corrupt(&path, e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let precision = Precision::parse(&manifest.dtype)?;
    let vocab = Vocabulary::load(&dir.join("vocab.tsv"))?;
    let model = SegPoint::new(
        &manifest.config.model,
        vocab,
        manifest.feat_dim,
        precision.dtype(),
        manifest.config.seed,
    )?;
    let expected: BTreeSet<String> = model.store.names().into_iter().collect();
    let found: BTreeSet<String> = manifest.params.iter().map(|p| p.name.clone()).collect();
    if expected != found {
        let missing: Vec<_> = expected.difference(&found).collect();
        let extra: Vec<_> = found.difference(&expected).collect();
        return Err(corrupt(&path, format!("parameter set differs: missing {missing:?}, unexpected {extra:?}")));
    }
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    for p in &manifest.params {
        let file = dir.join(&p.file);
        let bytes = fs::read(&file)?;
        let count: usize = p.shape.iter().product();
        if bytes.len() != count * width {
            return Err(corrupt(&file, format!("{} bytes for {count} values", bytes.len())));
        }
        if sha256_hex(&bytes) != p.sha256 {
            return Err(corrupt(&file, "checksum mismatch"));
        }
        model.store.assign_f64(&p.name, decode(&bytes, precision))?;
    }
    Ok((model, manifest))
}
