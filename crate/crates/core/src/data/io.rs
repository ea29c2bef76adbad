//! Scene files and dataset directories.
//!
//! A scene directory holds `manifest.json` plus four little-endian row-major
//! arrays: `coords.f32 [N x 3]`, `feats.f32 [N x F]`, `instance.i32 [N]` and
//! `category.i32 [N]`. The manifest records counts and a SHA-256 per array.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::annotations::{generate_annotations, VIEW_CONVENTION};
use super::lexicon::LEXICON_VERSION;
use super::scene::{generate_scene, Scene, SceneObject, SceneSpec};
use crate::error::{ensure, Error, Result};
use crate::geometry::PointCloud;
use crate::tasks::Annotation;

pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const VAL_SEED_OFFSET: u64 = 1_000_000;
pub const MANIFEST: &str = "manifest.json";
pub const DATASET_INDEX: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub lexicon_version: u32,
    pub scene_id: String,
    pub seed: u64,
    pub n_points: usize,
    pub feat_dim: usize,
    pub room_extent: [f64; 3],
    pub view: String,
    pub categories: Vec<String>,
    pub objects: Vec<SceneObject>,
    pub arrays: Vec<ArrayEntry>,
    pub annotations: Vec<Annotation>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn i32_bytes(values: impl IntoIterator<Item = i32>) -> Vec<u8> {
    values.into_iter().flat_map(i32::to_le_bytes).collect()
}

pub fn f32_from_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn i32_from_bytes(bytes: &[u8]) -> Vec<i32> {
    bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn scene_arrays(cloud: &PointCloud) -> [(&'static str, Vec<u8>); 4] {
    let n = cloud.len();
    [
        ("coords.f32", f32_bytes(cloud.coords().iter().flatten().copied())),
        ("feats.f32", f32_bytes(cloud.feats().iter().copied())),
        (
            "instance.i32",
            i32_bytes(cloud.instance_ids().map_or(vec![0; n], <[i32]>::to_vec)),
        ),
        (
            "category.i32",
            i32_bytes(cloud.category_ids().map_or(vec![0; n], <[i32]>::to_vec)),
        ),
    ]
}

pub fn save_scene(scene: &Scene, annotations: &[Annotation], dir: &Path) -> Result<SceneManifest> {
    fs::create_dir_all(dir)?;
    let mut arrays = Vec::new();
    for (name, bytes) in scene_arrays(&scene.cloud) {
        fs::write(dir.join(name), &bytes)?;
        arrays.push(ArrayEntry {
            file: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = SceneManifest {
        version: SCENE_FORMAT_VERSION,
        lexicon_version: LEXICON_VERSION,
        scene_id: scene.id.clone(),
        seed: scene.seed,
        n_points: scene.cloud.len(),
        feat_dim: scene.cloud.feat_dim(),
        room_extent: scene.room_extent,
        view: VIEW_CONVENTION.to_string(),
        categories: scene.categories.clone(),
        objects: scene.objects.clone(),
        arrays,
        annotations: annotations.to_vec(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn read_array(dir: &Path, manifest: &SceneManifest, name: &str, expected_bytes: usize) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let entry = manifest
        .arrays
        .iter()
        .find(|e| e.file == name)
        .ok_or_else(|| corrupt(&dir.join(MANIFEST), format!("no entry for {name}")))?;
    let bytes = fs::read(&path)?;
    if bytes.len() != expected_bytes || entry.bytes as usize != expected_bytes {
        return Err(corrupt(
            &path,
            format!(
                "{} bytes on disk, {} in manifest, {expected_bytes} implied by the point count",
                bytes.len(),
                entry.bytes
            ),
        ));
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(corrupt(&path, "checksum mismatch"));
    }
    Ok(bytes)
}

pub fn load_scene(dir: &Path) -> Result<(Scene, Vec<Annotation>)> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: SceneManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(&manifest_path, e.to_string()))?;
    if manifest.version != SCENE_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.version,
            expected: SCENE_FORMAT_VERSION,
        });
    }
    let (n, f) = (manifest.n_points, manifest.feat_dim);
    let coords = f32_from_bytes(&read_array(dir, &manifest, "coords.f32", n * 12)?);
    let feats = f32_from_bytes(&read_array(dir, &manifest, "feats.f32", n * f * 4)?);
    let instance = i32_from_bytes(&read_array(dir, &manifest, "instance.i32", n * 4)?);
    let category = i32_from_bytes(&read_array(dir, &manifest, "category.i32", n * 4)?);
    let coords: Vec<[f32; 3]> = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    ensure!(
        category.iter().all(|&c| c >= 0 && (c as usize) < manifest.categories.len()),
        "category id outside the category table in {}",
        dir.display()
    );
    let cloud = PointCloud::new(coords, feats, f, Some(instance), Some(category))?;
    let scene = Scene {
        id: manifest.scene_id,
        seed: manifest.seed,
        room_extent: manifest.room_extent,
        cloud,
        categories: manifest.categories,
        objects: manifest.objects,
    };
    Ok((scene, manifest.annotations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub scene_id: String,
    pub seed: u64,
    pub split: Split,
    /// Relative to the dataset directory.
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub n_points: usize,
    pub scenes: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub base_seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub n_points: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            base_seed: 0,
            train_scenes: 64,
            val_scenes: 16,
            n_points: 4096,
        }
    }
}

impl DatasetSpec {
    pub fn seeds(&self, split: Split) -> std::ops::Range<u64> {
        match split {
            Split::Train => self.base_seed..self.base_seed + self.train_scenes as u64,
            Split::Val => {
                let start = self.base_seed + VAL_SEED_OFFSET;
                start..start + self.val_scenes as u64
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub split: Split,
    pub scene: Scene,
    pub annotations: Vec<Annotation>,
}

pub fn generate_labeled(seed: u64, n_points: usize) -> Result<(Scene, Vec<Annotation>)> {
    let scene = generate_scene(&SceneSpec::new(seed, n_points))?;
    let annotations = generate_annotations(&scene, seed);
    Ok((scene, annotations))
}

/// Generate and write a dataset; returns the index.
pub fn build_dataset(spec: &DatasetSpec, out: &Path) -> Result<DatasetIndex> {
    let train = spec.seeds(Split::Train);
    let val = spec.seeds(Split::Val);
    ensure!(
        train.end <= val.start || val.end <= train.start,
        "train seeds {train:?} and val seeds {val:?} overlap"
    );
    ensure!(spec.train_scenes as u64 <= VAL_SEED_OFFSET, "too many training scenes");
    fs::create_dir_all(out)?;
    let mut scenes = Vec::new();
    for (split, seeds) in [(Split::Train, train), (Split::Val, val)] {
        for seed in seeds {
            let (scene, anns) = generate_labeled(seed, spec.n_points)?;
            let rel = scene.id.clone();
            save_scene(&scene, &anns, &out.join(&rel))?;
            scenes.push(IndexEntry {
                scene_id: scene.id,
                seed,
                split,
                dir: rel,
            });
        }
    }
    let index = DatasetIndex {
        version: DATASET_FORMAT_VERSION,
        n_points: spec.n_points,
        scenes,
    };
    fs::write(out.join(DATASET_INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

pub fn load_index(dir: &Path) -> Result<DatasetIndex> {
    let path: PathBuf = dir.join(DATASET_INDEX);
    let index: DatasetIndex =
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| corrupt(&path, e.to_string()))?;
    if index.version != DATASET_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: index.version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    Ok(index)
}

/// Load every scene of the requested split (all splits when `None`).
pub fn load_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<LoadedScene>> {
    let index = load_index(dir)?;
    let mut out = Vec::new();
    for entry in index.scenes.iter().filter(|e| split.is_none_or(|s| s == e.split)) {
        let (scene, annotations) = load_scene(&dir.join(&entry.dir))?;
        out.push(LoadedScene {
            split: entry.split,
            scene,
            annotations,
        });
    }
    Ok(out)
}
