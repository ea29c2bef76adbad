//! Point-set primitives: farthest-point sampling, brute-force k-nearest
//! neighbours and row gathering.
//!
//! Distances are compared as squared Euclidean norms in 64-bit arithmetic.
//! Every tie is broken towards the lowest index so outputs are bit-stable.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, invalid, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn squared_distance(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// A labelled point cloud. Coordinates are meters, features are unitless
/// (RGB in `[0, 1]` for the synthetic scenes).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f32; 3]>,
    feats: Vec<f32>,
    feat_dim: usize,
    instance_ids: Option<Vec<i32>>,
    category_ids: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn new(
        coords: Vec<[f32; 3]>,
        feats: Vec<f32>,
        feat_dim: usize,
        instance_ids: Option<Vec<i32>>,
        category_ids: Option<Vec<i32>>,
    ) -> Result<Self> {
        let n = coords.len();
        ensure!(n >= 1, "point cloud must contain at least one point");
        ensure!(
            feats.len() == n * feat_dim,
            "feature buffer holds {} values, expected {n}x{feat_dim}",
            feats.len()
        );
        ensure!(
            coords.iter().flatten().all(|v| v.is_finite()),
            "point cloud has non-finite coordinates"
        );
        ensure!(
            feats.iter().all(|v| v.is_finite()),
            "point cloud has non-finite features"
        );
        for (name, labels) in [("instance", &instance_ids), ("category", &category_ids)] {
            if let Some(labels) = labels {
                ensure!(
                    labels.len() == n,
                    "{name} labels have length {}, expected {n}",
                    labels.len()
                );
                ensure!(
                    labels.iter().all(|&l| l >= -1),
                    "{name} labels must be >= -1"
                );
            }
        }
        Ok(Self {
            coords,
            feats,
            feat_dim,
            instance_ids,
            category_ids,
        })
    }

    /// Unlabelled cloud with no auxiliary features beyond `feats`.
    pub fn unlabeled(coords: Vec<[f32; 3]>, feats: Vec<f32>, feat_dim: usize) -> Result<Self> {
        Self::new(coords, feats, feat_dim, None, None)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn coords(&self) -> &[[f32; 3]] {
        &self.coords
    }

    pub fn feats(&self) -> &[f32] {
        &self.feats
    }

    pub fn feat_row(&self, i: usize) -> &[f32] {
        &self.feats[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn instance_ids(&self) -> Option<&[i32]> {
        self.instance_ids.as_deref()
    }

    pub fn category_ids(&self) -> Option<&[i32]> {
        self.category_ids.as_deref()
    }

    pub fn coords_f64(&self) -> Vec<Point3> {
        self.coords
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }
}

/// Indices into a source set of `source_size` points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    pub indices: Vec<usize>,
    pub source_size: usize,
}

impl IndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn select(&self, points: &[Point3]) -> Vec<Point3> {
        self.indices.iter().map(|&i| points[i]).collect()
    }
}

fn check_finite(points: &[Point3], what: &str) -> Result<()> {
    ensure!(
        points.iter().flatten().all(|v| v.is_finite()),
        "{what} contain non-finite coordinates"
    );
    Ok(())
}

/// Greedy farthest-point sampling of `m` points starting at `start`.
pub fn farthest_point_sample(coords: &[Point3], m: usize, start: usize) -> Result<IndexSet> {
    let n = coords.len();
    ensure!(n > 0, "cannot sample from an empty point set");
    ensure!(m >= 1 && m <= n, "sample size {m} outside [1, {n}]");
    ensure!(start < n, "start index {start} out of range for {n} points");
    check_finite(coords, "coordinates")?;

    let mut min_dist = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut indices = Vec::with_capacity(m);
    let mut current = start;
    for _ in 0..m {
        indices.push(current);
        taken[current] = true;
        let anchor = coords[current];
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, p) in coords.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = squared_distance(p, &anchor);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_dist {
                best_dist = min_dist[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(IndexSet {
        indices,
        source_size: n,
    })
}

/// Seeded-random start index for callers that opt out of the fixed start.
pub fn random_start(n: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..n)
}

/// Row-major `[rows x k]` neighbour table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn from_rows(k: usize, indices: Vec<usize>) -> Result<Self> {
        ensure!(k >= 1, "neighbour count must be positive");
        ensure!(indices.len() % k == 0, "index buffer is not a multiple of k");
        Ok(Self { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }
}

/// Brute-force k-nearest neighbours, each row sorted by increasing distance.
pub fn knn(queries: &[Point3], refs: &[Point3], k: usize) -> Result<NeighborIndex> {
    ensure!(k >= 1, "k must be at least 1");
    ensure!(
        k <= refs.len(),
        "k={k} exceeds the {} reference points",
        refs.len()
    );
    check_finite(queries, "queries")?;
    check_finite(refs, "references")?;

    let mut out = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(refs.len());
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for q in queries {
        scratch.clear();
        scratch.extend(refs.iter().enumerate().map(|(i, r)| (squared_distance(q, r), i)));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, order);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(order);
        out.extend(scratch.iter().map(|&(_, i)| i));
    }
    NeighborIndex::from_rows(k, out)
}

/// `out[q, j, :] = features[indices[q, j], :]`.
pub fn gather(features: &Tensor, indices: &NeighborIndex) -> Result<Tensor> {
    let (rows, dim) = features.dims2()?;
    if let Some(max) = indices.max_index() {
        if max >= rows {
            return Err(invalid(format!(
                "gather index {max} out of range for {rows} rows"
            )));
        }
    }
    let ids: Vec<u32> = indices.flat().iter().map(|&i| i as u32).collect();
    let ids = Tensor::from_vec(ids, indices.flat().len(), features.device())?;
    Ok(features
        .index_select(&ids, 0)?
        .reshape((indices.rows(), indices.k(), dim))?)
}
