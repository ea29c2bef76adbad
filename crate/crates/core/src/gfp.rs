//! Geometric-guided feature propagation: coarse encoder features are lifted
//! through the density chain `N1 -> N2 -> N3 -> N` with geometric features
//! acting as local centers at every level.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::BlockFeatures;
use crate::error::{ensure, invalid, Result};
use crate::gem::{CrossProjections, GeometricFeatures};
use crate::geometry::{farthest_point_sample, gather, knn, IndexSet, NeighborIndex, Point3};
use crate::nn::{attention_weights, Linear};
use crate::params::ParamBuilder;

#[derive(Debug, Clone)]
pub struct DensityLevel {
    pub coords: Arc<[Point3]>,
    pub feats: Tensor,
}

impl DensityLevel {
    pub fn new(coords: impl Into<Arc<[Point3]>>, feats: Tensor) -> Result<Self> {
        let coords = coords.into();
        let rows = feats.dims2()?.0;
        ensure!(rows == coords.len(), "level has {} coords but {rows} feature rows", coords.len());
        Ok(Self { coords, feats })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PerPointEmbeddings {
    pub values: Tensor,
}

/// Precomputed inverse-distance interpolation from a source set onto
/// destination points.
#[derive(Debug, Clone)]
pub struct IdwPlan {
    pub neighbors: NeighborIndex,
    /// Normalized weights `[M x k x 1]`.
    pub weights: Tensor,
}

impl IdwPlan {
    pub fn new(src: &[Point3], dst: &[Point3], k: usize, eps: f64, dtype: DType, device: &Device) -> Result<Self> {
        ensure!(k <= src.len(), "k={k} exceeds {} source points", src.len());
        let neighbors = knn(dst, src, k)?;
        let mut w = Vec::with_capacity(dst.len() * k);
        for (m, p) in dst.iter().enumerate() {
            let row: Vec<f64> = neighbors
                .row(m)
                .iter()
                .map(|&j| 1.0 / (crate::geometry::squared_distance(p, &src[j]).sqrt() + eps))
                .collect();
            let total: f64 = row.iter().sum();
            w.extend(row.into_iter().map(|v| v / total));
        }
        let weights = Tensor::from_vec(w, (dst.len(), k, 1), device)?.to_dtype(dtype)?;
        Ok(Self { neighbors, weights })
    }

    pub fn apply(&self, feats: &Tensor) -> Result<Tensor> {
        let g = gather(feats, &self.neighbors)?;
        Ok(g.broadcast_mul(&self.weights)?.sum(1)?)
    }
}

/// `out[m] = sum_j w_j src[n_j] / sum_j w_j` with `w_j = 1 / (d_j + eps)`
/// over the `k` nearest source points.
pub fn inverse_distance_propagate(src: &DensityLevel, dst_coords: &[Point3], k: usize, eps: f64) -> Result<Tensor> {
    if k > src.len() {
        return Err(invalid(format!("k={k} exceeds {} source points", src.len())));
    }
    let plan = IdwPlan::new(&src.coords, dst_coords, k, eps, src.feats.dtype(), src.feats.device())?;
    plan.apply(&src.feats)
}

/// Copy the FPS-selected rows of the geometric features (no pooling).
pub fn fps_feature_downsample(g_f: &GeometricFeatures, m: usize) -> Result<DensityLevel> {
    ensure!(m <= g_f.len(), "cannot downsample {} points to {m}", g_f.len());
    let idx = farthest_point_sample(&g_f.coords, m, 0)?;
    select_level(g_f, &idx)
}

pub fn select_level(g_f: &GeometricFeatures, idx: &IndexSet) -> Result<DensityLevel> {
    let coords: Vec<Point3> = idx.select(&g_f.coords);
    let ids: Vec<u32> = idx.indices.iter().map(|&i| i as u32).collect();
    let ids = Tensor::from_vec(ids, idx.len(), g_f.values.device())?;
    DensityLevel::new(coords, g_f.values.index_select(&ids, 0)?)
}

/// `ReLU(W [upsampled ; geo] + b)`.
#[derive(Debug, Clone)]
pub struct Fuse {
    pub linear: Linear,
}

impl Fuse {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(pb, 2 * dim, dim, true)?,
        })
    }

    pub fn forward(&self, upsampled: &Tensor, geo: &Tensor) -> Result<Tensor> {
        ensure!(
            upsampled.dims() == geo.dims(),
            "fuse inputs differ in shape: {:?} vs {:?}",
            upsampled.dims(),
            geo.dims()
        );
        Ok(self.linear.forward(&Tensor::cat(&[upsampled, geo], D::Minus1)?)?.relu()?)
    }
}

/// `W [f_5 ; h_point] + b`, kept signed.
#[derive(Debug, Clone)]
pub struct FuseLm {
    pub linear: Linear,
}

impl FuseLm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(pb, 2 * dim, dim, true)?,
        })
    }

    pub fn forward(&self, f5: &Tensor, h_point: &Tensor) -> Result<Tensor> {
        let (r1, _) = f5.dims2()?;
        let (r2, _) = h_point.dims2()?;
        ensure!(r1 == r2, "fuse_lm row mismatch: {r1} vs {r2}");
        self.linear.forward(&Tensor::cat(&[f5, h_point], D::Minus1)?)
    }
}

/// Attention weights `[M x 1 x k]` of each center over its gathered sources.
pub fn local_attention_weights(centers: &Tensor, neighbours: &Tensor) -> Result<Tensor> {
    let (m, d) = centers.dims2()?;
    attention_weights(&centers.reshape((m, 1, d))?, neighbours, None)
}

/// `out[m] = c[m] + softmax(c[m] f_nb^T / sqrt(D)) f_nb` with `f_nb` the
/// features of the `k` nearest sources, precomputed in `neighbors`.
pub fn attend(centers: &Tensor, sources: &Tensor, neighbors: &NeighborIndex) -> Result<Tensor> {
    let (m, d) = centers.dims2()?;
    let (_, ds) = sources.dims2()?;
    ensure!(d == ds, "center width {d} != source width {ds}");
    ensure!(neighbors.rows() == m, "neighbour table has {} rows for {m} centers", neighbors.rows());
    let f_nb = gather(sources, neighbors)?;
    let w = local_attention_weights(centers, &f_nb)?;
    Ok((centers + w.matmul(&f_nb)?.reshape((m, d))?)?)
}

pub fn attentive_propagation(centers: &DensityLevel, sources: &DensityLevel, k: usize) -> Result<Tensor> {
    if k > sources.len() {
        return Err(invalid(format!("k={k} exceeds {} sources", sources.len())));
    }
    let nb = knn(&centers.coords, &sources.coords, k)?;
    attend(&centers.feats, &sources.feats, &nb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GfpConfig {
    pub k: usize,
    pub idw_k: usize,
    pub eps: f64,
    pub n2_divisor: usize,
    pub n3_divisor: usize,
    pub attention_projections: bool,
}

impl Default for GfpConfig {
    fn default() -> Self {
        Self {
            k: 8,
            idw_k: 3,
            eps: 1e-8,
            n2_divisor: 16,
            n3_divisor: 4,
            attention_projections: false,
        }
    }
}

impl GfpConfig {
    /// `(N2, N3)` for a cloud of `n` points with `n1` tokens; enforces
    /// `N1 < N2 < N3 < N`.
    pub fn level_sizes(&self, n: usize, n1: usize) -> Result<(usize, usize)> {
        ensure!(self.n2_divisor > 0 && self.n3_divisor > 0, "level divisors must be positive");
        let n2 = n / self.n2_divisor;
        let n3 = n / self.n3_divisor;
        ensure!(
            n1 < n2 && n2 < n3 && n3 < n,
            "density chain must be strictly increasing: N1={n1}, N2={n2}, N3={n3}, N={n}"
        );
        Ok((n2, n3))
    }
}

/// Geometry of the propagation chain for one cloud.
#[derive(Debug, Clone)]
pub struct PropagationPlan {
    pub n2_index: IndexSet,
    pub n3_index: IndexSet,
    /// f_3 at tokens -> N3 points.
    pub up3: IdwPlan,
    /// f_4 at tokens -> N2 points.
    pub up4: IdwPlan,
    /// N2 centers over N1 sources.
    pub nb_to_n2: NeighborIndex,
    /// N3 centers over N2 sources.
    pub nb_to_n3: NeighborIndex,
    /// N centers over N3 sources.
    pub nb_to_full: NeighborIndex,
    pub n2_ids: Tensor,
    pub n3_ids: Tensor,
}

impl PropagationPlan {
    pub fn new(
        coords: &[Point3],
        token_coords: &[Point3],
        n2: usize,
        n3: usize,
        cfg: &GfpConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let n1 = token_coords.len();
        ensure!(n1 < n2 && n2 < n3 && n3 < coords.len(), "density chain must be strictly increasing");
        ensure!(cfg.k <= n1, "attentive k={} exceeds {n1} tokens", cfg.k);
        ensure!(cfg.idw_k <= n1, "interpolation k={} exceeds {n1} tokens", cfg.idw_k);
        let n3_index = farthest_point_sample(coords, n3, 0)?;
        // FPS is greedy and deterministic, so the N2 selection is a prefix.
        let n2_index = IndexSet {
            indices: n3_index.indices[..n2].to_vec(),
            source_size: coords.len(),
        };
        let c2 = n2_index.select(coords);
        let c3 = n3_index.select(coords);
        let ids = |idx: &IndexSet| -> Result<Tensor> {
            let v: Vec<u32> = idx.indices.iter().map(|&i| i as u32).collect();
            Ok(Tensor::from_vec(v, idx.len(), device)?)
        };
        Ok(Self {
            up3: IdwPlan::new(token_coords, &c3, cfg.idw_k, cfg.eps, dtype, device)?,
            up4: IdwPlan::new(token_coords, &c2, cfg.idw_k, cfg.eps, dtype, device)?,
            nb_to_n2: knn(&c2, token_coords, cfg.k)?,
            nb_to_n3: knn(&c3, &c2, cfg.k)?,
            nb_to_full: knn(coords, &c3, cfg.k)?,
            n2_ids: ids(&n2_index)?,
            n3_ids: ids(&n3_index)?,
            n2_index,
            n3_index,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AttentiveStage {
    pub projections: Option<CrossProjections>,
}

impl AttentiveStage {
    pub fn forward(&self, centers: &Tensor, sources: &Tensor, nb: &NeighborIndex) -> Result<Tensor> {
        match &self.projections {
            None => attend(centers, sources, nb),
            Some(p) => {
                let (m, d) = centers.dims2()?;
                let keys = gather(&p.k.forward(sources)?, nb)?;
                let values = gather(&p.v.forward(sources)?, nb)?;
                let w = local_attention_weights(&p.q.forward(centers)?, &keys)?;
                Ok((centers + w.matmul(&values)?.reshape((m, d))?)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePropagation {
    pub config: GfpConfig,
    pub fuse3: Fuse,
    pub fuse4: Fuse,
    pub fuse5: FuseLm,
    pub stages: [AttentiveStage; 3],
}

impl FeaturePropagation {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, config: &GfpConfig) -> Result<Self> {
        let stage = |pb: &mut ParamBuilder<'_>, name: &str| -> Result<AttentiveStage> {
            let projections = if config.attention_projections {
                let mut p = pb.pp(name);
                Some(CrossProjections {
                    q: Linear::new(&mut p.pp("q"), dim, dim, false)?,
                    k: Linear::new(&mut p.pp("k"), dim, dim, false)?,
                    v: Linear::new(&mut p.pp("v"), dim, dim, false)?,
                })
            } else {
                None
            };
            Ok(AttentiveStage { projections })
        };
        Ok(Self {
            config: config.clone(),
            fuse3: Fuse::new(&mut pb.pp("fuse3"), dim)?,
            fuse4: Fuse::new(&mut pb.pp("fuse4"), dim)?,
            fuse5: FuseLm::new(&mut pb.pp("fuse5"), dim)?,
            stages: [stage(pb, "stage_n2")?, stage(pb, "stage_n3")?, stage(pb, "stage_full")?],
        })
    }

    /// Run the chain with `guidance` (`[N x D]`) as the full-resolution
    /// geometric stream.
    pub fn forward(
        &self,
        blocks: &BlockFeatures,
        h_point: &Tensor,
        guidance: &Tensor,
        plan: &PropagationPlan,
    ) -> Result<PerPointEmbeddings> {
        let (f3, f4, f5) = blocks.deepest_three();
        let (n1, d) = f5.dims2()?;
        let (hn, hd) = h_point.dims2()?;
        ensure!(hn == n1 && hd == d, "h_point is {hn}x{hd}, expected {n1}x{d}");
        let (_, gd) = guidance.dims2()?;
        ensure!(gd == d, "guidance width {gd} != {d}");

        let up3 = plan.up3.apply(f3)?;
        let up4 = plan.up4.apply(f4)?;
        let geo3 = guidance.index_select(&plan.n3_ids, 0)?;
        let geo2 = guidance.index_select(&plan.n2_ids, 0)?;
        let t3 = self.fuse3.forward(&up3, &geo3)?;
        let t4 = self.fuse4.forward(&up4, &geo2)?;
        let t5 = self.fuse5.forward(f5, h_point)?;

        let at_n2 = self.stages[0].forward(&t4, &t5, &plan.nb_to_n2)?;
        let at_n3 = self.stages[1].forward(&t3, &at_n2, &plan.nb_to_n3)?;
        let full = self.stages[2].forward(guidance, &at_n3, &plan.nb_to_full)?;
        Ok(PerPointEmbeddings { values: full })
    }
}

/// Standalone chain assembly: builds the plan from `g_f` and the encoder's
/// token coordinates, then propagates.
pub fn propagate_to_full(
    blocks: &BlockFeatures,
    h_point: &Tensor,
    g_f: &GeometricFeatures,
    gfp: &FeaturePropagation,
    levels: (usize, usize),
) -> Result<PerPointEmbeddings> {
    let plan = PropagationPlan::new(
        &g_f.coords,
        &blocks.token_coords,
        levels.0,
        levels.1,
        &gfp.config,
        g_f.values.dtype(),
        g_f.values.device(),
    )?;
    gfp.forward(blocks, h_point, &g_f.values, &plan)
}
