//! Geometric enhancer: a three-block kernel-point convolution stem that
//! produces full-resolution geometric features, and the zero-initialized
//! gated cross-attention that injects them into encoder blocks.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};
use crate::geometry::{gather, knn, NeighborIndex, Point3, PointCloud};
use crate::nn::{attention_weights, LayerNorm, Linear};
use crate::params::{Init, ParamBuilder};

/// Rigid kernel layout: one point at the origin and `k - 1` points spread
/// over a sphere of radius `sigma / 2` (Fibonacci lattice).
pub fn kernel_offsets(k: usize, sigma: f64) -> Vec<Point3> {
    let mut out = vec![[0.0; 3]];
    let shell = k.saturating_sub(1);
    let radius = sigma / 2.0;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for i in 0..shell {
        let y = if shell == 1 {
            0.0
        } else {
            1.0 - 2.0 * (i as f64 + 0.5) / shell as f64
        };
        let r = (1.0 - y * y).max(0.0).sqrt();
        let theta = golden * i as f64;
        out.push([radius * r * theta.cos(), radius * y, radius * r * theta.sin()]);
    }
    out.truncate(k.max(1));
    out
}

#[derive(Debug, Clone)]
pub struct KernelPointConvParams {
    pub kernel_offsets: Vec<Point3>,
    /// `[K x D_in x D_out]`
    pub weights: Tensor,
    pub sigma: f64,
    pub neighbor_k: usize,
}

impl KernelPointConvParams {
    pub fn new(pb: &mut ParamBuilder<'_>, k: usize, d_in: usize, d_out: usize, sigma: f64, neighbor_k: usize) -> Result<Self> {
        let std = 1.0 / ((k * d_in).max(1) as f64).sqrt();
        let weights = pb.var("kernel", &[k, d_in, d_out], Init::Normal(std))?;
        let params = Self {
            kernel_offsets: kernel_offsets(k, sigma),
            weights,
            sigma,
            neighbor_k,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel_offsets.len();
        ensure!(k >= 1, "kernel needs at least one point");
        ensure!(self.sigma > 0.0 && self.sigma.is_finite(), "sigma must be positive");
        ensure!(self.neighbor_k >= 1, "neighbor_k must be positive");
        for p in &self.kernel_offsets {
            ensure!(p.iter().all(|v| v.is_finite()), "kernel offsets must be finite");
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            ensure!(r <= self.sigma, "kernel offset outside the sigma ball");
        }
        let dims = self.weights.dims();
        ensure!(
            dims.len() == 3 && dims[0] == k,
            "kernel weights {:?} do not match {k} kernel points",
            dims
        );
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weights.dims()[2]
    }
}

/// Hat-function correlations `max(0, 1 - |x_j - x_c - kappa_k| / sigma)`
/// laid out as `[N x K x k]`. Depends only on geometry, so it is computed
/// once per cloud and reused by every conv block.
#[derive(Debug, Clone)]
pub struct KernelCorrelation {
    pub neighbors: NeighborIndex,
    pub weights: Tensor,
}

impl KernelCorrelation {
    pub fn new(
        coords: &[Point3],
        neighbors: NeighborIndex,
        offsets: &[Point3],
        sigma: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let n = coords.len();
        ensure!(
            neighbors.rows() == n,
            "neighbour table has {} rows for {n} points",
            neighbors.rows()
        );
        if let Some(max) = neighbors.max_index() {
            ensure!(max < n, "neighbour index {max} out of range");
        }
        let nk = neighbors.k();
        let kk = offsets.len();
        let mut w = Vec::with_capacity(n * kk * nk);
        for c in 0..n {
            let center = coords[c];
            for kappa in offsets {
                for &j in neighbors.row(c) {
                    let p = coords[j];
                    let d = [
                        p[0] - center[0] - kappa[0],
                        p[1] - center[1] - kappa[1],
                        p[2] - center[2] - kappa[2],
                    ];
                    let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    w.push((1.0 - dist / sigma).max(0.0));
                }
            }
        }
        let weights = Tensor::from_vec(w, (n, kk, nk), device)?.to_dtype(dtype)?;
        Ok(Self { neighbors, weights })
    }

    /// Apply one convolution with this geometry.
    pub fn convolve(&self, feats: &Tensor, kernel: &Tensor) -> Result<Tensor> {
        let (n, d_in) = feats.dims2()?;
        let (kk, kd_in, d_out) = kernel.dims3()?;
        ensure!(d_in == kd_in, "features have {d_in} channels, kernel expects {kd_in}");
        ensure!(
            n == self.neighbors.rows(),
            "features have {n} rows, geometry has {}",
            self.neighbors.rows()
        );
        ensure!(
            self.weights.dims()[1] == kk,
            "kernel has {kk} points, geometry was built for {}",
            self.weights.dims()[1]
        );
        let grouped = gather(feats, &self.neighbors)?;
        let aggregated = self.weights.matmul(&grouped)?;
        Ok(aggregated
            .reshape((n, kk * d_in))?
            .matmul(&kernel.reshape((kk * d_in, d_out))?)?)
    }
}

/// `out[c] = sum_j sum_k h(x_j - x_c - kappa_k) * feats[j] W_k` over the
/// neighbour rows of each point.
pub fn kernel_point_convolution(
    cloud_coords: &[Point3],
    feats: &Tensor,
    neighbors: &NeighborIndex,
    params: &KernelPointConvParams,
) -> Result<Tensor> {
    params.validate()?;
    let (n, d_in) = feats.dims2()?;
    ensure!(n == cloud_coords.len(), "feature rows {n} != point count {}", cloud_coords.len());
    ensure!(d_in == params.d_in(), "feature width {d_in} != kernel input width {}", params.d_in());
    let corr = KernelCorrelation::new(
        cloud_coords,
        neighbors.clone(),
        &params.kernel_offsets,
        params.sigma,
        feats.dtype(),
        feats.device(),
    )?;
    corr.convolve(feats, &params.weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StemConfig {
    pub channels: [usize; 3],
    pub kernel_points: usize,
    pub sigma: f64,
    pub neighbor_k: usize,
    /// Learned q/k/v maps inside the gated cross-attention.
    pub attention_projections: bool,
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            channels: [64, 64, 64],
            kernel_points: 7,
            sigma: 0.3,
            neighbor_k: 16,
            attention_projections: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StemBlock {
    pub conv: KernelPointConvParams,
    pub norm: LayerNorm,
}

/// Three conv -> per-point channel norm -> ReLU blocks.
#[derive(Debug, Clone)]
pub struct GeometricStem {
    pub blocks: Vec<StemBlock>,
    pub config: StemConfig,
}

#[derive(Debug, Clone)]
pub struct GeometricFeatures {
    pub values: Tensor,
    pub coords: Arc<[Point3]>,
}

impl GeometricFeatures {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }
}

impl GeometricStem {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, config: &StemConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(3);
        let mut d_in = in_dim;
        for (i, &d_out) in config.channels.iter().enumerate() {
            let mut bp = pb.pp(format!("block{i}"));
            let conv = KernelPointConvParams::new(
                &mut bp,
                config.kernel_points,
                d_in,
                d_out,
                config.sigma,
                config.neighbor_k,
            )?;
            let norm = LayerNorm::new(&mut bp.pp("norm"), d_out)?;
            blocks.push(StemBlock { conv, norm });
            d_in = d_out;
        }
        Ok(Self {
            blocks,
            config: config.clone(),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.channels[2]
    }

    pub fn correlation(&self, coords: &[Point3], dtype: DType, device: &Device) -> Result<KernelCorrelation> {
        let k = self.config.neighbor_k.min(coords.len());
        let neighbors = knn(coords, coords, k)?;
        KernelCorrelation::new(
            coords,
            neighbors,
            &self.blocks[0].conv.kernel_offsets,
            self.config.sigma,
            dtype,
            device,
        )
    }

    /// Forward with precomputed geometry.
    pub fn forward(&self, corr: &KernelCorrelation, feats: &Tensor) -> Result<Tensor> {
        let mut x = feats.clone();
        for block in &self.blocks {
            x = corr.convolve(&x, &block.conv.weights)?;
            x = block.norm.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

/// Input features of the stem: the cloud's auxiliary per-point features.
pub fn stem_input(cloud: &PointCloud, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = cloud.len();
    let f = cloud.feat_dim();
    Ok(Tensor::from_vec(cloud.feats().to_vec(), (n, f), device)?.to_dtype(dtype)?)
}

pub fn geometric_stem(cloud: &PointCloud, stem: &GeometricStem, dtype: DType) -> Result<GeometricFeatures> {
    let device = Device::Cpu;
    let coords: Arc<[Point3]> = cloud.coords_f64().into();
    let corr = stem.correlation(&coords, dtype, &device)?;
    let values = stem.forward(&corr, &stem_input(cloud, dtype, &device)?)?;
    Ok(GeometricFeatures { values, coords })
}

/// One learnable scalar gate per encoder block, initialized to exactly zero.
#[derive(Debug, Clone)]
pub struct GateSet {
    pub gates: Tensor,
}

impl GateSet {
    pub fn new(pb: &mut ParamBuilder<'_>, blocks: usize) -> Result<Self> {
        Ok(Self {
            gates: pb.var("gates", &[blocks], Init::Zeros)?,
        })
    }

    pub fn len(&self) -> usize {
        self.gates.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gate(&self, i: usize) -> Result<Tensor> {
        Ok(self.gates.narrow(0, i, 1)?)
    }
}

/// `f + gate * softmax(f g_f^T / sqrt(D)) g_f`.
pub fn gated_cross_attention(f: &Tensor, g_f: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let (_, d) = f.dims2()?;
    let (_, dg) = g_f.dims2()?;
    if d != dg {
        return Err(invalid(format!("cross-attention width mismatch: {d} vs {dg}")));
    }
    let w = attention_weights(f, g_f, None)?;
    let update = w.matmul(g_f)?;
    Ok((f + update.broadcast_mul(gate)?)?)
}

/// Optional learned q/k/v maps, one triple per encoder block.
#[derive(Debug, Clone)]
pub struct CrossProjections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

/// Everything needed to inject geometric features after each encoder block.
#[derive(Debug, Clone)]
pub struct GemInjector {
    pub gates: GateSet,
    pub projections: Option<Vec<CrossProjections>>,
}

impl GemInjector {
    pub fn new(pb: &mut ParamBuilder<'_>, blocks: usize, dim: usize, projections: bool) -> Result<Self> {
        let gates = GateSet::new(pb, blocks)?;
        let projections = if projections {
            let mut v = Vec::with_capacity(blocks);
            for i in 0..blocks {
                let mut p = pb.pp(format!("proj{i}"));
                v.push(CrossProjections {
                    q: Linear::new(&mut p.pp("q"), dim, dim, false)?,
                    k: Linear::new(&mut p.pp("k"), dim, dim, false)?,
                    v: Linear::new(&mut p.pp("v"), dim, dim, false)?,
                });
            }
            Some(v)
        } else {
            None
        };
        Ok(Self { gates, projections })
    }

    pub fn inject(&self, block: usize, f: &Tensor, g_f: &Tensor) -> Result<Tensor> {
        let gate = self.gates.gate(block)?;
        match &self.projections {
            None => gated_cross_attention(f, g_f, &gate),
            Some(p) => {
                let p = &p[block];
                let w = attention_weights(&p.q.forward(f)?, &p.k.forward(g_f)?, None)?;
                let update = w.matmul(&p.v.forward(g_f)?)?;
                Ok((f + update.broadcast_mul(&gate)?)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec2;
    use crate::params::ParamStore;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        crate::nn::tensor_from_rows(&v, DType::F64, &Device::Cpu).unwrap()
    }

    fn manual_params(offsets: Vec<Point3>, weights: Vec<f64>, d_in: usize, d_out: usize, sigma: f64) -> KernelPointConvParams {
        let k = offsets.len();
        KernelPointConvParams {
            kernel_offsets: offsets,
            weights: Tensor::from_vec(weights, (k, d_in, d_out), &Device::Cpu).unwrap(),
            sigma,
            neighbor_k: 1,
        }
    }

    #[test]
    fn offsets_sit_on_half_sigma_shell() {
        let off = kernel_offsets(7, 0.4);
        assert_eq!(off.len(), 7);
        assert_eq!(off[0], [0.0; 3]);
        for p in &off[1..] {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_neighbor_on_kernel_point() {
        // Point 1 sits exactly at kappa_1 relative to point 0; kappa_2 is far.
        let coords = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let params = manual_params(
            vec![[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0]],
            vec![2.0, 3.0, -1.0, 5.0],
            2,
            1,
            0.15,
        );
        let feats = t2(&[&[0.0, 0.0], &[1.5, -2.0]]);
        let nb = NeighborIndex::from_rows(1, vec![1, 1]).unwrap();
        let out = to_f64_vec2(&kernel_point_convolution(&coords, &feats, &nb, &params).unwrap()).unwrap();
        // Row 0: correlation 1 with kernel 1 only -> feats[1] . W_1 = 1.5*2 - 2*3
        assert!((out[0][0] - (1.5 * 2.0 - 2.0 * 3.0)).abs() < 1e-12);
        // Row 1 sees itself at relative 0: distance 0.1 to both kernels -> factor 1/3 each.
        let h = 1.0 - 0.1 / 0.15;
        let expect = h * (1.5 * 2.0 - 2.0 * 3.0) + h * (1.5 * -1.0 - 2.0 * 5.0);
        assert!((out[1][0] - expect).abs() < 1e-12);
    }

    #[test]
    fn far_neighbors_give_zero() {
        let coords = vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let params = manual_params(vec![[0.0; 3]], vec![1.0, 1.0], 1, 2, 0.5);
        let feats = t2(&[&[1.0], &[1.0]]);
        let nb = NeighborIndex::from_rows(1, vec![1, 0]).unwrap();
        let out = to_f64_vec2(&kernel_point_convolution(&coords, &feats, &nb, &params).unwrap()).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn two_neighbors_two_kernels_double_sum() {
        // Hand-evaluated: center at origin, neighbours at (0.1,0,0) and (0,0.2,0),
        // kernels at origin and (0.1,0,0), sigma 0.3, scalar weights w1=2, w2=-1.
        let coords = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.2, 0.0]];
        let params = manual_params(vec![[0.0; 3], [0.1, 0.0, 0.0]], vec![2.0, -1.0], 1, 1, 0.3);
        let feats = t2(&[&[0.0], &[3.0], &[4.0]]);
        let nb = NeighborIndex::from_rows(2, vec![1, 2, 0, 0, 0, 0]).unwrap();
        let out = to_f64_vec2(&kernel_point_convolution(&coords, &feats, &nb, &params).unwrap()).unwrap();
        let h = |d: f64| (1.0f64 - d / 0.3).max(0.0);
        let d22 = (0.1f64 * 0.1 + 0.2 * 0.2).sqrt();
        let expect = 3.0 * (h(0.1) * 2.0 + h(0.0) * -1.0) + 4.0 * (h(0.2) * 2.0 + h(d22) * -1.0);
        assert!((out[0][0] - expect).abs() < 1e-12, "{} vs {expect}", out[0][0]);
    }

    #[test]
    fn conv_rejects_shape_mismatch() {
        let coords = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        let params = manual_params(vec![[0.0; 3]], vec![1.0, 1.0], 2, 1, 0.5);
        let feats = t2(&[&[1.0], &[1.0]]);
        let nb = NeighborIndex::from_rows(1, vec![0, 1]).unwrap();
        assert!(kernel_point_convolution(&coords, &feats, &nb, &params).is_err());
    }

    #[test]
    fn stem_of_zero_features_is_zero() {
        let mut store = ParamStore::new(DType::F64, 4);
        let cfg = StemConfig {
            channels: [4, 4, 6],
            ..StemConfig::default()
        };
        let stem = GeometricStem::new(&mut store.root().pp("stem"), 3, &cfg).unwrap();
        let coords: Vec<[f32; 3]> = (0..20).map(|i| [i as f32 * 0.05, (i % 3) as f32 * 0.1, 0.0]).collect();
        let cloud = PointCloud::unlabeled(coords, vec![0.0; 60], 3).unwrap();
        let g = geometric_stem(&cloud, &stem, DType::F64).unwrap();
        assert_eq!(g.values.dims(), &[20, 6]);
        assert!(to_f64_vec2(&g.values).unwrap().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_zero_is_identity() {
        let f = Tensor::randn(0f64, 1.0, (3, 4), &Device::Cpu).unwrap();
        let g = Tensor::randn(0f64, 1.0, (7, 4), &Device::Cpu).unwrap();
        let gate = Tensor::zeros(1, DType::F64, &Device::Cpu).unwrap();
        let out = gated_cross_attention(&f, &g, &gate).unwrap();
        assert_eq!(to_f64_vec2(&out).unwrap(), to_f64_vec2(&f).unwrap());
    }

    #[test]
    fn identical_sources_add_gate_times_row() {
        let f = t2(&[&[0.3, -1.0], &[2.0, 0.5]]);
        let g = t2(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let gate = Tensor::new(&[0.5f64], &Device::Cpu).unwrap();
        let out = to_f64_vec2(&gated_cross_attention(&f, &g, &gate).unwrap()).unwrap();
        assert!((out[0][0] - 0.8).abs() < 1e-12 && (out[0][1] - 0.0).abs() < 1e-12);
        assert!((out[1][0] - 2.5).abs() < 1e-12 && (out[1][1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_hand_fixture() {
        let f = t2(&[&[1.0, 0.0]]);
        let g = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let gate = Tensor::new(&[1.0f64], &Device::Cpu).unwrap();
        let out = to_f64_vec2(&gated_cross_attention(&f, &g, &gate).unwrap()).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let p0 = s.exp() / (s.exp() + 1.0);
        assert!((out[0][0] - (1.0 + p0)).abs() < 1e-12);
        assert!((out[0][1] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_rejects_width_mismatch() {
        let f = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let g = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
        let gate = Tensor::zeros(1, DType::F64, &Device::Cpu).unwrap();
        assert!(gated_cross_attention(&f, &g, &gate).is_err());
    }

    #[test]
    fn gates_start_at_zero() {
        let mut store = ParamStore::new(DType::F64, 9);
        let gem = GemInjector::new(&mut store.root().pp("gem"), 5, 8, false).unwrap();
        assert_eq!(gem.gates.gates.to_vec1::<f64>().unwrap(), vec![0.0; 5]);
    }
}
