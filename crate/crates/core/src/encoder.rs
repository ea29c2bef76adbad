//! Transformer point encoder. Points are reduced to `n_tokens` centers by
//! farthest-point sampling, each center max-pools a linear embedding of its
//! local group, and `blocks x layers_per_block` self-attention layers follow.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{farthest_point_sample, knn, IndexSet, Point3, PointCloud};
use crate::gem::GemInjector;
use crate::nn::{Linear, TransformerLayer};
use crate::params::ParamBuilder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_tokens: usize,
    pub dim: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub heads: usize,
    pub group_k: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_tokens: 128,
            dim: 64,
            blocks: 5,
            layers_per_block: 1,
            heads: 4,
            group_k: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim > 0 && self.heads > 0, "encoder dim and heads must be positive");
        ensure!(self.dim % self.heads == 0, "encoder dim {} not divisible by {} heads", self.dim, self.heads);
        ensure!(self.blocks >= 3, "encoder needs at least 3 blocks, got {}", self.blocks);
        ensure!(self.layers_per_block >= 1, "layers_per_block must be positive");
        ensure!(self.n_tokens >= 1 && self.group_k >= 1, "token and group counts must be positive");
        Ok(())
    }
}

/// Width of one grouped point: relative xyz, absolute xyz, auxiliary features.
pub fn group_width(feat_dim: usize) -> usize {
    6 + feat_dim
}

/// Geometry of the tokenization for one cloud: FPS centers and the raw
/// grouped inputs `[N1 x group_k x (6 + F)]`.
#[derive(Debug, Clone)]
pub struct TokenGeometry {
    pub token_index: IndexSet,
    pub token_coords: Arc<[Point3]>,
    pub group_input: Tensor,
}

impl TokenGeometry {
    pub fn new(cloud: &PointCloud, coords: &[Point3], cfg: &EncoderConfig, dtype: DType, device: &Device) -> Result<Self> {
        let n = cloud.len();
        ensure!(
            n >= cfg.n_tokens,
            "cloud of {n} points cannot be reduced to {} tokens",
            cfg.n_tokens
        );
        let token_index = farthest_point_sample(coords, cfg.n_tokens, 0)?;
        Self::from_index(cloud, coords, token_index, cfg.group_k, dtype, device)
    }

    pub fn from_index(
        cloud: &PointCloud,
        coords: &[Point3],
        token_index: IndexSet,
        group_k: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let token_coords: Vec<Point3> = token_index.select(coords);
        let k = group_k.min(coords.len());
        let groups = knn(&token_coords, coords, k)?;
        let f = cloud.feat_dim();
        let width = group_width(f);
        let mut buf = Vec::with_capacity(token_coords.len() * k * width);
        for (t, center) in token_coords.iter().enumerate() {
            for &j in groups.row(t) {
                let p = coords[j];
                buf.extend((0..3).map(|a| p[a] - center[a]));
                buf.extend_from_slice(&p);
                buf.extend(cloud.feat_row(j).iter().map(|&v| v as f64));
            }
        }
        let group_input = Tensor::from_vec(buf, (token_coords.len(), k, width), device)?.to_dtype(dtype)?;
        Ok(Self {
            token_index,
            token_coords: token_coords.into(),
            group_input,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.token_coords.len()
    }
}

/// Per-block encoder outputs `f_1..f_B`, each `[N1 x D]`.
#[derive(Debug, Clone)]
pub struct BlockFeatures {
    pub per_block: Vec<Tensor>,
    pub token_coords: Arc<[Point3]>,
}

impl BlockFeatures {
    pub fn last(&self) -> &Tensor {
        self.per_block.last().expect("encoder has at least one block")
    }

    /// The three deepest blocks `(f_3, f_4, f_5)` in a five-block encoder.
    pub fn deepest_three(&self) -> (&Tensor, &Tensor, &Tensor) {
        let b = self.per_block.len();
        (&self.per_block[b - 3], &self.per_block[b - 2], &self.per_block[b - 1])
    }
}

#[derive(Debug, Clone)]
pub struct PointEncoder {
    pub config: EncoderConfig,
    pub embed: Linear,
    pub blocks: Vec<Vec<TransformerLayer>>,
}

impl PointEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, feat_dim: usize, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let embed = Linear::new(&mut pb.pp("embed"), group_width(feat_dim), config.dim, true)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut layers = Vec::with_capacity(config.layers_per_block);
            for l in 0..config.layers_per_block {
                layers.push(TransformerLayer::new(
                    &mut pb.pp(format!("block{b}.layer{l}")),
                    config.dim,
                    config.heads,
                )?);
            }
            blocks.push(layers);
        }
        Ok(Self {
            config: config.clone(),
            embed,
            blocks,
        })
    }

    /// Token features: linear embedding of every grouped point, max-pooled
    /// over the group.
    pub fn tokenize(&self, geom: &TokenGeometry) -> Result<Tensor> {
        Ok(self.embed.forward(&geom.group_input)?.max(1)?)
    }

    pub fn encode(
        &self,
        geom: &TokenGeometry,
        geometric: Option<(&Tensor, &GemInjector)>,
    ) -> Result<BlockFeatures> {
        Ok(self.encode_with_attention(geom, geometric)?.0)
    }

    /// Same as [`encode`](Self::encode) but also returns every layer's
    /// attention weights `[heads x N1 x N1]`.
    pub fn encode_with_attention(
        &self,
        geom: &TokenGeometry,
        geometric: Option<(&Tensor, &GemInjector)>,
    ) -> Result<(BlockFeatures, Vec<Tensor>)> {
        if let Some((g_f, gem)) = geometric {
            let d = g_f.dims2()?.1;
            ensure!(
                d == self.config.dim,
                "geometric features have width {d}, encoder expects {}",
                self.config.dim
            );
            ensure!(
                gem.gates.len() == self.blocks.len(),
                "{} gates for {} blocks",
                gem.gates.len(),
                self.blocks.len()
            );
        }
        let mut x = self.tokenize(geom)?;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        let mut weights = Vec::new();
        for (b, layers) in self.blocks.iter().enumerate() {
            for layer in layers {
                let (y, w) = layer.forward_with_weights(&x, None)?;
                x = y;
                weights.push(w);
            }
            if let Some((g_f, gem)) = geometric {
                x = gem.inject(b, &x, g_f)?;
            }
            per_block.push(x.clone());
        }
        Ok((
            BlockFeatures {
                per_block,
                token_coords: geom.token_coords.clone(),
            },
            weights,
        ))
    }
}

pub fn tokenize_points(
    cloud: &PointCloud,
    encoder: &PointEncoder,
    dtype: DType,
) -> Result<(Vec<Point3>, Tensor)> {
    let coords = cloud.coords_f64();
    let geom = TokenGeometry::new(cloud, &coords, &encoder.config, dtype, &Device::Cpu)?;
    let feats = encoder.tokenize(&geom)?;
    Ok((geom.token_coords.to_vec(), feats))
}
