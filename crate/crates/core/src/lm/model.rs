use std::ops::Range;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::vocab::{EOS, POINT, SEG};
use crate::error::{ensure, invalid, Error, Result};
use crate::nn::{causal_mask, LayerNorm, Linear, TransformerLayer};
use crate::params::{Init, ParamBuilder};

/// Channel sizes of the segmentation projection in the full-size model
/// (7B language model). The desk-scale model uses `[dim, seg_hidden, D]`.
pub const FULL_SCALE_SEG_CHANNELS: [usize; 3] = [256, 4096, 4096];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyLmConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_context: usize,
    /// Filled from the vocabulary when the model is built.
    pub vocab_size: usize,
    pub seg_hidden: usize,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 128,
            heads: 4,
            max_context: 256,
            vocab_size: 0,
            seg_hidden: 64,
        }
    }
}

/// h_seg rows, one per segmentation token, `[K x D]` (K may be 0).
#[derive(Debug, Clone)]
pub struct MaskEmbeddings {
    pub values: Option<Tensor>,
    pub dim: usize,
}

impl MaskEmbeddings {
    pub fn len(&self) -> usize {
        self.values.as_ref().map_or(0, |t| t.dims()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Two-layer MLP from language-model width to mask-decoder width.
#[derive(Debug, Clone)]
pub struct SegProjector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SegProjector {
    pub fn new(pb: &mut ParamBuilder<'_>, d_lm: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut pb.pp("fc1"), d_lm, hidden, true)?,
            fc2: Linear::new(&mut pb.pp("fc2"), hidden, d_out, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// Embedded sequence with the point placeholder expanded.
#[derive(Debug, Clone)]
pub struct InjectedSequence {
    pub embeds: Tensor,
    /// Token ids aligned with `embeds`; point positions carry `POINT`.
    pub expanded_ids: Vec<u32>,
    pub point_range: Range<usize>,
}

impl InjectedSequence {
    pub fn len(&self) -> usize {
        self.expanded_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expanded_ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TinyLm {
    pub config: TinyLmConfig,
    pub token_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    /// W_in: point features -> language-model width.
    pub point_in: Linear,
    /// W_out: language-model hidden states -> mask-decoder width.
    pub point_out: Linear,
    pub seg_proj: SegProjector,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl TinyLm {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &TinyLmConfig, point_dim: usize) -> Result<Self> {
        ensure!(config.vocab_size > 0, "vocabulary size must be set");
        ensure!(
            config.heads > 0 && config.dim % config.heads == 0,
            "lm dim {} not divisible by {} heads",
            config.dim,
            config.heads
        );
        let d = config.dim;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(TransformerLayer::new(&mut pb.pp(format!("layer{l}")), d, config.heads)?);
        }
        Ok(Self {
            token_embed: pb.var("token_embed", &[config.vocab_size, d], Init::Normal(0.1))?,
            pos_embed: pb.var("pos_embed", &[config.max_context, d], Init::Normal(0.1))?,
            layers,
            final_norm: LayerNorm::new(&mut pb.pp("final_norm"), d)?,
            head: Linear::new(&mut pb.pp("head"), d, config.vocab_size, false)?,
            point_in: Linear::new(&mut pb.pp("point_in"), point_dim, d, false)?,
            point_out: Linear::new(&mut pb.pp("point_out"), d, point_dim, false)?,
            seg_proj: SegProjector::new(&mut pb.pp("seg_proj"), d, config.seg_hidden, point_dim)?,
            config: config.clone(),
        })
    }

    pub fn embed_ids(&self, ids: &[u32]) -> Result<Tensor> {
        let v = self.config.vocab_size as u32;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {v}")));
        }
        let t = Tensor::from_vec(ids.to_vec(), ids.len(), self.token_embed.device())?;
        Ok(self.token_embed.index_select(&t, 0)?)
    }

    /// Replace the single `POINT` id with `N1` rows of `f_point W_in`.
    pub fn inject_point_tokens(&self, ids: &[u32], f_point: &Tensor) -> Result<InjectedSequence> {
        let slots: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == POINT).map(|(i, _)| i).collect();
        if slots.len() != 1 {
            return Err(invalid(format!("expected exactly one point placeholder, found {}", slots.len())));
        }
        let slot = slots[0];
        let (n1, _) = f_point.dims2()?;
        let points = self.point_in.forward(f_point)?;
        let mut parts = Vec::with_capacity(3);
        if slot > 0 {
            parts.push(self.embed_ids(&ids[..slot])?);
        }
        parts.push(points);
        if slot + 1 < ids.len() {
            parts.push(self.embed_ids(&ids[slot + 1..])?);
        }
        let embeds = Tensor::cat(&parts, 0)?;
        let mut expanded_ids = Vec::with_capacity(ids.len() - 1 + n1);
        expanded_ids.extend_from_slice(&ids[..slot]);
        expanded_ids.extend(std::iter::repeat_n(POINT, n1));
        expanded_ids.extend_from_slice(&ids[slot + 1..]);
        Ok(InjectedSequence {
            embeds,
            expanded_ids,
            point_range: slot..slot + n1,
        })
    }

    /// Causal forward. Returns `(hidden [T x D_lm], logits [T x V])`.
    pub fn forward(&self, embeds: &Tensor) -> Result<(Tensor, Tensor)> {
        let (t, d) = embeds.dims2()?;
        ensure!(d == self.config.dim, "embedding width {d} != lm width {}", self.config.dim);
        if t > self.config.max_context {
            return Err(invalid(format!(
                "sequence of {t} tokens exceeds context of {}",
                self.config.max_context
            )));
        }
        let mask = causal_mask(t, embeds.dtype(), embeds.device())?;
        let mut x = (embeds + self.pos_embed.narrow(0, 0, t)?)?;
        for layer in &self.layers {
            x = layer.forward(&x, Some(&mask))?;
        }
        let hidden = self.final_norm.forward(&x)?;
        let logits = self.head.forward(&hidden)?;
        Ok((hidden, logits))
    }

    /// Append the argmax token until `EOS` or `max_new` tokens.
    pub fn decode_greedy(&self, prompt: &Tensor, max_new: usize) -> Result<Vec<u32>> {
        let mut seq = prompt.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.dims2()?.0 >= self.config.max_context {
                break;
            }
            let (_, logits) = self.forward(&seq)?;
            let t = logits.dims2()?.0;
            let last: Vec<f64> = logits
                .narrow(0, t - 1, 1)?
                .squeeze(0)?
                .to_dtype(candle_core::DType::F64)?
                .to_vec1()?;
            let next = argmax_lowest(&last) as u32;
            out.push(next);
            if next == EOS {
                break;
            }
            seq = Tensor::cat(&[&seq, &self.embed_ids(&[next])?], 0)?;
        }
        Ok(out)
    }

    /// `gamma(hidden[t])` for every `SEG` position, in order.
    pub fn extract_seg_embeddings(&self, hidden: &Tensor, ids: &[u32]) -> Result<MaskEmbeddings> {
        let (t, _) = hidden.dims2()?;
        ensure!(t == ids.len(), "{} ids for {t} hidden rows", ids.len());
        let positions: Vec<u32> = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == SEG)
            .map(|(i, _)| i as u32)
            .collect();
        let dim = self.seg_proj.fc2.d_out();
        if positions.is_empty() {
            return Ok(MaskEmbeddings { values: None, dim });
        }
        let pos = Tensor::from_vec(positions.clone(), positions.len(), hidden.device())?;
        let rows = hidden.index_select(&pos, 0)?;
        Ok(MaskEmbeddings {
            values: Some(self.seg_proj.forward(&rows)?),
            dim,
        })
    }

    /// `h_point = hidden[point_range] W_out`.
    pub fn extract_point_hidden(&self, hidden: &Tensor, point_range: &Range<usize>) -> Result<Tensor> {
        let (t, _) = hidden.dims2()?;
        if point_range.end > t || point_range.is_empty() {
            return Err(Error::Internal(format!(
                "point positions {point_range:?} do not fit {t} hidden rows"
            )));
        }
        let rows = hidden.narrow(0, point_range.start, point_range.len())?;
        self.point_out.forward(&rows)
    }

    /// Greedy answer plus the hidden states of prompt + answer, used to read
    /// the segmentation embeddings of the generated tokens.
    pub fn generate(&self, prompt: &InjectedSequence, max_new: usize) -> Result<(Vec<u32>, Tensor, Vec<u32>)> {
        let answer = self.decode_greedy(&prompt.embeds, max_new)?;
        let embeds = if answer.is_empty() {
            prompt.embeds.clone()
        } else {
            Tensor::cat(&[&prompt.embeds, &self.embed_ids(&answer)?], 0)?
        };
        let (hidden, _) = self.forward(&embeds)?;
        let mut ids = prompt.expanded_ids.clone();
        ids.extend_from_slice(&answer);
        Ok((answer, hidden, ids))
    }
}
