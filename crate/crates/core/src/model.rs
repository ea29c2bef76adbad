//! The assembled segmentation model: geometric stem, point encoder with
//! geometric injection, language model, and propagation head.

use std::ops::Range;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{BlockFeatures, EncoderConfig, PointEncoder, TokenGeometry};
use crate::error::{ensure, Result};
use crate::gem::{stem_input, GemInjector, GeometricStem, KernelCorrelation, StemConfig};
use crate::geometry::{Point3, PointCloud};
use crate::gfp::{FeaturePropagation, GfpConfig, IdwPlan, PerPointEmbeddings, PropagationPlan};
use crate::lm::vocab::{PAD, POINT};
use crate::lm::{MaskEmbeddings, TinyLm, TinyLmConfig, Vocabulary};
use crate::losses::{
    bce_mask_loss, dice_loss, mask_logits, targets_tensor, text_ce_loss, total_loss, LossWeights, MaskLogits,
};
use crate::params::ParamStore;
use crate::tasks::{parse_prediction, ChatSample};

pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub stem: StemConfig,
    pub encoder: EncoderConfig,
    pub gfp: GfpConfig,
    pub lm: TinyLmConfig,
    /// Geometric injection into the encoder and geometric guidance in the
    /// propagation head. Off: tokens are lifted to the points by
    /// inverse-distance interpolation instead.
    pub gem_enabled: bool,
    /// Off: per-point embeddings are interpolated straight from the tokens.
    pub gfp_enabled: bool,
    pub max_answer_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem: StemConfig::default(),
            encoder: EncoderConfig::default(),
            gfp: GfpConfig::default(),
            lm: TinyLmConfig::default(),
            gem_enabled: true,
            gfp_enabled: true,
            max_answer_tokens: 48,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        ensure!(
            self.stem.channels[2] == self.encoder.dim,
            "stem output width {} must equal encoder width {}",
            self.stem.channels[2],
            self.encoder.dim
        );
        ensure!(self.encoder.blocks >= 3, "propagation needs three encoder blocks");
        Ok(())
    }
}

/// Per-cloud geometry shared by every forward pass over that cloud.
#[derive(Debug, Clone)]
pub struct ScenePrep {
    pub coords: Arc<[Point3]>,
    pub stem_input: Tensor,
    pub correlation: Option<KernelCorrelation>,
    pub tokens: TokenGeometry,
    pub plan: Option<PropagationPlan>,
    /// Tokens -> every point.
    pub lift: IdwPlan,
}

impl ScenePrep {
    pub fn n_points(&self) -> usize {
        self.coords.len()
    }
}

/// Encoder-side activations of one cloud.
#[derive(Debug, Clone)]
pub struct PointSide {
    pub blocks: BlockFeatures,
    pub g_f: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub total: Tensor,
    pub txt: Tensor,
    pub bce: Tensor,
    pub dice: Tensor,
    pub text_empty: bool,
    pub logits: MaskLogits,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub answer_ids: Vec<u32>,
    pub answer: String,
    pub masks: Vec<(String, Vec<bool>)>,
}

pub struct SegPoint {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub stem: Option<GeometricStem>,
    pub gem: Option<GemInjector>,
    pub encoder: PointEncoder,
    pub gfp: Option<FeaturePropagation>,
    pub lm: TinyLm,
    pub feat_dim: usize,
}

impl SegPoint {
    pub fn new(config: &ModelConfig, vocab: Vocabulary, feat_dim: usize, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        config.lm.vocab_size = vocab.len();
        let mut store = ParamStore::new(dtype, seed);
        let d = config.encoder.dim;
        let (stem, gem) = if config.gem_enabled {
            let mut root = store.root();
            let stem = GeometricStem::new(&mut root.pp("stem"), feat_dim, &config.stem)?;
            let gem = GemInjector::new(
                &mut root.pp("gem"),
                config.encoder.blocks,
                d,
                config.stem.attention_projections,
            )?;
            (Some(stem), Some(gem))
        } else {
            (None, None)
        };
        let encoder = PointEncoder::new(&mut store.root().pp("encoder"), feat_dim, &config.encoder)?;
        let gfp = if config.gfp_enabled {
            Some(FeaturePropagation::new(&mut store.root().pp("gfp"), d, &config.gfp)?)
        } else {
            None
        };
        let lm = TinyLm::new(&mut store.root().pp("lm"), &config.lm, d)?;
        Ok(Self {
            config,
            store,
            vocab,
            stem,
            gem,
            encoder,
            gfp,
            lm,
            feat_dim,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn level_sizes(&self, n: usize) -> Result<(usize, usize)> {
        self.config.gfp.level_sizes(n, self.config.encoder.n_tokens)
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<ScenePrep> {
        ensure!(
            cloud.feat_dim() == self.feat_dim,
            "cloud has {} feature channels, model expects {}",
            cloud.feat_dim(),
            self.feat_dim
        );
        let dtype = self.dtype();
        let device = Device::Cpu;
        let coords: Arc<[Point3]> = cloud.coords_f64().into();
        let tokens = TokenGeometry::new(cloud, &coords, &self.config.encoder, dtype, &device)?;
        let correlation = match &self.stem {
            Some(stem) => Some(stem.correlation(&coords, dtype, &device)?),
            None => None,
        };
        let plan = if self.gfp.is_some() {
            let (n2, n3) = self.level_sizes(cloud.len())?;
            Some(PropagationPlan::new(
                &coords,
                &tokens.token_coords,
                n2,
                n3,
                &self.config.gfp,
                dtype,
                &device,
            )?)
        } else {
            None
        };
        let idw_k = self.config.gfp.idw_k.min(tokens.n_tokens());
        let lift = IdwPlan::new(&tokens.token_coords, &coords, idw_k, self.config.gfp.eps, dtype, &device)?;
        Ok(ScenePrep {
            stem_input: stem_input(cloud, dtype, &device)?,
            coords,
            correlation,
            tokens,
            plan,
            lift,
        })
    }

    pub fn encode_points(&self, prep: &ScenePrep) -> Result<PointSide> {
        let g_f = match (&self.stem, &prep.correlation) {
            (Some(stem), Some(corr)) => Some(stem.forward(corr, &prep.stem_input)?),
            _ => None,
        };
        let injection = match (&g_f, &self.gem) {
            (Some(g), Some(gem)) => Some((g, gem)),
            _ => None,
        };
        let blocks = self.encoder.encode(&prep.tokens, injection)?;
        Ok(PointSide { blocks, g_f })
    }

    /// f_P from encoder features and the language model's point states.
    pub fn per_point(&self, prep: &ScenePrep, side: &PointSide, h_point: &Tensor) -> Result<PerPointEmbeddings> {
        match (&self.gfp, &prep.plan) {
            (Some(gfp), Some(plan)) => {
                let guidance = match &side.g_f {
                    Some(g) => g.clone(),
                    None => prep.lift.apply(side.blocks.last())?,
                };
                gfp.forward(&side.blocks, h_point, &guidance, plan)
            }
            _ => {
                let fused = match &self.gfp {
                    Some(gfp) => gfp.fuse5.forward(side.blocks.last(), h_point)?,
                    None => (side.blocks.last() + h_point)?,
                };
                Ok(PerPointEmbeddings {
                    values: prep.lift.apply(&fused)?,
                })
            }
        }
    }

    pub fn forward_train(&self, prep: &ScenePrep, sample: &ChatSample, weights: &LossWeights) -> Result<TrainOutput> {
        let side = self.encode_points(prep)?;
        let seq = self.lm.inject_point_tokens(&sample.target_ids, side.blocks.last())?;
        let mask = expand_mask(&sample.answer_mask, &sample.target_ids, &seq.point_range)?;
        let (hidden, token_logits) = self.lm.forward(&seq.embeds)?;
        let txt = text_ce_loss(&token_logits, &seq.expanded_ids, &mask)?;
        let h_seg = self.lm.extract_seg_embeddings(&hidden, &seq.expanded_ids)?;
        let h_point = self.lm.extract_point_hidden(&hidden, &seq.point_range)?;
        let f_p = self.per_point(prep, &side, &h_point)?;
        let logits = mask_logits(&h_seg, &f_p.values)?;
        let dtype = self.dtype();
        let (bce, dice) = match &logits.values {
            Some(_) => {
                let targets = targets_tensor(&sample.gt_masks, dtype, &Device::Cpu)?;
                (
                    bce_mask_loss(&logits, &targets, dtype)?,
                    dice_loss(&logits, &targets, DICE_EPS, dtype)?,
                )
            }
            None => {
                let z = Tensor::zeros((), dtype, &Device::Cpu)?;
                (z.clone(), z)
            }
        };
        let total = total_loss(&txt.loss, &bce, &dice, weights)?;
        Ok(TrainOutput {
            total,
            txt: txt.loss,
            bce,
            dice,
            text_empty: txt.empty,
            logits,
        })
    }

    /// Greedy answer for `prompt_ids` (`BOS` + prompt) and its labeled masks.
    pub fn infer(&self, prep: &ScenePrep, prompt_ids: &[u32]) -> Result<Prediction> {
        let side = self.encode_points(prep)?;
        let seq = self.lm.inject_point_tokens(prompt_ids, side.blocks.last())?;
        let prompt_len = seq.len();
        let (answer_ids, hidden, ids) = self.lm.generate(&seq, self.config.max_answer_tokens)?;
        // Only segmentation tokens the model produced count.
        let mut answer_only = ids;
        answer_only[..prompt_len].fill(PAD);
        let h_seg = self.lm.extract_seg_embeddings(&hidden, &answer_only)?;
        let h_point = self.lm.extract_point_hidden(&hidden, &seq.point_range)?;
        let f_p = self.per_point(prep, &side, &h_point)?;
        let masks = parse_prediction(&answer_ids, &self.vocab, &h_seg, &f_p)?;
        let answer = self.vocab.detokenize(&answer_ids);
        Ok(Prediction {
            answer_ids,
            answer,
            masks,
        })
    }

    /// Mask embeddings and per-point embeddings for a teacher-forced
    /// sequence; used by gradient checks and tests.
    pub fn teacher_forced_masks(&self, prep: &ScenePrep, ids: &[u32]) -> Result<(MaskEmbeddings, PerPointEmbeddings)> {
        let side = self.encode_points(prep)?;
        let seq = self.lm.inject_point_tokens(ids, side.blocks.last())?;
        let (hidden, _) = self.lm.forward(&seq.embeds)?;
        let h_seg = self.lm.extract_seg_embeddings(&hidden, &seq.expanded_ids)?;
        let h_point = self.lm.extract_point_hidden(&hidden, &seq.point_range)?;
        Ok((h_seg, self.per_point(prep, &side, &h_point)?))
    }
}

/// Answer mask aligned with the expanded sequence (point positions false).
pub fn expand_mask(mask: &[bool], ids: &[u32], point_range: &Range<usize>) -> Result<Vec<bool>> {
    ensure!(mask.len() == ids.len(), "mask and ids differ in length");
    let slot = ids
        .iter()
        .position(|&t| t == POINT)
        .ok_or_else(|| crate::error::invalid("sequence has no point placeholder"))?;
    let mut out = Vec::with_capacity(mask.len() - 1 + point_range.len());
    out.extend_from_slice(&mask[..slot]);
    out.extend(std::iter::repeat_n(false, point_range.len()));
    out.extend_from_slice(&mask[slot + 1..]);
    Ok(out)
}
