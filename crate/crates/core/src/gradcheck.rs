//! Finite-difference gradient checks of each trainable component at 64-bit.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::standard_vocabulary;
use crate::encoder::{BlockFeatures, EncoderConfig, PointEncoder, TokenGeometry};
use crate::error::{invalid, Result};
use crate::gem::{GemInjector, GeometricStem, StemConfig};
use crate::geometry::{Point3, PointCloud};
use crate::gfp::{FeaturePropagation, GfpConfig, PropagationPlan};
use crate::lm::vocab::{BOS, EOS, POINT, SEG};
use crate::lm::{TinyLm, TinyLmConfig, Vocabulary};
use crate::losses::{bce_mask_loss, dice_loss, mask_logits, targets_tensor, text_ce_loss, total_loss, LossWeights};
use crate::lm::MaskEmbeddings;
use crate::model::{ModelConfig, SegPoint};
use crate::nn::scalar_f64;
use crate::params::{init_values, Init, ParamStore};
use crate::precision::{Precision, PRECISION_ENV};
use crate::tasks::{build_training_sample, Annotation, TaskKind};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-4;
const DENSE_LIMIT: usize = 256;
const SAMPLED_TOP: usize = 128;
const SAMPLED_RANDOM: usize = 128;

pub const COMPONENTS: [&str; 6] = ["gem", "encoder", "gfp", "lm", "losses", "full"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub component: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn entries_to_check(analytic: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    if analytic.len() <= DENSE_LIMIT {
        return (0..analytic.len()).collect();
    }
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
    let mut picked: Vec<usize> = order[..SAMPLED_TOP].to_vec();
    let mut rest = order[SAMPLED_TOP..].to_vec();
    rest.shuffle(rng);
    picked.extend(rest.into_iter().take(SAMPLED_RANDOM));
    picked
}

/// Compare backprop against central differences for every tensor in `store`.
pub fn check_store(
    store: &ParamStore,
    f: &dyn Fn() -> Result<Tensor>,
    seed: u64,
) -> Result<Vec<TensorReport>> {
    let loss = f()?;
    let grads = loss.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9ad);
    let mut reports = Vec::new();
    for name in store.names() {
        let var = store.get(&name).expect("listed parameter");
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?,
            None => vec![0.0; var.elem_count()],
        };
        let base = store.values_f64(&name)?;
        let mut worst: f64 = 0.0;
        let picks = entries_to_check(&analytic, &mut rng);
        for &i in &picks {
            let mut v = base.clone();
            v[i] = base[i] + STEP;
            store.assign_f64(&name, v.clone())?;
            let plus = scalar_f64(&f()?)?;
            v[i] = base[i] - STEP;
            store.assign_f64(&name, v)?;
            let minus = scalar_f64(&f()?)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        store.assign_f64(&name, base)?;
        reports.push(TensorReport {
            name,
            checked: picks.len(),
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

fn weighted_sum(t: &Tensor, seed: u64) -> Result<Tensor> {
    let n = t.elem_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::from_vec(w, t.dims(), t.device())?.to_dtype(t.dtype())?;
    Ok((t * w)?.sum_all()?)
}

fn seeded_tensor(shape: &[usize], seed: u64) -> Result<Tensor> {
    let values = init_values(seed, "gradcheck.input", shape, Init::Normal(1.0));
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
}

pub fn random_cloud(n: usize, feat_dim: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f32; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random::<f32>())).collect();
    let feats: Vec<f32> = (0..n * feat_dim).map(|_| rng.random::<f32>()).collect();
    let instances: Vec<i32> = (0..n).map(|i| (i % 3) as i32).collect();
    let categories = instances.clone();
    PointCloud::new(coords, feats, feat_dim, Some(instances), Some(categories))
}

fn tiny_stem() -> StemConfig {
    StemConfig {
        channels: [8, 8, 8],
        kernel_points: 4,
        sigma: 0.5,
        neighbor_k: 6,
        attention_projections: false,
    }
}

fn tiny_encoder(n_tokens: usize) -> EncoderConfig {
    EncoderConfig {
        n_tokens,
        dim: 8,
        blocks: 3,
        layers_per_block: 1,
        heads: 2,
        group_k: 4,
    }
}

fn tiny_gfp() -> GfpConfig {
    GfpConfig {
        k: 3,
        idw_k: 3,
        n2_divisor: 4,
        n3_divisor: 2,
        ..GfpConfig::default()
    }
}

fn open_gates(store: &ParamStore, name: &str, blocks: usize) -> Result<()> {
    store.assign_f64(name, (0..blocks).map(|b| 0.3 + 0.2 * b as f64).collect())
}

fn check_gem(seed: u64) -> Result<Vec<TensorReport>> {
    let cloud = random_cloud(32, 3, seed)?;
    let coords = cloud.coords_f64();
    let mut store = ParamStore::new(DType::F64, seed);
    let stem = GeometricStem::new(&mut store.root().pp("stem"), 3, &tiny_stem())?;
    let gem = GemInjector::new(&mut store.root().pp("gem"), 3, 8, false)?;
    open_gates(&store, "gem.gates", 3)?;
    let corr = stem.correlation(&coords, DType::F64, &Device::Cpu)?;
    let input = crate::gem::stem_input(&cloud, DType::F64, &Device::Cpu)?;
    let f = seeded_tensor(&[6, 8], seed)?;
    let run = || -> Result<Tensor> {
        let g_f = stem.forward(&corr, &input)?;
        let mut x = f.clone();
        for b in 0..3 {
            x = gem.inject(b, &x, &g_f)?;
        }
        weighted_sum(&x, seed)
    };
    check_store(&store, &run, seed)
}

fn check_encoder(seed: u64) -> Result<Vec<TensorReport>> {
    let cloud = random_cloud(32, 3, seed)?;
    let coords = cloud.coords_f64();
    let cfg = tiny_encoder(8);
    let mut store = ParamStore::new(DType::F64, seed);
    let enc = PointEncoder::new(&mut store.root().pp("encoder"), 3, &cfg)?;
    let geom = TokenGeometry::new(&cloud, &coords, &cfg, DType::F64, &Device::Cpu)?;
    let run = || -> Result<Tensor> {
        let blocks = enc.encode(&geom, None)?;
        let all = Tensor::cat(&blocks.per_block, 0)?;
        weighted_sum(&all, seed)
    };
    check_store(&store, &run, seed)
}

fn check_gfp(seed: u64) -> Result<Vec<TensorReport>> {
    let (n, n1, d) = (32, 4, 8);
    let cloud = random_cloud(n, 3, seed)?;
    let coords = cloud.coords_f64();
    let cfg = tiny_gfp();
    let (n2, n3) = cfg.level_sizes(n, n1)?;
    let token_idx = crate::geometry::farthest_point_sample(&coords, n1, 0)?;
    let token_coords: Arc<[Point3]> = token_idx.select(&coords).into();
    let plan = PropagationPlan::new(&coords, &token_coords, n2, n3, &cfg, DType::F64, &Device::Cpu)?;
    let mut store = ParamStore::new(DType::F64, seed);
    let head = FeaturePropagation::new(&mut store.root().pp("gfp"), d, &cfg)?;
    let mut inputs = store.root();
    let mut inp = inputs.pp("input");
    let f3 = inp.var("f3", &[n1, d], Init::Normal(1.0))?;
    let f4 = inp.var("f4", &[n1, d], Init::Normal(1.0))?;
    let f5 = inp.var("f5", &[n1, d], Init::Normal(1.0))?;
    let h_point = inp.var("h_point", &[n1, d], Init::Normal(1.0))?;
    let guidance = inp.var("guidance", &[n, d], Init::Normal(1.0))?;
    let run = || -> Result<Tensor> {
        let blocks = BlockFeatures {
            per_block: vec![f3.clone(), f4.clone(), f5.clone()],
            token_coords: token_coords.clone(),
        };
        let out = head.forward(&blocks, &h_point, &guidance, &plan)?;
        weighted_sum(&out.values, seed)
    };
    check_store(&store, &run, seed)
}

fn check_lm(seed: u64) -> Result<Vec<TensorReport>> {
    let vocab = Vocabulary::from_corpus(["chair table lamp"]);
    let cfg = TinyLmConfig {
        layers: 1,
        dim: 8,
        heads: 2,
        max_context: 24,
        vocab_size: vocab.len(),
        seg_hidden: 6,
    };
    let mut store = ParamStore::new(DType::F64, seed);
    let lm = TinyLm::new(&mut store.root().pp("lm"), &cfg, 8)?;
    let f_point = store.root().var("input.f_point", &[4, 8], Init::Normal(1.0))?;
    let chair = vocab.id("chair").unwrap_or(0);
    let ids = vec![BOS, POINT, chair, SEG, chair, SEG, EOS];
    let mask = vec![false, false, true, true, true, true, true];
    let run = || -> Result<Tensor> {
        let seq = lm.inject_point_tokens(&ids, &f_point)?;
        let exp_mask = crate::model::expand_mask(&mask, &ids, &seq.point_range)?;
        let (hidden, logits) = lm.forward(&seq.embeds)?;
        let txt = text_ce_loss(&logits, &seq.expanded_ids, &exp_mask)?.loss;
        let seg = lm.extract_seg_embeddings(&hidden, &seq.expanded_ids)?;
        let pts = lm.extract_point_hidden(&hidden, &seq.point_range)?;
        let seg_term = weighted_sum(seg.values.as_ref().expect("two segmentation tokens"), seed)?;
        Ok(((txt + seg_term)? + weighted_sum(&pts, seed + 1)?)?)
    };
    check_store(&store, &run, seed)
}

fn check_losses(seed: u64) -> Result<Vec<TensorReport>> {
    let mut store = ParamStore::new(DType::F64, seed);
    let mut root = store.root();
    let h = root.var("h_seg", &[2, 4], Init::Normal(1.0))?;
    let f_p = root.var("f_p", &[8, 4], Init::Normal(1.0))?;
    let token_logits = root.var("token_logits", &[5, 6], Init::Normal(1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<Vec<bool>> = (0..2).map(|_| (0..8).map(|_| rng.random::<bool>()).collect()).collect();
    let targets = targets_tensor(&gt, DType::F64, &Device::Cpu)?;
    let run = || -> Result<Tensor> {
        let emb = MaskEmbeddings {
            values: Some(h.clone()),
            dim: 4,
        };
        let logits = mask_logits(&emb, &f_p)?;
        let bce = bce_mask_loss(&logits, &targets, DType::F64)?;
        let dice = dice_loss(&logits, &targets, 1.0, DType::F64)?;
        let txt = text_ce_loss(&token_logits, &[1, 2, 3, 4, 5], &[false, false, true, true, true])?.loss;
        total_loss(&txt, &bce, &dice, &LossWeights::default())
    };
    check_store(&store, &run, seed)
}

/// Tiny end-to-end configuration used by the full-pipeline check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        stem: tiny_stem(),
        encoder: tiny_encoder(4),
        gfp: tiny_gfp(),
        lm: TinyLmConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            max_context: 48,
            vocab_size: 0,
            seg_hidden: 6,
        },
        gem_enabled: true,
        gfp_enabled: true,
        max_answer_tokens: 8,
    }
}

fn check_full(seed: u64) -> Result<Vec<TensorReport>> {
    let cloud = random_cloud(32, 3, seed)?;
    let model = SegPoint::new(&tiny_model_config(), standard_vocabulary(), 3, DType::F64, seed)?;
    open_gates(&model.store, "gem.gates", 3)?;
    let names: Vec<String> = ["floor", "chair", "table"].map(String::from).to_vec();
    let ann = Annotation {
        kind: TaskKind::SemanticSingle,
        description: String::new(),
        category: "chair".into(),
        categories: vec![],
        answer_categories: vec!["chair".into()],
        target_instance_ids: vec![1],
        variant: 0,
    };
    let sample = build_training_sample(&cloud, &names, &ann, &model.vocab)?;
    let prep = model.prepare(&cloud)?;
    let weights = LossWeights::default();
    let run = || -> Result<Tensor> { Ok(model.forward_train(&prep, &sample, &weights)?.total) };
    check_store(&model.store, &run, seed)
}

/// Run the check for one component. Requires 64-bit arithmetic; an
/// explicit 32-bit request through the environment is rejected.
pub fn gradcheck(component: &str, seed: u64) -> Result<GradcheckReport> {
    if std::env::var(PRECISION_ENV).is_ok() && Precision::from_env()? != Precision::F64 {
        return Err(invalid(format!("gradient checks need {PRECISION_ENV}=f64")));
    }
    let (tensors, tolerance) = match component {
        "gem" => (check_gem(seed)?, TOLERANCE),
        "encoder" => (check_encoder(seed)?, TOLERANCE),
        "gfp" => (check_gfp(seed)?, TOLERANCE),
        "lm" => (check_lm(seed)?, TOLERANCE),
        "losses" => (check_losses(seed)?, LOSS_TOLERANCE),
        "full" => (check_full(seed)?, TOLERANCE),
        other => {
            return Err(invalid(format!(
                "unknown component {other:?}; expected one of {}",
                COMPONENTS.join(", ")
            )))
        }
    };
    let passed = tensors.iter().all(|t| t.max_rel_err <= tolerance);
    Ok(GradcheckReport {
        component: component.to_string(),
        tolerance,
        tensors,
        passed,
    })
}
