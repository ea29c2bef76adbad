//! Training configuration and the end-to-end training loop.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::io::LoadedScene;
use crate::error::{ensure, Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, ScenePrep, SegPoint};
use crate::nn::scalar_f64;
use crate::optim::{clip_scale, warmup_decay_lr, AdamW, AdamWConfig};
use crate::tasks::{build_training_sample, ChatSample, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate reached at the end of warmup.
    pub learning_rate: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Linear warmup length in steps.
    pub warmup_iters: usize,
    /// Total optimizer steps; the rate decays linearly to zero at this step.
    pub total_iters: usize,
    /// Samples averaged into one gradient step.
    pub batch_size: usize,
    /// Global gradient norm limit; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub loss_weights: LossWeights,
    /// Seeds parameter initialization and sample order.
    pub seed: u64,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Restrict training to these task kinds; empty trains on all of them.
    pub tasks: Vec<TaskKind>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.0,
            warmup_iters: 100,
            total_iters: 2000,
            batch_size: 1,
            grad_clip_norm: 1.0,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            tasks: Vec::new(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.grad_clip_norm >= 0.0, "grad_clip_norm must be non-negative");
        let w = &self.loss_weights;
        ensure!(
            w.lambda_txt >= 0.0 && w.lambda_bce >= 0.0 && w.lambda_dice >= 0.0,
            "loss weights must be non-negative"
        );
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        warmup_decay_lr(self.learning_rate, step, self.warmup_iters, self.total_iters)
    }

    fn accepts(&self, kind: TaskKind) -> bool {
        self.tasks.is_empty() || self.tasks.contains(&kind)
    }
}

/// A training sample with its cloud geometry.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub scene_id: String,
    pub annotation: usize,
    pub prep: Arc<ScenePrep>,
    pub sample: ChatSample,
}

/// Build samples for every annotation of the given scenes, computing each
/// cloud's geometry once.
pub fn prepare_samples(
    model: &SegPoint,
    scenes: &[LoadedScene],
    filter: &dyn Fn(TaskKind) -> bool,
) -> Result<Vec<PreparedSample>> {
    let mut cache: HashMap<String, Arc<ScenePrep>> = HashMap::new();
    let mut out = Vec::new();
    for s in scenes {
        for (i, a) in s.annotations.iter().enumerate() {
            if !filter(a.kind) {
                continue;
            }
            let prep = match cache.get(&s.scene.id) {
                Some(p) => p.clone(),
                None => {
                    let p = Arc::new(model.prepare(&s.scene.cloud)?);
                    cache.insert(s.scene.id.clone(), p.clone());
                    p
                }
            };
            let sample = build_training_sample(&s.scene.cloud, &s.scene.categories, a, &model.vocab)?;
            out.push(PreparedSample {
                scene_id: s.scene.id.clone(),
                annotation: i,
                prep,
                sample,
            });
        }
    }
    Ok(out)
}

/// Cycles through task kinds; each kind walks its own shuffled queue.
#[derive(Debug, Clone)]
pub struct RoundRobin {
    queues: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    next_kind: usize,
}

impl RoundRobin {
    pub fn new(samples: &[PreparedSample], seed: u64) -> Result<Self> {
        ensure!(!samples.is_empty(), "training set is empty");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut queues = Vec::new();
        for kind in TaskKind::ALL {
            let mut q: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].sample.kind == kind).collect();
            if !q.is_empty() {
                q.shuffle(&mut rng);
                queues.push(q);
            }
        }
        let cursors = vec![0; queues.len()];
        Ok(Self {
            queues,
            cursors,
            next_kind: 0,
        })
    }

    pub fn next_index(&mut self) -> usize {
        let k = self.next_kind;
        self.next_kind = (k + 1) % self.queues.len();
        let q = &self.queues[k];
        let i = q[self.cursors[k] % q.len()];
        self.cursors[k] += 1;
        i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub txt: f64,
    pub bce: f64,
    pub dice: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: SegPoint,
    pub config: TrainConfig,
    pub samples: Vec<PreparedSample>,
    optimizer: AdamW,
    order: RoundRobin,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, model: SegPoint, scenes: &[LoadedScene]) -> Result<Self> {
        config.validate()?;
        let samples = prepare_samples(&model, scenes, &|k| config.accepts(k))?;
        let order = RoundRobin::new(&samples, config.seed)?;
        let optimizer = AdamW::new(
            &model.store,
            AdamWConfig {
                lr: config.learning_rate,
                weight_decay: config.weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            model,
            config: config.clone(),
            samples,
            optimizer,
            order,
            iteration: 0,
        })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.iteration + 1;
        let b = self.config.batch_size;
        let mut sums = [0.0f64; 4];
        let mut total = None;
        for _ in 0..b {
            let idx = self.order.next_index();
            let item = &self.samples[idx];
            let out = self.model.forward_train(&item.prep, &item.sample, &self.config.loss_weights)?;
            let parts = [
                ("total", &out.total),
                ("text", &out.txt),
                ("bce", &out.bce),
                ("dice", &out.dice),
            ];
            for (slot, (term, t)) in sums.iter_mut().zip(parts) {
                let v = scalar_f64(t)?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { step, term });
                }
                *slot += v / b as f64;
            }
            let scaled = (out.total / b as f64)?;
            total = Some(match total {
                None => scaled,
                Some(acc) => (acc + scaled)?,
            });
        }
        let loss = total.expect("batch_size >= 1");
        let grads = loss.backward()?;
        let norm = self.optimizer.grad_norm(&grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, term: "gradient" });
        }
        let lr = self.config.lr_at(step);
        self.optimizer.step(&grads, lr, clip_scale(norm, self.config.grad_clip_norm))?;
        self.iteration = step;
        let record = StepRecord {
            step,
            lr,
            total: sums[0],
            txt: sums[1],
            bce: sums[2],
            dice: sums[3],
            grad_norm: norm,
        };
        log::debug!(
            "step {step} lr {lr:.3e} loss {:.4} (text {:.4}, bce {:.4}, dice {:.4})",
            record.total,
            record.txt,
            record.bce,
            record.dice
        );
        Ok(record)
    }
}

pub struct TrainOutcome {
    pub model: SegPoint,
    pub curve: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_dir(out: &Path, iteration: usize) -> PathBuf {
    out.join(format!("ckpt_{iteration:06}"))
}

/// Run `config.total_iters` steps. With `out`, checkpoints are written every
/// `checkpoint_every` steps and at the end (and at step 0 when there are no
/// steps), and the loss curve goes to `loss_curve.jsonl`.
pub fn train(
    config: &TrainConfig,
    model: SegPoint,
    scenes: &[LoadedScene],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, model, scenes)?;
    let mut curve = Vec::with_capacity(config.total_iters);
    let mut checkpoints = Vec::new();
    let mut log_lines = String::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    for _ in 0..config.total_iters {
        let rec = trainer.step()?;
        if out.is_some() {
            log_lines.push_str(&serde_json::to_string(&rec)?);
            log_lines.push('\n');
        }
        curve.push(rec);
        if let Some(dir) = out {
            let every = config.checkpoint_every;
            if every > 0 && rec.step % every == 0 && rec.step != config.total_iters {
                let path = checkpoint_dir(dir, rec.step);
                save_checkpoint(&path, &trainer.model, config, rec.step, None)?;
                checkpoints.push(path);
            }
        }
        if rec.step % 50 == 0 {
            log::info!("step {} loss {:.4}", rec.step, rec.total);
        }
    }
    if let Some(dir) = out {
        let path = checkpoint_dir(dir, trainer.iteration);
        save_checkpoint(&path, &trainer.model, config, trainer.iteration, None)?;
        checkpoints.push(path);
        std::fs::write(dir.join("loss_curve.jsonl"), log_lines)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        curve,
        checkpoints,
    })
}
