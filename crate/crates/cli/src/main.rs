//! `segpoint`: generate data, train, evaluate, predict and gradient-check.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use segpoint::checkpoint::load_checkpoint;
use segpoint::data::io::{build_dataset, load_dataset, load_scene, DatasetSpec, Split};
use segpoint::data::standard_vocabulary;
use segpoint::eval::{evaluate, export_ply, predict};
use segpoint::gradcheck::gradcheck;
use segpoint::train::train;
use segpoint::{Precision, SegPoint, TaskKind, TrainConfig};

#[derive(Parser)]
#[command(name = "segpoint", version, about = "Language-guided point cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training scenes; validation gets a quarter as many.
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        #[arg(long)]
        val_scenes: Option<usize>,
        #[arg(long, default_value_t = 4096)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML config on the training split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one task kind (semantic_single, referring, ...).
        #[arg(long)]
        task: Option<String>,
        /// Evaluate on the training split instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Answer one prompt on one scene.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        export_ply: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        component: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default training config.
    DefaultConfig,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData {
            seed,
            scenes,
            val_scenes,
            points,
            out,
        } => {
            let spec = DatasetSpec {
                base_seed: seed,
                train_scenes: scenes,
                val_scenes: val_scenes.unwrap_or(scenes.div_ceil(4)),
                n_points: points,
            };
            let index = build_dataset(&spec, &out)?;
            println!("wrote {} scenes to {}", index.scenes.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p).with_context(|| format!("reading {}", p.display()))?,
                None => TrainConfig::default(),
            };
            let scenes = load_dataset(&data, Some(Split::Train))?;
            let feat_dim = scenes.first().context("dataset has no training scenes")?.scene.cloud.feat_dim();
            let precision = Precision::from_env()?;
            let model = SegPoint::new(&cfg.model, standard_vocabulary(), feat_dim, precision.dtype(), cfg.seed)?;
            log::info!("{} parameters, {} precision", model.store.num_scalars(), precision.name());
            let outcome = train(&cfg, model, &scenes, Some(&out))?;
            if let Some(last) = outcome.curve.last() {
                println!("final loss {:.5} after {} steps", last.total, last.step);
            }
            for p in outcome.checkpoints {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval {
            ckpt,
            data,
            task,
            train_split,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let split = if train_split { Split::Train } else { Split::Val };
            let scenes = load_dataset(&data, Some(split))?;
            let task = task.as_deref().map(TaskKind::parse).transpose()?;
            let report = evaluate(&model, &scenes, task)?;
            print!("{}", report.metrics.to_json_lines()?);
            println!("{{\"exact_match\":{}}}", report.exact_match);
        }
        Command::Predict {
            ckpt,
            scene,
            prompt,
            export_ply: ply,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let (scene, _) = load_scene(&scene)?;
            let pred = predict(&model, &scene, &prompt)?;
            println!("{}", pred.answer);
            for (label, mask) in &pred.masks {
                println!("{label}: {} points", mask.iter().filter(|&&m| m).count());
            }
            if let Some(path) = ply {
                if pred.masks.is_empty() {
                    println!("no masks; nothing exported");
                } else {
                    export_ply(&path, scene.cloud.coords(), &pred.masks)?;
                    println!("wrote {}", path.display());
                }
            }
        }
        Command::Gradcheck { component, seed } => {
            let report = gradcheck(&component, seed)?;
            for t in &report.tensors {
                println!("{:<40} {:>5} entries  max rel err {:.3e}", t.name, t.checked, t.max_rel_err);
            }
            println!(
                "{}: {} (max {:.3e}, tolerance {:.0e})",
                report.component,
                if report.passed { "PASS" } else { "FAIL" },
                report.max_rel_err(),
                report.tolerance
            );
            if !report.passed {
                bail!("gradient check failed for {component}");
            }
        }
        Command::DefaultConfig => print!("{}", TrainConfig::default().to_toml()?),
    }
    Ok(())
}
