use std::fs;

use candle_core::DType;
use segpoint::checkpoint::load_checkpoint;
use segpoint::data::{build_dataset, generate_labeled, load_dataset, standard_vocabulary, DatasetSpec, LoadedScene, Split};
use segpoint::eval::{evaluate, export_ply, predict};
use segpoint::gradcheck::tiny_model_config;
use segpoint::train::{checkpoint_dir, train};
use segpoint::{Error, SegPoint, TaskKind, TrainConfig};

fn tiny_train_config(steps: usize) -> TrainConfig {
    let mut model = tiny_model_config();
    model.encoder.n_tokens = 16;
    model.encoder.group_k = 8;
    model.lm.max_context = 160;
    TrainConfig {
        learning_rate: 1e-3,
        warmup_iters: 2,
        total_iters: steps,
        checkpoint_every: 2,
        model,
        ..Default::default()
    }
}

fn scenes(n: u64) -> Vec<LoadedScene> {
    (0..n)
        .map(|seed| {
            let (scene, annotations) = generate_labeled(seed, 256).unwrap();
            LoadedScene { split: Split::Train, scene, annotations }
        })
        .collect()
}

fn fresh(cfg: &TrainConfig, dtype: DType) -> SegPoint {
    SegPoint::new(&cfg.model, standard_vocabulary(), 3, dtype, cfg.seed).unwrap()
}

#[test]
fn training_writes_curve_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(5);
    let data = scenes(2);
    let out = train(&cfg, fresh(&cfg, DType::F32), &data, Some(dir.path())).unwrap();
    assert_eq!(out.curve.len(), 5);
    assert!(out.curve.iter().all(|r| r.total.is_finite()));
    let names: Vec<_> = out.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["ckpt_000002", "ckpt_000004", "ckpt_000005"]);
    let curve = fs::read_to_string(dir.path().join("loss_curve.jsonl")).unwrap();
    assert_eq!(curve.lines().count(), 5);

    let (model, manifest) = load_checkpoint(&checkpoint_dir(dir.path(), 5)).unwrap();
    assert_eq!(manifest.iteration, 5);
    assert_eq!(manifest.config, cfg);
    let report = evaluate(&model, &data, Some(TaskKind::Referring)).unwrap();
    assert!(!report.outcomes.is_empty());
    assert!(report.outcomes.iter().all(|o| o.kind == TaskKind::Referring));
    assert!((0.0..=1.0).contains(&report.metrics.summary.miou));
}

#[test]
fn zero_steps_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(0);
    let out = train(&cfg, fresh(&cfg, DType::F32), &scenes(1), Some(dir.path())).unwrap();
    assert!(out.curve.is_empty());
    let entries: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("ckpt_"))
        .collect();
    assert_eq!(entries, ["ckpt_000000"]);
    let (_, manifest) = load_checkpoint(&checkpoint_dir(dir.path(), 0)).unwrap();
    assert_eq!(manifest.iteration, 0);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(0);
    train(&cfg, fresh(&cfg, DType::F32), &scenes(1), Some(dir.path())).unwrap();
    let ckpt = checkpoint_dir(dir.path(), 0);
    let param = fs::read_dir(ckpt.join("params")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&param).unwrap();
    bytes[0] ^= 0x40;
    fs::write(&param, bytes).unwrap();
    assert!(matches!(load_checkpoint(&ckpt), Err(Error::CorruptFile { .. })));
}

#[test]
fn same_seed_same_curve() {
    let cfg = tiny_train_config(6);
    let data = scenes(2);
    let a = train(&cfg, fresh(&cfg, DType::F64), &data, None).unwrap().curve;
    let b = train(&cfg, fresh(&cfg, DType::F64), &data, None).unwrap().curve;
    assert_eq!(a, b);
}

#[test]
fn task_filter_restricts_samples() {
    let mut cfg = tiny_train_config(1);
    cfg.tasks = vec![TaskKind::SemanticSingle];
    let trainer = segpoint::train::Trainer::new(&cfg, fresh(&cfg, DType::F32), &scenes(2)).unwrap();
    assert!(!trainer.samples.is_empty());
    assert!(trainer.samples.iter().all(|s| s.sample.kind == TaskKind::SemanticSingle));
}

#[test]
fn dataset_on_disk_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        base_seed: 40,
        train_scenes: 2,
        val_scenes: 1,
        n_points: 256,
    };
    let index = build_dataset(&spec, dir.path()).unwrap();
    assert_eq!(index.scenes.len(), 3);
    let train_split = load_dataset(dir.path(), Some(Split::Train)).unwrap();
    let val_split = load_dataset(dir.path(), Some(Split::Val)).unwrap();
    assert_eq!((train_split.len(), val_split.len()), (2, 1));
    let (scene, anns) = generate_labeled(40, 256).unwrap();
    assert_eq!(train_split[0].scene, scene);
    assert_eq!(train_split[0].annotations, anns);
}

#[test]
fn prediction_exports_colored_ply() {
    let cfg = tiny_train_config(0);
    let model = fresh(&cfg, DType::F32);
    let (scene, _) = generate_labeled(1, 256).unwrap();
    let pred = predict(&model, &scene, "Can you segment the chair category in this point cloud?").unwrap();
    assert!(pred.masks.iter().all(|(_, m)| m.len() == 256));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.ply");
    let mask = (0..256).map(|i| i % 2 == 0).collect();
    export_ply(&path, scene.cloud.coords(), &[("chair".into(), mask)]).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("ply\n"));
    assert!(text.contains("element vertex 256"));
    assert_eq!(text.lines().filter(|l| l.split_whitespace().count() == 6).count(), 256);
}

#[test]
fn config_toml_round_trip() {
    let cfg = tiny_train_config(7);
    let text = cfg.to_toml().unwrap();
    assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    assert!(TrainConfig::from_toml("learning_rate = -1.0").is_err());
}
