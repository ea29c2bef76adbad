//! Evaluation, single-prompt prediction and PLY export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::LoadedScene;
use crate::data::Scene;
use crate::error::Result;
use crate::lm::vocab::BOS;
use crate::metrics::{labeled_iou, union_iou, MetricsReport, SceneRecord};
use crate::model::{Prediction, SegPoint};
use crate::tasks::{ChatSample, TaskKind};
use crate::train::{prepare_samples, PreparedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub scene_id: String,
    pub annotation: usize,
    pub kind: TaskKind,
    pub expected: String,
    pub answer: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    /// Fraction of answers equal to the reference answer string.
    pub exact_match: f64,
    pub outcomes: Vec<SampleOutcome>,
}

/// IoU of one prediction under the task's scoring convention.
pub fn score(sample: &ChatSample, masks: &[(String, Vec<bool>)], n: usize) -> Result<f64> {
    if sample.kind.is_semantic() {
        let gt: Vec<(String, Vec<bool>)> = {
            let mut cats = sample.answer_categories.clone();
            if sample.kind.lists_categories() {
                cats.sort();
            }
            cats.into_iter().zip(sample.gt_masks.iter().cloned()).collect()
        };
        labeled_iou(masks, &gt, n)
    } else {
        let pred: Vec<Vec<bool>> = masks.iter().map(|(_, m)| m.clone()).collect();
        union_iou(&pred, &sample.gt_masks, n)
    }
}

pub fn evaluate_samples(model: &SegPoint, samples: &[PreparedSample]) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(samples.len());
    let mut outcomes = Vec::with_capacity(samples.len());
    let mut exact = 0usize;
    for s in samples {
        let pred = model.infer(&s.prep, &s.sample.prompt_ids)?;
        let iou = score(&s.sample, &pred.masks, s.prep.n_points())?;
        if pred.answer == s.sample.answer {
            exact += 1;
        }
        records.push(SceneRecord {
            scene_id: format!("{}#{}", s.scene_id, s.annotation),
            task: s.sample.kind.name().to_string(),
            iou,
        });
        outcomes.push(SampleOutcome {
            scene_id: s.scene_id.clone(),
            annotation: s.annotation,
            kind: s.sample.kind,
            expected: s.sample.answer.clone(),
            answer: pred.answer,
            iou,
        });
    }
    let metrics = MetricsReport::from_records(records)?;
    Ok(EvalReport {
        metrics,
        exact_match: exact as f64 / samples.len() as f64,
        outcomes,
    })
}

/// Greedy-decode every annotation (optionally of one task kind) and score it.
pub fn evaluate(model: &SegPoint, scenes: &[LoadedScene], task: Option<TaskKind>) -> Result<EvalReport> {
    let samples = prepare_samples(model, scenes, &|k| task.is_none_or(|t| t == k))?;
    evaluate_samples(model, &samples)
}

/// Run the inference path on a free-form prompt. A bare question is wrapped
/// in the chat frame; a prompt that already holds `<POINT>` is used as is.
pub fn predict(model: &SegPoint, scene: &Scene, prompt: &str) -> Result<Prediction> {
    let prep = model.prepare(&scene.cloud)?;
    let framed = if prompt.contains("<POINT>") {
        prompt.to_string()
    } else {
        format!("USER: <POINT> {} ASSISTANT:", prompt.trim())
    };
    let mut ids = vec![BOS];
    ids.extend(model.vocab.tokenize(&framed));
    model.infer(&prep, &ids)
}

pub const BACKGROUND_COLOR: [u8; 3] = [128, 128, 128];
const MASK_COLORS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

pub fn mask_color(i: usize) -> [u8; 3] {
    MASK_COLORS[i % MASK_COLORS.len()]
}

/// ASCII PLY with one color per mask (later masks win) and gray background.
pub fn ply_string(coords: &[[f32; 3]], masks: &[(String, Vec<bool>)]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        coords.len()
    );
    for (i, p) in coords.iter().enumerate() {
        let mut c = BACKGROUND_COLOR;
        for (k, (_, m)) in masks.iter().enumerate() {
            if m.get(i).copied().unwrap_or(false) {
                c = mask_color(k);
            }
        }
        let _ = writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    out
}

pub fn export_ply(path: &Path, coords: &[[f32; 3]], masks: &[(String, Vec<bool>)]) -> Result<()> {
    std::fs::write(path, ply_string(coords, masks))?;
    Ok(())
}
