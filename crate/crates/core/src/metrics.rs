//! Scene-level IoU metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// `|pred & gt| / |pred | gt|`; two empty masks score 1.0.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    ensure!(pred.len() == gt.len(), "mask lengths differ: {} vs {}", pred.len(), gt.len());
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn miou(ious: &[f64]) -> Result<f64> {
    ensure!(!ious.is_empty(), "cannot average an empty evaluation");
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Fraction of scores strictly above 0.5.
pub fn acc_at_50(ious: &[f64]) -> Result<f64> {
    ensure!(!ious.is_empty(), "cannot average an empty evaluation");
    Ok(ious.iter().filter(|&&v| v > 0.5).count() as f64 / ious.len() as f64)
}

pub fn union_mask(masks: &[Vec<bool>], n: usize) -> Result<Vec<bool>> {
    let mut out = vec![false; n];
    for m in masks {
        ensure!(m.len() == n, "mask of {} points in a cloud of {n}", m.len());
        for (o, &v) in out.iter_mut().zip(m) {
            *o |= v;
        }
    }
    Ok(out)
}

/// Referring-style score: union of predictions against union of targets.
pub fn union_iou(pred: &[Vec<bool>], gt: &[Vec<bool>], n: usize) -> Result<f64> {
    iou(&union_mask(pred, n)?, &union_mask(gt, n)?)
}

/// Semantic score: masks are grouped by label (unioned within a label), every
/// label present in either side is scored, and the scores are averaged.
pub fn labeled_iou(pred: &[(String, Vec<bool>)], gt: &[(String, Vec<bool>)], n: usize) -> Result<f64> {
    let mut labels: Vec<&str> = pred.iter().chain(gt).map(|(l, _)| l.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() {
        return Ok(1.0);
    }
    let pick = |side: &[(String, Vec<bool>)], label: &str| -> Vec<Vec<bool>> {
        side.iter().filter(|(l, _)| l == label).map(|(_, m)| m.clone()).collect()
    };
    let mut total = 0.0;
    for label in &labels {
        total += union_iou(&pick(pred, label), &pick(gt, label), n)?;
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub task: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub miou: f64,
    pub acc: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<SceneRecord>,
    pub summary: Summary,
}

impl MetricsReport {
    pub fn from_records(records: Vec<SceneRecord>) -> Result<Self> {
        let ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
        let summary = Summary {
            miou: miou(&ious)?,
            acc: acc_at_50(&ious)?,
            count: ious.len(),
        };
        Ok(Self { records, summary })
    }

    /// One JSON object per line: every record, then the summary.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary)?);
        out.push('\n');
        Ok(out)
    }
}
