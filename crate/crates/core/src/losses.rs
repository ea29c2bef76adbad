//! Mask decoding and the three training losses.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};
use crate::lm::MaskEmbeddings;
use crate::nn::log_softmax_last;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_txt: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_txt: 1.0,
            lambda_bce: 2.0,
            lambda_dice: 2.0,
        }
    }
}

/// Pre-sigmoid mask scores `[K x N]`; `None` when there are no masks.
#[derive(Debug, Clone)]
pub struct MaskLogits {
    pub values: Option<Tensor>,
    pub n_points: usize,
}

impl MaskLogits {
    pub fn len(&self) -> usize {
        self.values.as_ref().map_or(0, |t| t.dims()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Binary masks, positive where the logit is strictly above zero.
    pub fn binarize(&self) -> Result<Vec<Vec<bool>>> {
        match &self.values {
            None => Ok(Vec::new()),
            Some(t) => Ok(t
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?
                .into_iter()
                .map(|row| row.into_iter().map(|z| z > 0.0).collect())
                .collect()),
        }
    }
}

/// `out[k, n] = <h_seg[k], f_P[n]>`.
pub fn mask_logits(h_seg: &MaskEmbeddings, f_p: &Tensor) -> Result<MaskLogits> {
    let (n, d) = f_p.dims2()?;
    if h_seg.dim != d {
        return Err(invalid(format!("mask embedding width {} != point embedding width {d}", h_seg.dim)));
    }
    let values = match &h_seg.values {
        None => None,
        Some(h) => Some(h.matmul(&f_p.t()?.contiguous()?)?),
    };
    Ok(MaskLogits { values, n_points: n })
}

#[derive(Debug, Clone)]
pub struct TextLoss {
    pub loss: Tensor,
    /// Set when no position was supervised; the loss is then 0.
    pub empty: bool,
}

/// Mean next-token cross-entropy: logits at `t` predict `target_ids[t + 1]`,
/// counted when `answer_mask[t + 1]` holds.
pub fn text_ce_loss(logits: &Tensor, target_ids: &[u32], answer_mask: &[bool]) -> Result<TextLoss> {
    let (t, v) = logits.dims2()?;
    ensure!(
        target_ids.len() == t && answer_mask.len() == t,
        "text loss inputs disagree: {t} logits, {} targets, {} mask entries",
        target_ids.len(),
        answer_mask.len()
    );
    let positions: Vec<u32> = (0..t.saturating_sub(1))
        .filter(|&i| answer_mask[i + 1])
        .map(|i| i as u32)
        .collect();
    if positions.is_empty() {
        log::warn!("text loss has no supervised positions");
        return Ok(TextLoss {
            loss: Tensor::zeros((), logits.dtype(), logits.device())?,
            empty: true,
        });
    }
    let targets: Vec<u32> = positions.iter().map(|&i| target_ids[i as usize + 1]).collect();
    if let Some(bad) = targets.iter().find(|&&id| id as usize >= v) {
        return Err(invalid(format!("target id {bad} outside vocabulary of {v}")));
    }
    let m = positions.len();
    let pos = Tensor::from_vec(positions, m, logits.device())?;
    let logp = log_softmax_last(&logits.index_select(&pos, 0)?)?;
    let tgt = Tensor::from_vec(targets, (m, 1), logits.device())?;
    let picked = logp.gather(&tgt, 1)?;
    Ok(TextLoss {
        loss: (picked.sum_all()? * (-1.0 / m as f64))?,
        empty: false,
    })
}

pub fn targets_tensor(masks: &[Vec<bool>], dtype: DType, device: &Device) -> Result<Tensor> {
    let k = masks.len();
    let n = masks.first().map_or(0, Vec::len);
    ensure!(masks.iter().all(|m| m.len() == n), "ragged target masks");
    let flat: Vec<f64> = masks.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(flat, (k, n), device)?.to_dtype(dtype)?)
}

fn check_targets(logits: &Tensor, targets: &Tensor) -> Result<()> {
    ensure!(
        logits.dims() == targets.dims(),
        "mask logits {:?} and targets {:?} differ",
        logits.dims(),
        targets.dims()
    );
    Ok(())
}

fn zero_scalar(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &Device::Cpu)?)
}

/// `(tanh(z / 2) + 1) / 2`: saturates without overflowing `exp`, so the
/// backward pass stays finite for large negative logits.
pub fn sigmoid(z: &Tensor) -> Result<Tensor> {
    Ok((((z * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Mean of `max(z, 0) - z t + ln(1 + exp(-|z|))` over all `K x N` entries.
pub fn bce_mask_loss(logits: &MaskLogits, targets: &Tensor, dtype: DType) -> Result<Tensor> {
    let Some(z) = &logits.values else {
        return zero_scalar(dtype);
    };
    check_targets(z, targets)?;
    let softplus = (z.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((z.relu()? - (z * targets)?)? + softplus)?;
    Ok(per.mean_all()?)
}

/// Per mask `1 - (2 sum p t + eps) / (sum p + sum t + eps)` with `p = sigmoid(z)`,
/// averaged over masks.
pub fn dice_loss(logits: &MaskLogits, targets: &Tensor, eps: f64, dtype: DType) -> Result<Tensor> {
    let Some(z) = &logits.values else {
        return zero_scalar(dtype);
    };
    check_targets(z, targets)?;
    let p = sigmoid(z)?;
    let inter = ((p.broadcast_mul(targets)?.sum(1)? * 2.0)? + eps)?;
    let denom = ((p.sum(1)? + targets.sum(1)?)? + eps)?;
    let per = (1.0 - inter.div(&denom)?)?;
    Ok(per.mean_all()?)
}

pub fn total_loss(txt: &Tensor, bce: &Tensor, dice: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok((((txt * w.lambda_txt)? + (bce * w.lambda_bce)?)? + (dice * w.lambda_dice)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar_f64;

    fn t2(rows: Vec<Vec<f64>>) -> Tensor {
        crate::nn::tensor_from_rows(&rows, DType::F64, &Device::Cpu).unwrap()
    }

    fn logits(rows: Vec<Vec<f64>>) -> MaskLogits {
        let n = rows[0].len();
        MaskLogits {
            values: Some(t2(rows)),
            n_points: n,
        }
    }

    fn scalar(x: f64) -> Tensor {
        Tensor::new(x, &Device::Cpu).unwrap()
    }

    #[test]
    fn mask_logits_one_hot_and_zero() {
        let f_p = t2(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let e1 = MaskEmbeddings {
            values: Some(t2(vec![vec![0.0, 1.0]])),
            dim: 2,
        };
        let out = mask_logits(&e1, &f_p).unwrap();
        assert_eq!(
            out.values.unwrap().to_vec2::<f64>().unwrap(),
            vec![vec![2.0, 4.0, 6.0]]
        );
        let zero = MaskEmbeddings {
            values: Some(t2(vec![vec![0.0, 0.0]])),
            dim: 2,
        };
        assert_eq!(mask_logits(&zero, &f_p).unwrap().binarize().unwrap(), vec![vec![false; 3]]);
        let wrong = MaskEmbeddings { values: None, dim: 3 };
        assert!(mask_logits(&wrong, &f_p).is_err());
    }

    #[test]
    fn mask_logits_fixture() {
        let f_p = t2(vec![vec![1.0, -1.0], vec![0.5, 2.0], vec![0.0, 3.0]]);
        let h = MaskEmbeddings {
            values: Some(t2(vec![vec![2.0, 1.0], vec![-1.0, 0.5]])),
            dim: 2,
        };
        let out = mask_logits(&h, &f_p).unwrap().values.unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(out, vec![vec![1.0, 3.0, 3.0], vec![-1.5, 0.5, 1.5]]);
    }

    #[test]
    fn text_ce_uniform_and_margin() {
        let uniform = Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap();
        let l = text_ce_loss(&uniform, &[0, 1, 2], &[false, true, true]).unwrap();
        assert!((scalar_f64(&l.loss).unwrap() - 4f64.ln()).abs() < 1e-12);

        let mut rows = vec![vec![0.0; 4]; 3];
        rows[0][1] = 50.0;
        rows[1][2] = 50.0;
        let l = text_ce_loss(&t2(rows), &[0, 1, 2], &[false, true, true]).unwrap();
        assert!(scalar_f64(&l.loss).unwrap() < 1e-6);

        let none = text_ce_loss(&uniform, &[0, 1, 2], &[true, false, false]).unwrap();
        assert!(none.empty);
        assert_eq!(scalar_f64(&none.loss).unwrap(), 0.0);
    }

    #[test]
    fn text_ce_fixture() {
        let rows = vec![vec![1.0, 0.0, -1.0], vec![0.5, 0.5, 2.0], vec![0.0, 0.0, 0.0]];
        let l = text_ce_loss(&t2(rows.clone()), &[0, 2, 0], &[false, true, true]).unwrap();
        let nll = |row: &[f64], t: usize| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[t]
        };
        let expect = (nll(&rows[0], 2) + nll(&rows[1], 0)) / 2.0;
        assert!((scalar_f64(&l.loss).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_values() {
        let z = logits(vec![vec![0.0; 5]]);
        let t = t2(vec![vec![1.0, 0.0, 1.0, 0.0, 0.0]]);
        let v = scalar_f64(&bce_mask_loss(&z, &t, DType::F64).unwrap()).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);

        let z = logits(vec![vec![50.0, -50.0, 50.0, -50.0, -50.0]]);
        assert!(scalar_f64(&bce_mask_loss(&z, &t, DType::F64).unwrap()).unwrap() < 1e-6);

        let z = logits(vec![vec![1.0, -1.0, 2.0, 0.0]]);
        let t = t2(vec![vec![1.0, 0.0, 1.0, 0.0]]);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = (-(sig(1.0).ln()) - (1.0 - sig(-1.0)).ln() - sig(2.0).ln() - (0.5f64).ln()) / 4.0;
        let got = scalar_f64(&bce_mask_loss(&z, &t, DType::F64).unwrap()).unwrap();
        assert!((got - expect).abs() < 1e-12);

        let empty = MaskLogits { values: None, n_points: 4 };
        assert_eq!(scalar_f64(&bce_mask_loss(&empty, &t, DType::F64).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn dice_values() {
        let t = t2(vec![vec![1.0, 0.0, 1.0, 0.0]]);
        let perfect = logits(vec![vec![50.0, -50.0, 50.0, -50.0]]);
        assert!(scalar_f64(&dice_loss(&perfect, &t, 1.0, DType::F64).unwrap()).unwrap() < 1e-3);

        let opposite = logits(vec![vec![-50.0, 50.0, -50.0, 50.0]]);
        let v = scalar_f64(&dice_loss(&opposite, &t, 1.0, DType::F64).unwrap()).unwrap();
        assert!((v - (1.0 - 1.0 / 5.0)).abs() < 1e-9);

        let z = logits(vec![vec![1.0, -1.0, 2.0, 0.0]]);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let p = [sig(1.0), sig(-1.0), sig(2.0), sig(0.0)];
        let expect = 1.0 - (2.0 * (p[0] + p[2]) + 1.0) / (p.iter().sum::<f64>() + 2.0 + 1.0);
        let got = scalar_f64(&dice_loss(&z, &t, 1.0, DType::F64).unwrap()).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        let v = scalar_f64(&total_loss(&scalar(1.0), &scalar(1.0), &scalar(1.0), &w).unwrap()).unwrap();
        assert_eq!(v, 5.0);
        let v = scalar_f64(&total_loss(&scalar(0.0), &scalar(0.0), &scalar(0.0), &w).unwrap()).unwrap();
        assert_eq!(v, 0.0);
        let v = scalar_f64(&total_loss(&scalar(0.5), &scalar(0.25), &scalar(0.125), &w).unwrap()).unwrap();
        assert_eq!(v, 1.25);
    }

    #[test]
    fn saturated_logits_keep_finite_gradients() {
        let z = candle_core::Var::from_vec(vec![-200f32, -90.0, 0.0, 90.0, 200.0], (1, 5), &Device::Cpu).unwrap();
        let t = Tensor::from_vec(vec![1f32, 0.0, 1.0, 0.0, 1.0], (1, 5), &Device::Cpu).unwrap();
        let logits = MaskLogits {
            values: Some(z.as_tensor().clone()),
            n_points: 5,
        };
        let loss = (bce_mask_loss(&logits, &t, DType::F32).unwrap() + dice_loss(&logits, &t, 1.0, DType::F32).unwrap()).unwrap();
        let g = loss.backward().unwrap();
        let g: Vec<f32> = g.get(&z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(g.iter().all(|v| v.is_finite()), "{g:?}");
    }
}
