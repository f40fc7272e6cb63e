//! Evaluation metrics: MAE, RMSE, tumor proportion score, weighted MSE with
//! softmax category weights, and quadratic weighted kappa for ordinal
//! agreement.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Per-image evaluation record: predicted and ground-truth counts per
/// category, with TPS values derived from the (neg, pos) convention
/// (category 0 negative, category 1 positive).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub predicted: Vec<f64>,
    pub ground_truth: Vec<f64>,
}

impl EvalRecord {
    pub fn predicted_tps(&self) -> TpsValue {
        tps(self.predicted[1], self.predicted[0])
    }

    pub fn ground_truth_tps(&self) -> TpsValue {
        tps(self.ground_truth[1], self.ground_truth[0])
    }
}

pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(CoreError::InvalidArgument(
            "mae needs equal-length non-empty inputs".into(),
        ));
    }
    Ok(preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

pub fn rmse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(CoreError::InvalidArgument(
            "rmse needs equal-length non-empty inputs".into(),
        ));
    }
    let ms = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(ms.sqrt())
}

/// Tumor proportion score with the degenerate zero-cell case flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpsValue {
    pub value: f64,
    /// both counts were zero; value pinned at 0
    pub degenerate: bool,
}

/// c_pos / (c_pos + c_neg); (0, 0) yields 0 with the degenerate flag set.
pub fn tps(c_pos: f64, c_neg: f64) -> TpsValue {
    assert!(
        c_pos >= 0.0 && c_neg >= 0.0,
        "tps requires non-negative counts"
    );
    let total = c_pos + c_neg;
    if total == 0.0 {
        TpsValue {
            value: 0.0,
            degenerate: true,
        }
    } else {
        TpsValue {
            value: c_pos / total,
            degenerate: false,
        }
    }
}

/// Median; for even-length inputs the mean of the two middle values.
fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Softmax category weights from log count-to-median ratios.
/// A zero category total is replaced by `norm_floor` before the log and
/// flagged in the returned bool.
pub fn wmse_weights(per_category_total_gt: &[f64], norm_floor: f64) -> Result<(Vec<f64>, bool)> {
    let m = per_category_total_gt.len();
    if m == 0 {
        return Err(CoreError::InvalidArgument("wmse needs m >= 1".into()));
    }
    if per_category_total_gt.iter().all(|&t| t == 0.0) {
        return Err(CoreError::InvalidArgument(
            "wmse: all category totals are zero".into(),
        ));
    }
    let mut flagged = false;
    let totals: Vec<f64> = per_category_total_gt
        .iter()
        .map(|&t| {
            if t <= 0.0 {
                flagged = true;
                norm_floor
            } else {
                t
            }
        })
        .collect();
    let med = median(&totals);
    let f: Vec<f64> = totals.iter().map(|&t| (t / med).ln()).collect();
    let mx = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = f.iter().map(|&x| (x - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    Ok((exps.iter().map(|&e| e / s).collect(), flagged))
}

/// (1/m) * sum_i omega_i * MSE_i with softmax weights; note the 1/m prefactor
/// on top of weights that already sum to 1, kept exactly as specified.
pub fn wmse(per_category_mse: &[f64], per_category_total_gt: &[f64]) -> Result<f64> {
    if per_category_mse.len() != per_category_total_gt.len() {
        return Err(CoreError::InvalidArgument(
            "wmse: mse and totals length mismatch".into(),
        ));
    }
    let m = per_category_mse.len();
    let (w, flagged) = wmse_weights(per_category_total_gt, 1e-8)?;
    if flagged {
        log::warn!("wmse: zero category total replaced by floor before log");
    }
    Ok(w
        .iter()
        .zip(per_category_mse)
        .map(|(wi, mi)| wi * mi)
        .sum::<f64>()
        / m as f64)
}

/// Observed confusion matrix, rows = a, cols = b.
pub fn confusion_matrix(labels_a: &[usize], labels_b: &[usize], num_levels: usize) -> Vec<Vec<f64>> {
    let mut o = vec![vec![0.0; num_levels]; num_levels];
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        o[a][b] += 1.0;
    }
    o
}

/// Quadratic weighted kappa: 1 - sum(w o) / sum(w e) with
/// w_ij = (i-j)^2 / (L-1)^2 and e the outer product of marginals scaled to
/// the observation total. Returns 1 for identical constant inputs; errors
/// when the chance denominator vanishes otherwise.
pub fn qwk(labels_a: &[usize], labels_b: &[usize], num_levels: usize) -> Result<f64> {
    if labels_a.is_empty() || labels_a.len() != labels_b.len() {
        return Err(CoreError::InvalidArgument(
            "qwk needs equal-length non-empty label lists".into(),
        ));
    }
    if num_levels < 2 {
        return Err(CoreError::InvalidArgument("qwk needs num_levels >= 2".into()));
    }
    for &l in labels_a.iter().chain(labels_b) {
        if l >= num_levels {
            return Err(CoreError::InvalidArgument(format!(
                "label {l} out of range 0..{num_levels}"
            )));
        }
    }
    let n = labels_a.len() as f64;
    let o = confusion_matrix(labels_a, labels_b, num_levels);
    let mut marg_a = vec![0.0; num_levels];
    let mut marg_b = vec![0.0; num_levels];
    for i in 0..num_levels {
        for j in 0..num_levels {
            marg_a[i] += o[i][j];
            marg_b[j] += o[i][j];
        }
    }
    let denom_scale = (num_levels - 1) as f64 * (num_levels - 1) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..num_levels {
        for j in 0..num_levels {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / denom_scale;
            num += w * o[i][j];
            den += w * marg_a[i] * marg_b[j] / n;
        }
    }
    if den == 0.0 {
        if labels_a == labels_b {
            return Ok(1.0);
        }
        return Err(CoreError::InvalidArgument(
            "qwk undefined: constant labels on both sides disagree".into(),
        ));
    }
    Ok(1.0 - num / den)
}

/// Ordinal expression grade from a TPS-like labeling index. Thresholds follow
/// common Ki-67 practice: <10%, 10-25%, 25-50%, >=50%.
pub fn grade_tps(tps_value: f64) -> usize {
    if tps_value < 0.10 {
        0
    } else if tps_value < 0.25 {
        1
    } else if tps_value < 0.50 {
        2
    } else {
        3
    }
}
