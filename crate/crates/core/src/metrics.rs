//! Detection metrics over confidence arrays (higher = in-distribution).
//!
//! Thresholds are drawn from observed scores only; tied scores always move
//! together. All values are fractions in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidences of the ID test split and of one shifted dataset.
#[derive(Debug, Clone, Copy)]
pub struct ScoreSet<'a> {
    pub id: &'a [f64],
    pub ood: &'a [f64],
}

impl<'a> ScoreSet<'a> {
    pub fn new(id: &'a [f64], ood: &'a [f64]) -> Result<Self> {
        for (side, v) in [("id", id), ("ood", ood)] {
            if v.is_empty() {
                return Err(Error::InvalidInput(format!("{side} confidences are empty")));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("{side} confidences contain non-finite values")));
            }
        }
        Ok(Self { id, ood })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positive {
    Id,
    Ood,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of entries of the ascending slice strictly below and equal to `x`.
fn below_and_equal(asc: &[f64], x: f64) -> (usize, usize) {
    let lo = asc.partition_point(|&v| v < x);
    let hi = asc.partition_point(|&v| v <= x);
    (lo, hi - lo)
}

/// `P(id > ood) + ½·P(id = ood)` over all cross pairs.
pub fn auroc(s: ScoreSet<'_>) -> Result<f64> {
    let s = ScoreSet::new(s.id, s.ood)?;
    let ood = sorted(s.ood);
    // Twice the Mann-Whitney statistic stays an exact integer.
    let twice_u: u64 = s
        .id
        .iter()
        .map(|&x| {
            let (lt, eq) = below_and_equal(&ood, x);
            2 * lt as u64 + eq as u64
        })
        .sum();
    Ok((twice_u as f64 / 2.0) / (s.id.len() as f64 * s.ood.len() as f64))
}

/// False-positive rate at the largest ID threshold that keeps ≥ 95 % of ID.
pub fn fpr_at_95_tpr(s: ScoreSet<'_>) -> Result<f64> {
    let s = ScoreSet::new(s.id, s.ood)?;
    let n = s.id.len();
    let mut desc = sorted(s.id);
    desc.reverse();
    // The count of id ≥ desc[i] is the end of its tie block.
    let mut tau = desc[n - 1];
    let mut i = 0;
    while i < n {
        let v = desc[i];
        let mut j = i;
        while j < n && desc[j] == v {
            j += 1;
        }
        if j * 100 >= 95 * n {
            tau = v;
            break;
        }
        i = j;
    }
    let accepted = s.ood.iter().filter(|&&x| x >= tau).count();
    Ok(accepted as f64 / s.ood.len() as f64)
}

/// Average precision `Σ (R_n − R_{n−1})·P_n`, ranking by confidence for
/// ID-positive and by negated confidence for OOD-positive. Each group of
/// tied scores is one threshold step.
pub fn aupr(s: ScoreSet<'_>, positive: Positive) -> Result<f64> {
    let s = ScoreSet::new(s.id, s.ood)?;
    let (pos, neg, sign) = match positive {
        Positive::Id => (s.id, s.ood, 1.0),
        Positive::Ood => (s.ood, s.id, -1.0),
    };
    let mut items: Vec<(f64, bool)> = pos
        .iter()
        .map(|&x| (sign * x, true))
        .chain(neg.iter().map(|&x| (sign * x, false)))
        .collect();
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Accumulates Σ Δtp·P_n and divides by the positive count once, so a
    // perfect ranking yields exactly 1.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut weighted = 0.0;
    let mut prev_tp = 0usize;
    let mut i = 0;
    while i < items.len() {
        let v = items[i].0;
        while i < items.len() && items[i].0 == v {
            if items[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        weighted += (tp - prev_tp) as f64 * precision;
        prev_tp = tp;
    }
    Ok(weighted / pos.len() as f64)
}

pub fn harmonic_aupr(a_in: f64, a_out: f64) -> Result<f64> {
    if !(a_in > 0.0 && a_out > 0.0) || !a_in.is_finite() || !a_out.is_finite() {
        return Err(Error::InvalidInput(format!(
            "harmonic mean needs positive inputs, got {a_in} and {a_out}"
        )));
    }
    Ok(2.0 * a_in * a_out / (a_in + a_out))
}

/// Unweighted mean of per-class F1. A class absent from both predictions and
/// truth scores 1; a class with undefined precision or recall otherwise scores 0.
pub fn f1_macro(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty prediction set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&l| l >= num_classes) {
        return Err(Error::InvalidInput(format!("label {bad} outside [0, {num_classes})")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            if tp[c] + fp[c] + fneg[c] == 0 {
                return 1.0;
            }
            if tp[c] == 0 {
                return 0.0;
            }
            let p = tp[c] as f64 / (tp[c] + fp[c]) as f64;
            let r = tp[c] as f64 / (tp[c] + fneg[c]) as f64;
            2.0 * p * r / (p + r)
        })
        .sum();
    Ok(total / num_classes as f64)
}

/// Every metric for one (method, dataset) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub auroc: f64,
    pub fpr95: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub aupr_h: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn evaluate(id: &[f64], ood: &[f64]) -> Result<MetricRecord> {
    let s = ScoreSet::new(id, ood)?;
    let aupr_in = aupr(s, Positive::Id)?;
    let aupr_out = aupr(s, Positive::Ood)?;
    Ok(MetricRecord {
        auroc: auroc(s)?,
        fpr95: fpr_at_95_tpr(s)?,
        aupr_in,
        aupr_out,
        aupr_h: harmonic_aupr(aupr_in, aupr_out)?,
        n_id: id.len(),
        n_ood: ood.len(),
    })
}
