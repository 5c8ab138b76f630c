use crate::error::{Error, Result};

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: empty input")));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what}: non-finite value {bad}")));
    }
    Ok(())
}

/// `ln Σ exp(v_i)`, shifted by the maximum so entries up to ~1e300 stay finite.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    check_finite(v, "log_sum_exp")?;
    Ok(lse(v))
}

/// Unchecked log-sum-exp for hot paths whose inputs were validated upstream.
pub(crate) fn lse(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Temperature-scaled log-sum-exp `T · ln Σ exp(v_i / T)`.
pub(crate) fn lse_at(v: &[f64], temperature: f64) -> f64 {
    if temperature == 1.0 {
        return lse(v);
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / temperature).collect();
    temperature * lse(&scaled)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn softmax_at(v: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return softmax(v);
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / temperature).collect();
    softmax(&scaled)
}

/// Index of the largest entry; ties resolve to the first index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Percentile with linear interpolation between closest ranks: the value at
/// fractional index `p/100 · (n−1)` of the ascending sort.
pub fn percentile(v: &[f64], p: f64) -> Result<f64> {
    check_finite(v, "percentile")?;
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidParam(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if p >= 100.0 {
        return sorted[n - 1];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Divides by the norm, flooring it at `1e-12` so zero vectors stay zero.
pub(crate) fn l2_normalize(a: &[f64]) -> Vec<f64> {
    let n = norm(a).max(1e-12);
    a.iter().map(|x| x / n).collect()
}
