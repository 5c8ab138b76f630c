use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SHAPE_TOL: f64 = 1e-9;
const MAX_ITERS: usize = 500;

/// Two-parameter Weibull law fitted to the upper tail of a distance sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullModel {
    pub shape: f64,
    pub scale: f64,
    pub tail_size: usize,
}

impl WeibullModel {
    /// `1 − exp(−(x/λ)^κ)` for `x ≥ 0`, zero below.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        -(-(x / self.scale).powf(self.shape)).exp_m1()
    }
}

/// Maximum-likelihood Weibull fit on the `tail` largest distances.
///
/// The shape solves the profile-likelihood equation
/// `Σ xᵏ ln x / Σ xᵏ − 1/k − mean(ln x) = 0` by safeguarded Newton iteration;
/// the scale then follows in closed form. Values are divided by the sample
/// maximum first so powers stay in `(0, 1]`.
pub fn weibull_tail_fit(distances: &[f64], tail: usize) -> Result<WeibullModel> {
    let n = distances.len();
    if tail < 2 || tail > n {
        return Err(Error::InvalidParam(format!(
            "tail size {tail} must lie in [2, {n}]"
        )));
    }
    if let Some(bad) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::InvalidInput(format!(
            "distances must be finite and nonnegative, got {bad}"
        )));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..tail];
    let max = top[0];
    let min = top[tail - 1];
    if max == min {
        return Err(Error::DegenerateSample(format!(
            "all {tail} tail values equal {max}"
        )));
    }
    if min == 0.0 {
        return Err(Error::DegenerateSample(
            "tail contains zero distances; the likelihood is unbounded".into(),
        ));
    }

    let logs: Vec<f64> = top.iter().map(|x| (x / max).ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / tail as f64;

    // g(k) and g'(k); g is strictly increasing for non-constant samples.
    let eval = |k: f64| {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &l in &logs {
            let p = (k * l).exp();
            s0 += p;
            s1 += p * l;
            s2 += p * l * l;
        }
        let r = s1 / s0;
        let g = r - 1.0 / k - mean_log;
        let dg = s2 / s0 - r * r + 1.0 / (k * k);
        (g, dg)
    };

    // Start from the Gumbel moment estimate on the log scale.
    let var_log = logs.iter().map(|l| (l - mean_log).powi(2)).sum::<f64>() / tail as f64;
    let mut k = std::f64::consts::PI / (var_log.sqrt() * 6f64.sqrt());
    if !k.is_finite() || k <= 0.0 {
        k = 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut converged = false;
    for _ in 0..MAX_ITERS {
        let (g, dg) = eval(k);
        if g.abs() <= SHAPE_TOL {
            converged = true;
            break;
        }
        if g < 0.0 {
            lo = lo.max(k);
        } else {
            hi = hi.min(k);
        }
        let newton = k - g / dg;
        k = if newton > lo && newton < hi && newton.is_finite() {
            newton
        } else if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            2.0 * k
        };
    }
    if !converged {
        return Err(Error::Convergence(format!(
            "Weibull shape equation did not reach {SHAPE_TOL} in {MAX_ITERS} iterations"
        )));
    }
    let mean_pow = logs.iter().map(|l| (k * l).exp()).sum::<f64>() / tail as f64;
    let scale = max * mean_pow.powf(1.0 / k);
    Ok(WeibullModel {
        shape: k,
        scale,
        tail_size: tail,
    })
}
