use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::linalg::RidgeCholesky;
use crate::error::{Error, Result};

const MAX_NEWTON_STEPS: usize = 200;
pub const GRADIENT_TOL: f64 = 1e-8;

/// Fitted binary logistic model `P(y=1 | x) = σ(w·x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Array1<f64>,
    pub intercept: f64,
}

impl LogisticModel {
    pub fn logit(&self, x: ArrayView1<f64>) -> f64 {
        self.weights.dot(&x) + self.intercept
    }
}

/// Mean negative log-likelihood plus `l2/2 · ‖w‖²`. The intercept is not penalised.
pub fn logistic_loss(
    x: ArrayView2<f64>,
    y: &[bool],
    l2: f64,
    weights: ArrayView1<f64>,
    intercept: f64,
) -> f64 {
    let n = x.nrows() as f64;
    let z = x.dot(&weights) + intercept;
    let nll: f64 = z
        .iter()
        .zip(y)
        .map(|(&z, &yi)| softplus(z) - if yi { z } else { 0.0 })
        .sum();
    nll / n + 0.5 * l2 * weights.dot(&weights)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch Newton with backtracking on the regularised logistic loss.
/// Stops when the gradient norm reaches `1e-8`.
pub fn logistic_fit(x: ArrayView2<f64>, y: &[bool], l2: f64) -> Result<LogisticModel> {
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", y.len())));
    }
    if !(l2 > 0.0) || !l2.is_finite() {
        return Err(Error::InvalidParam(format!("l2 must be positive, got {l2}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("features contain non-finite values".into()));
    }
    if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
        return Err(Error::DegenerateLabels);
    }

    // Augmented design: last column is the intercept.
    let mut xa = Array2::<f64>::ones((n, d + 1));
    xa.slice_mut(ndarray::s![.., ..d]).assign(&x);
    let mut theta = Array1::<f64>::zeros(d + 1);
    let loss_at = |t: &Array1<f64>| {
        logistic_loss(x, y, l2, t.slice(ndarray::s![..d]), t[d])
    };
    let mut loss = loss_at(&theta);

    for _ in 0..MAX_NEWTON_STEPS {
        let z = xa.dot(&theta);
        let p: Array1<f64> = z.mapv(sigmoid);
        let resid: Array1<f64> = p
            .iter()
            .zip(y)
            .map(|(&p, &yi)| p - if yi { 1.0 } else { 0.0 })
            .collect();
        let mut grad = xa.t().dot(&resid) / n as f64;
        for j in 0..d {
            grad[j] += l2 * theta[j];
        }
        if grad.dot(&grad).sqrt() <= GRADIENT_TOL {
            return Ok(split(theta, d));
        }
        let w = p.mapv(|p| p * (1.0 - p));
        let mut weighted = xa.clone();
        for (mut row, &wi) in weighted.rows_mut().into_iter().zip(w.iter()) {
            row *= wi;
        }
        let mut hess = xa.t().dot(&weighted) / n as f64;
        for j in 0..d {
            hess[[j, j]] += l2;
        }
        // Keep the intercept pivot positive when every probability saturates.
        hess[[d, d]] = hess[[d, d]].max(1e-12);
        let step = RidgeCholesky::new(hess.view())?.solve_vec(grad.view());

        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta - &(&step * t);
            let cand_loss = loss_at(&cand);
            if cand_loss <= loss - 1e-4 * t * slope {
                theta = cand;
                loss = cand_loss;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable decrease left: the iterate is at the optimum to machine precision.
            return Ok(split(theta, d));
        }
    }
    Err(Error::Convergence(format!(
        "logistic regression did not reach gradient norm {GRADIENT_TOL} in {MAX_NEWTON_STEPS} steps"
    )))
}

fn split(theta: Array1<f64>, d: usize) -> LogisticModel {
    LogisticModel {
        weights: theta.slice(ndarray::s![..d]).to_owned(),
        intercept: theta[d],
    }
}
