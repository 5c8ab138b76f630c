use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Relative ridge added to every covariance before it is inverted or solved.
pub const RIDGE_EPS: f64 = 1e-6;

/// How samples are centred before the outer products are accumulated.
#[derive(Debug, Clone, Copy)]
pub enum Centering<'a> {
    /// Subtract the mean of all rows.
    PooledMean,
    /// Subtract the mean of each row's group (tied-covariance estimator).
    Groups {
        labels: &'a [usize],
        means: ArrayView2<'a, f64>,
    },
}

/// Maximum-likelihood covariance `(1/n) Σ (x−c)(x−c)ᵀ`.
///
/// The `1/n` denominator follows the tied estimator used by Mahalanobis
/// detectors. It rescales scores uniformly and leaves rankings unchanged.
pub fn covariance(x: ArrayView2<f64>, centering: Centering<'_>) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let centred = match centering {
        Centering::PooledMean => {
            let mean = column_mean(x);
            &x - &mean
        }
        Centering::Groups { labels, means } => {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
            if means.ncols() != d {
                return Err(Error::Shape("group means width differs from data".into()));
            }
            let mut c = x.to_owned();
            for (mut row, &label) in c.rows_mut().into_iter().zip(labels) {
                if label >= means.nrows() {
                    return Err(Error::InvalidInput(format!("label {label} has no mean")));
                }
                row -= &means.row(label);
            }
            c
        }
    };
    let mut cov = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in i..d {
            let s = centred.column(i).dot(&centred.column(j)) / n as f64;
            cov[[i, j]] = s;
            cov[[j, i]] = s;
        }
    }
    Ok(cov)
}

pub fn column_mean(x: ArrayView2<f64>) -> Array1<f64> {
    let n = x.nrows().max(1) as f64;
    x.sum_axis(ndarray::Axis(0)) / n
}

pub(crate) fn check_symmetric(a: ArrayView2<f64>, tol: f64) -> Result<()> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::InvalidInput(format!("matrix is {r}x{c}, not square")));
    }
    let scale = a.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    for i in 0..r {
        for j in (i + 1)..r {
            if (a[[i, j]] - a[[j, i]]).abs() > tol * scale {
                return Err(Error::InvalidInput(format!(
                    "matrix not symmetric at ({i},{j})"
                )));
            }
        }
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Lower Cholesky factor of `A + ε·tr(A)/D·I`, reusable across solves.
#[derive(Debug, Clone)]
pub struct RidgeCholesky {
    lower: Array2<f64>,
}

impl RidgeCholesky {
    pub fn new(a: ArrayView2<f64>) -> Result<Self> {
        check_symmetric(a, 1e-8)?;
        let d = a.nrows();
        let ridge = RIDGE_EPS * a.diag().sum() / d as f64;
        let mut m = a.to_owned();
        for i in 0..d {
            m[[i, i]] += ridge;
        }
        let mut lower = Array2::<f64>::zeros((d, d));
        for j in 0..d {
            let mut diag = m[[j, j]];
            for k in 0..j {
                diag -= lower[[j, k]] * lower[[j, k]];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::SingularMatrix);
            }
            let ljj = diag.sqrt();
            lower[[j, j]] = ljj;
            for i in (j + 1)..d {
                let mut s = m[[i, j]];
                for k in 0..j {
                    s -= lower[[i, k]] * lower[[j, k]];
                }
                lower[[i, j]] = s / ljj;
            }
        }
        Ok(Self { lower })
    }

    /// Rebuilds a factor previously obtained from [`RidgeCholesky::lower`].
    pub fn from_lower(lower: Array2<f64>) -> Result<Self> {
        let (r, c) = lower.dim();
        if r != c {
            return Err(Error::Shape(format!("Cholesky factor is {r}x{c}")));
        }
        if (0..r).any(|i| !(lower[[i, i]] > 0.0)) {
            return Err(Error::SingularMatrix);
        }
        Ok(Self { lower })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `vᵀ (A + ridge)⁻¹ v = ‖L⁻¹ v‖²` by forward substitution.
    pub fn mahalanobis(&self, v: &[f64]) -> f64 {
        let l = &self.lower;
        let d = self.dim();
        let mut y = vec![0.0; d];
        let mut total = 0.0;
        for i in 0..d {
            let row = l.row(i);
            let mut s = v[i];
            for k in 0..i {
                s -= row[k] * y[k];
            }
            y[i] = s / row[i];
            total += y[i] * y[i];
        }
        total
    }

    pub fn solve_vec(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let d = self.dim();
        let l = &self.lower;
        let mut y = b.to_owned();
        for i in 0..d {
            let mut s = y[i];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in (i + 1)..d {
                s -= l[[k, i]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        y
    }

    pub fn solve(&self, b: ArrayView2<f64>) -> Array2<f64> {
        let mut x = Array2::<f64>::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            x.column_mut(j).assign(&self.solve_vec(col));
        }
        x
    }

    pub fn inverse(&self) -> Array2<f64> {
        self.solve(Array2::eye(self.dim()).view())
    }
}

/// Solves `(A + ε·tr(A)/D·I) X = B` with `ε = 1e-6` through a Cholesky factor.
pub fn ridge_solve(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if b.nrows() != a.nrows() {
        return Err(Error::Shape(format!(
            "right-hand side has {} rows, matrix has {}",
            b.nrows(),
            a.nrows()
        )));
    }
    Ok(RidgeCholesky::new(a)?.solve(b))
}

/// Quadratic form `vᵀ P v` for a symmetric `P`.
#[cfg(test)]
pub(crate) fn quad_form(p: ArrayView2<f64>, v: &[f64]) -> f64 {
    let d = v.len();
    let mut total = 0.0;
    for i in 0..d {
        let row = p.row(i);
        let mut s = 0.0;
        for j in 0..d {
            s += row[j] * v[j];
        }
        total += v[i] * s;
    }
    total
}
