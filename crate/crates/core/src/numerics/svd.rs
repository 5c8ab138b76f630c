use ndarray::{Array1, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct SingularTriple {
    pub sigma: f64,
    /// Left singular vector, length `r`.
    pub u: Array1<f64>,
    /// Right singular vector, length `c`.
    pub v: Array1<f64>,
}

/// Largest singular value and its vectors by power iteration on `MᵀM`.
///
/// The start vector is drawn from `seed`. Iteration stops once the right
/// vector moves less than `1e-14` between steps or after `iters` steps. The
/// sign is fixed so that the largest-magnitude component of `v` is positive.
pub fn top_singular(m: ArrayView2<f64>, iters: usize, seed: u64) -> Result<SingularTriple> {
    let (r, c) = m.dim();
    if r == 0 || c == 0 {
        return Err(Error::Shape("top_singular needs a non-empty matrix".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    if m.iter().all(|&x| x == 0.0) {
        return Ok(SingularTriple {
            sigma: 0.0,
            u: unit(r),
            v: unit(c),
        });
    }

    let mut rng = SplitMix64::new(seed);
    let mut v: Array1<f64> = (0..c).map(|_| rng.standard_normal()).collect();
    normalize(&mut v);
    for _ in 0..iters.max(1) {
        let mv = m.dot(&v);
        let mut next = m.t().dot(&mv);
        if normalize(&mut next) == 0.0 {
            // Start vector orthogonal to the row space; restart along a basis vector.
            next = unit(c);
        }
        let delta = (&next - &v).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        v = next;
        if delta < 1e-14 {
            break;
        }
    }

    let lead = (1..c).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
    if v[lead] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    let mut u = m.dot(&v);
    let sigma = normalize(&mut u);
    if sigma == 0.0 {
        u = unit(r);
    }
    Ok(SingularTriple { sigma, u, v })
}

fn unit(n: usize) -> Array1<f64> {
    let mut e = Array1::zeros(n);
    e[0] = 1.0;
    e
}

fn normalize(x: &mut Array1<f64>) -> f64 {
    let n = x.dot(x).sqrt();
    if n > 0.0 {
        *x /= n;
    }
    n
}
