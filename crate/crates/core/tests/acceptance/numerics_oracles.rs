use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use oodkit::detectors::{fit, DetectorParams, Evidence, FitContext, MemorySource, Method};
use oodkit::numerics::{top_singular, weibull_tail_fit};
use oodkit::refmodel::{MlpModel, ModelAdapter};
use oodkit::rng::SplitMix64;

use crate::support::{ensure, OrMsg};

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn source(z: &Array2<f64>, labels: Option<Vec<usize>>) -> Result<MemorySource, String> {
    let mut e = Evidence::new(z.clone(), Array2::zeros((z.nrows(), 3))).or_msg("evidence")?;
    if let Some(l) = labels {
        e = e.with_labels(l).or_msg("labels")?;
    }
    Ok(MemorySource::new(vec!["penultimate".into()], None).with_split("train", e))
}

fn queries(rng: &mut SplitMix64, n: usize, d: usize) -> Result<Evidence, String> {
    let q = Array2::from_shape_fn((n, d), |_| 3.0 * rng.standard_normal());
    Evidence::new(q, Array2::zeros((n, 3))).or_msg("queries")
}

/// `(1/n) Σ (x − c)(x − c)ᵀ` with each row centred by `centre(i)`.
fn scatter(z: &Array2<f64>, centre: impl Fn(usize) -> Vec<f64>) -> DMatrix<f64> {
    let (n, d) = z.dim();
    let mut s = DMatrix::zeros(d, d);
    for i in 0..n {
        let c = centre(i);
        let v = DMatrix::from_fn(d, 1, |j, _| z[[i, j]] - c[j]);
        s += &v * v.transpose();
    }
    s / n as f64
}

fn mds(rng: &mut SplitMix64) -> Result<f64, String> {
    let (n, d, k) = (300, 6, 3);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mix = Array2::from_shape_fn((d, d), |_| rng.standard_normal());
    let z = Array2::from_shape_fn((n, d), |_| rng.standard_normal()).dot(&mix)
        + Array2::from_shape_fn((n, d), |(i, j)| if j == labels[i] { 3.0 } else { 0.0 });
    let st = fit(Method::Mds, &DetectorParams::default(), &FitContext::new(&source(&z, Some(labels.clone()))?, "train"))
        .or_msg("mds fit")?;
    let means: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            (0..d).map(|j| rows.iter().map(|&i| z[[i, j]]).sum::<f64>() / rows.len() as f64).collect()
        })
        .collect();
    let mut cov = scatter(&z, |i| means[labels[i]].clone());
    let ridge = 1e-6 * cov.trace() / d as f64;
    cov += DMatrix::identity(d, d) * ridge;
    let inv = cov.try_inverse().ok_or("covariance not invertible")?;
    let q = queries(rng, 50, d)?;
    let got = st.score(&q, None).or_msg("mds score")?;
    let mut worst = 0.0f64;
    for (i, r) in q.z().rows().into_iter().enumerate() {
        let best = means
            .iter()
            .map(|m| {
                let v = DMatrix::from_fn(d, 1, |j, _| r[j] - m[j]);
                (v.transpose() * &inv * &v)[(0, 0)]
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((got[i] + best).abs());
    }
    Ok(worst)
}

fn residual(rng: &mut SplitMix64) -> Result<f64, String> {
    let (n, d, dim) = (400, 10, 4);
    let mix = Array2::from_shape_fn((d, d), |_| rng.standard_normal());
    let z = Array2::from_shape_fn((n, d), |_| rng.standard_normal()).dot(&mix);
    let params = DetectorParams { dim: Some(dim), ..Default::default() };
    let st = fit(Method::Residual, &params, &FitContext::new(&source(&z, None)?, "train")).or_msg("residual fit")?;
    let mean: Vec<f64> = (0..d).map(|j| z.column(j).sum() / n as f64).collect();
    let eig = SymmetricEigen::new(scatter(&z, |_| mean.clone()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let q = queries(rng, 50, d)?;
    let got = st.score(&q, None).or_msg("residual score")?;
    let mut worst = 0.0f64;
    for (i, r) in q.z().rows().into_iter().enumerate() {
        let energy: f64 = order[..dim]
            .iter()
            .map(|&k| (0..d).map(|j| eig.eigenvectors[(j, k)] * (r[j] - mean[j])).sum::<f64>().powi(2))
            .sum();
        worst = worst.max((got[i] + energy.sqrt()).abs());
    }
    Ok(worst)
}

fn singular(rng: &mut SplitMix64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for case in 0..20 {
        let (r, c) = (2 + rng.below(9) as usize, 2 + rng.below(9) as usize);
        let m = Array2::from_shape_fn((r, c), |_| rng.standard_normal());
        let got = top_singular(m.view(), 10_000, case).or_msg("top_singular")?;
        let svd = to_dmatrix(&m).svd(true, true);
        let top = (0..svd.singular_values.len())
            .max_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .expect("non-empty");
        let sigma = svd.singular_values[top];
        let u = svd.u.as_ref().expect("u").column(top);
        let v = svd.v_t.as_ref().expect("v").row(top);
        let align_u = (0..r).map(|i| u[i] * got.u[i]).sum::<f64>().abs();
        let align_v = (0..c).map(|j| v[j] * got.v[j]).sum::<f64>().abs();
        let err = ((got.sigma - sigma).abs() / sigma).max(1.0 - align_u).max(1.0 - align_v);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn log_softmax_at(logits: &[f64], c: usize, t: f64) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m / t + logits.iter().map(|l| ((l - m) / t).exp()).sum::<f64>().ln();
    logits[c] / t - lse
}

/// Whether every rectifier keeps its side within `h` of `x` along each axis.
fn away_from_kinks(model: &MlpModel, x: &[f64], h: f64) -> bool {
    let pattern = |x: &[f64]| -> Vec<bool> {
        let cap = model.capture(x).expect("capture");
        cap.features[1..].iter().flatten().map(|&a| a > 0.0).collect()
    };
    let base = pattern(x);
    (0..x.len()).all(|i| {
        [h, -h].iter().all(|&s| {
            let mut y = x.to_vec();
            y[i] += s;
            pattern(&y) == base
        })
    })
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn gradients(rng: &mut SplitMix64) -> Result<(f64, usize), String> {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut pairs = 0;
    let mut seed = 0;
    while pairs < 50 {
        seed += 1;
        let model = MlpModel::random(6, &[12, 8], 4, seed).or_msg("model")?;
        let x: Vec<f64> = (0..6).map(|_| rng.standard_normal()).collect();
        if !away_from_kinks(&model, &x, h) {
            continue;
        }
        pairs += 1;
        let class = rng.below(4) as usize;
        let t = 0.5 + 2.0 * rng.next_f64();
        let fd = |f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
            (0..x.len())
                .map(|i| {
                    let (mut a, mut b) = (x.clone(), x.clone());
                    a[i] += h;
                    b[i] -= h;
                    (f(&a) - f(&b)) / (2.0 * h)
                })
                .collect()
        };
        let grad = model.input_gradient(&x, class, t).or_msg("input_gradient")?;
        let want = fd(&|y| log_softmax_at(&model.forward(y).expect("forward"), class, t));
        worst = worst.max(rel_err(&grad, &want));

        let layer = if pairs % 2 == 0 { "hidden0" } else { "hidden1" };
        let idx = if layer == "hidden0" { 1 } else { 2 };
        let width = model.layer(layer).or_msg("layer")?.width;
        let g: Vec<f64> = (0..width).map(|_| rng.standard_normal()).collect();
        let vjp = model.feature_vjp(&x, layer, &g).or_msg("feature_vjp")?;
        let want = fd(&|y| {
            let cap = model.capture(y).expect("capture");
            cap.features[idx].iter().zip(&g).map(|(a, b)| a * b).sum()
        });
        // An all-inactive layer has a zero gradient on both sides.
        if want.iter().any(|v| *v != 0.0) {
            worst = worst.max(rel_err(&vjp, &want));
        } else {
            ensure(vjp.iter().all(|v| *v == 0.0), || "vjp nonzero where the layer is flat".into())?;
        }
    }
    Ok((worst, pairs))
}

fn weibull(rng: &mut SplitMix64) -> Result<(f64, f64), String> {
    let (shape, scale) = (2.0f64, 1.0f64);
    let x: Vec<f64> = (0..5000).map(|_| scale * (-(1.0 - rng.next_f64()).ln()).powf(1.0 / shape)).collect();
    let m = weibull_tail_fit(&x, x.len()).or_msg("weibull fit")?;
    Ok((m.shape, m.scale))
}

pub fn run() -> Result<String, String> {
    let mut rng = SplitMix64::new(99);
    let mds_gap = mds(&mut rng)?;
    ensure(mds_gap <= 1e-8, || format!("MDS vs explicit inverse: {mds_gap:e}"))?;
    let res_gap = residual(&mut rng)?;
    ensure(res_gap <= 1e-8, || format!("Residual vs dense eig: {res_gap:e}"))?;
    let svd_err = singular(&mut rng)?;
    ensure(svd_err <= 1e-6, || format!("top_singular vs dense SVD: relative {svd_err:e}"))?;
    let (grad_err, pairs) = gradients(&mut rng)?;
    ensure(grad_err <= 1e-4, || format!("gradients vs central differences: relative {grad_err:e}"))?;
    let (k, l) = weibull(&mut rng)?;
    ensure((k - 2.0).abs() <= 0.1 && (l - 1.0).abs() <= 0.1, || format!("Weibull fit: shape {k}, scale {l}"))?;
    Ok(format!(
        "MDS {mds_gap:.0e}, Residual {res_gap:.0e}, SVD rel {svd_err:.0e}, grad rel {grad_err:.0e} ({pairs} pairs), Weibull k={k:.3} l={l:.3}"
    ))
}
