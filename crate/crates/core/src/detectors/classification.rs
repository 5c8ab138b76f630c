use ndarray::{Array2, ArrayView2};

use super::params::{DetectorParams, Method};
use super::state::DetectorState;
use super::{class_means, per_sample, require_labels, sign, Evidence, FitContext, Needs};
use crate::error::{Error, Result};
use crate::numerics::stats::{argmax, euclidean, lse, lse_at, softmax, softmax_at};
use crate::numerics::{weibull_tail_fit, WeibullModel};
use crate::refmodel::{Capability, ModelAdapter};

const T_MIN: f64 = 0.01;
const T_MAX: f64 = 100.0;
/// Width of the final log-temperature bracket.
const T_TOL: f64 = 1e-9;
const KL_FLOOR: f64 = 1e-12;

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Maximum softmax probability.
pub fn msp(f: &[f64]) -> f64 {
    max_of(&softmax(f))
}

/// Maximum logit.
pub fn mls(f: &[f64]) -> f64 {
    max_of(f)
}

/// Negative energy `T · ln Σ exp(f_i / T)`.
pub fn ebo(f: &[f64], temperature: f64) -> f64 {
    lse_at(f, temperature)
}

/// Generalized entropy over the `top_m` largest probabilities, negated.
pub fn gen(f: &[f64], gamma: f64, top_m: usize) -> Result<f64> {
    if top_m > f.len() {
        return Err(Error::InvalidParam(format!(
            "GEN top count {top_m} exceeds the {} classes",
            f.len()
        )));
    }
    let mut p = softmax(f);
    p.sort_by(|a, b| b.total_cmp(a));
    Ok(-p[..top_m]
        .iter()
        .map(|&q| q.powf(gamma) * (1.0 - q).powf(gamma))
        .sum::<f64>())
}

/// Logit-only confidence for MSP, MLS, EBO and GEN.
pub fn score_logits(method: Method, params: &DetectorParams, f: &[f64]) -> Result<f64> {
    if f.len() < 2 {
        return Err(Error::InvalidInput("at least 2 logits are required".into()));
    }
    if let Some(bad) = f.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
    }
    let p = params.with_defaults(method)?;
    match method {
        Method::Msp => Ok(msp(f)),
        Method::Mls => Ok(mls(f)),
        Method::Ebo => Ok(ebo(f, p.temperature.unwrap_or(1.0))),
        Method::Gen => gen(f, p.gamma.unwrap_or(0.1), p.top_m.unwrap_or(f.len())),
        other => Err(Error::InvalidParam(format!("{other} is not a logit-only rule"))),
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits / T)`.
pub fn nll_at(logits: ArrayView2<f64>, labels: &[usize], temperature: f64) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
            lse(&scaled) - scaled[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Temperature in `[0.01, 100]` minimising the validation NLL, by
/// golden-section search over `ln T`. The bracket ends are compared at the
/// finish so minima on the boundary are returned exactly.
pub fn learn_temperature(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InsufficientData("temperature scaling needs a non-empty id_val split".into()));
    }
    if labels.len() != logits.nrows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), logits.nrows())));
    }
    let nll = |u: f64| nll_at(logits, labels, u.exp());
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (T_MIN.ln(), T_MAX.ln());
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (nll(c), nll(d));
    while b - a > T_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = nll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = nll(d);
        }
    }
    let mid = ((a + b) / 2.0).exp();
    let candidates = [T_MIN, mid, T_MAX];
    let mut best = candidates[0];
    let mut best_nll = nll_at(logits, labels, best);
    for &t in &candidates[1..] {
        let v = nll_at(logits, labels, t);
        if v < best_nll {
            best = t;
            best_nll = v;
        }
    }
    Ok(best)
}

/// `Σ p_i (ln p_i − ln q_i)` with both logarithms floored at `1e-12`.
pub fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.max(KL_FLOOR).ln() - qi.max(KL_FLOOR).ln()))
        .sum()
}

fn train_with_labels(ctx: &FitContext<'_>) -> Result<(Evidence, Vec<usize>)> {
    let ev = ctx.evidence(ctx.id_train, &Needs::default())?;
    let labels = require_labels(&ev, ctx.id_train)?.to_vec();
    Ok((ev, labels))
}

/// Class-wise mean softmax of the training logits.
fn klm_templates(logits: ArrayView2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    let k = logits.ncols();
    let probs = Array2::from_shape_vec(
        logits.dim(),
        logits.rows().into_iter().flat_map(|r| softmax(&r.to_vec())).collect(),
    )
    .expect("same shape");
    class_means(probs.view(), labels, k, 1, "training")
}

/// Mean logit vectors and tail Weibull models from correctly classified samples.
fn openmax_fit(logits: ArrayView2<f64>, labels: &[usize], tail: usize) -> Result<(Array2<f64>, Vec<WeibullModel>)> {
    let k = logits.ncols();
    let correct: Vec<usize> = (0..labels.len())
        .filter(|&i| argmax(&logits.row(i).to_vec()) == labels[i])
        .collect();
    let rows = logits.select(ndarray::Axis(0), &correct);
    let lab: Vec<usize> = correct.iter().map(|&i| labels[i]).collect();
    let means = class_means(rows.view(), &lab, k, tail, "correctly classified training")?;
    let mut models = Vec::with_capacity(k);
    for c in 0..k {
        let dists: Vec<f64> = rows
            .rows()
            .into_iter()
            .zip(&lab)
            .filter(|(_, &l)| l == c)
            .map(|(r, _)| euclidean(&r.to_vec(), &means.row(c).to_vec()))
            .collect();
        models.push(weibull_tail_fit(&dists, tail).map_err(|e| e.context(format!("class {c}")))?);
    }
    Ok((means, models))
}

/// OpenMax confidence `−p₀` given class means and Weibull models.
fn openmax_score(v: &[f64], means: ArrayView2<f64>, models: &[WeibullModel]) -> f64 {
    let mut extended = Vec::with_capacity(v.len() + 1);
    extended.push(0.0);
    let mut unknown = 0.0;
    for (i, &vi) in v.iter().enumerate() {
        let w = models[i].cdf(euclidean(v, &means.row(i).to_vec()));
        extended.push(vi * (1.0 - w));
        unknown += vi * w;
    }
    extended[0] = unknown;
    -(unknown - lse(&extended)).exp()
}

pub(super) fn fit(method: Method, mut p: DetectorParams, ctx: &FitContext<'_>) -> Result<DetectorState> {
    match method {
        Method::Gen => {
            let k = ctx.evidence(ctx.id_train, &Needs::default())?.num_classes();
            let m = *p.top_m.get_or_insert(k);
            if m > k {
                return Err(Error::InvalidParam(format!("GEN top count {m} exceeds the {k} classes")));
            }
            Ok(DetectorState::new(method, p))
        }
        Method::TempScale => {
            let t = match p.temperature {
                Some(t) => t,
                None => {
                    let split = ctx.id_val()?;
                    let ev = ctx.evidence(split, &Needs::default())?;
                    learn_temperature(ev.logits(), require_labels(&ev, split)?)?
                }
            };
            let mut st = DetectorState::new(method, p);
            st.put_scalar("temperature", t);
            Ok(st)
        }
        Method::Klm => {
            let (ev, labels) = train_with_labels(ctx)?;
            let mut st = DetectorState::new(method, p);
            st.put_mat("templates", klm_templates(ev.logits(), &labels)?);
            Ok(st)
        }
        Method::OpenMax => {
            let (ev, labels) = train_with_labels(ctx)?;
            let tail = DetectorParams::req_usize(p.tail, "tail")?;
            let (means, models) = openmax_fit(ev.logits(), &labels, tail)?;
            let weibull = Array2::from_shape_fn((models.len(), 2), |(c, j)| {
                if j == 0 {
                    models[c].shape
                } else {
                    models[c].scale
                }
            });
            let mut st = DetectorState::new(method, p);
            st.put_mat("means", means);
            st.put_mat("weibull", weibull);
            Ok(st)
        }
        Method::Msp | Method::Mls | Method::Ebo | Method::Odin | Method::Dropout => Ok(DetectorState::new(method, p)),
        other => unreachable!("{other} is not a classification method"),
    }
}

fn rows(a: ArrayView2<f64>, i: usize) -> Vec<f64> {
    a.row(i).to_vec()
}

fn odin_score(st: &DetectorState, ev: &Evidence, adapter: Option<&dyn ModelAdapter>) -> Result<Vec<f64>> {
    let t = DetectorParams::req_f64(st.params.temperature, "temperature")?;
    let eps = DetectorParams::req_f64(st.params.epsilon, "epsilon")?;
    let live = adapter.filter(|a| a.has(Capability::Forward) && (eps == 0.0 || a.has(Capability::InputGrad)));
    if let (Some(model), Some(x)) = (live, ev.input()) {
        return per_sample(ev.len(), |i| {
            let xi: Vec<f64> = x.row(i).to_vec();
            let mut f = model.forward(&xi)?;
            if eps > 0.0 {
                let g = model.input_gradient(&xi, argmax(&f), t)?;
                let shifted: Vec<f64> = xi.iter().zip(&g).map(|(x, g)| x + eps * sign(*g)).collect();
                f = model.forward(&shifted)?;
            }
            Ok(max_of(&softmax_at(&f, t)))
        });
    }
    match ev.perturbed() {
        Some((pl, rec)) if rec.temperature == t && rec.epsilon == eps => {
            per_sample(ev.len(), |i| Ok(max_of(&softmax_at(&rows(pl.view(), i), t))))
        }
        Some((_, rec)) => Err(Error::Capability(format!(
            "perturbed logits were recorded with T={}, eps={} but T={t}, eps={eps} was requested",
            rec.temperature, rec.epsilon
        ))),
        None => Err(Error::Capability(
            "ODIN needs an adapter with input gradients and recorded inputs, or recorded perturbed logits".into(),
        )),
    }
}

fn dropout_score(st: &DetectorState, ev: &Evidence, adapter: Option<&dyn ModelAdapter>) -> Result<Vec<f64>> {
    let p = DetectorParams::req_f64(st.params.dropout_p, "dropout_p")?;
    let times = DetectorParams::req_usize(st.params.times, "times")?;
    let seed = st.params.seed.unwrap_or(0);
    let mean = |passes: &mut dyn Iterator<Item = Vec<f64>>| {
        let mut acc = vec![0.0; ev.num_classes()];
        for pass in passes {
            for (a, v) in acc.iter_mut().zip(pass) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / times as f64).collect::<Vec<f64>>()
    };
    if let (Some(model), Some(x)) = (adapter.filter(|a| a.has(Capability::Dropout)), ev.input()) {
        return per_sample(ev.len(), |i| {
            let passes = model.dropout_logits(&x.row(i).to_vec(), p, times, seed)?;
            Ok(msp(&mean(&mut passes.into_iter())))
        });
    }
    match ev.dropout() {
        Some((d, rec)) if rec.p == p && rec.times == times && rec.seed == seed => per_sample(ev.len(), |i| {
            let mut it = (0..times).map(|t| d.slice(ndarray::s![t, i, ..]).to_vec());
            Ok(msp(&mean(&mut it)))
        }),
        Some((_, rec)) => Err(Error::Capability(format!(
            "dropout passes were recorded with p={}, times={}, seed={} but p={p}, times={times}, seed={seed} was requested",
            rec.p, rec.times, rec.seed
        ))),
        None => Err(Error::Capability(
            "Dropout needs an adapter with dropout passes and recorded inputs, or recorded dropout logits".into(),
        )),
    }
}

pub(super) fn score(st: &DetectorState, ev: &Evidence, adapter: Option<&dyn ModelAdapter>) -> Result<Vec<f64>> {
    let f = ev.logits();
    let n = ev.len();
    match st.method {
        Method::Msp => per_sample(n, |i| Ok(msp(&rows(f, i)))),
        Method::Mls => per_sample(n, |i| Ok(mls(&rows(f, i)))),
        Method::Ebo => {
            let t = DetectorParams::req_f64(st.params.temperature, "temperature")?;
            per_sample(n, |i| Ok(ebo(&rows(f, i), t)))
        }
        Method::Gen => {
            let g = DetectorParams::req_f64(st.params.gamma, "gamma")?;
            let m = DetectorParams::req_usize(st.params.top_m, "top_m")?;
            per_sample(n, |i| gen(&rows(f, i), g, m))
        }
        Method::TempScale => {
            let t = st.scalar("temperature")?;
            per_sample(n, |i| Ok(max_of(&softmax_at(&rows(f, i), t))))
        }
        Method::Klm => {
            let templates = st.mat("templates")?;
            check_classes(templates.nrows(), ev)?;
            per_sample(n, |i| {
                let p = softmax(&rows(f, i));
                let best = templates
                    .rows()
                    .into_iter()
                    .map(|q| kl_floored(&p, q.as_slice().expect("standard layout")))
                    .fold(f64::INFINITY, f64::min);
                Ok(-best)
            })
        }
        Method::OpenMax => {
            let means = st.mat("means")?;
            let w = st.mat("weibull")?;
            check_classes(means.nrows(), ev)?;
            let tail = DetectorParams::req_usize(st.params.tail, "tail")?;
            let models: Vec<WeibullModel> = w
                .rows()
                .into_iter()
                .map(|r| WeibullModel {
                    shape: r[0],
                    scale: r[1],
                    tail_size: tail,
                })
                .collect();
            per_sample(n, |i| Ok(openmax_score(&rows(f, i), means, &models)))
        }
        Method::Odin => odin_score(st, ev, adapter),
        Method::Dropout => dropout_score(st, ev, adapter),
        other => unreachable!("{other} is not a classification method"),
    }
}

fn check_classes(k: usize, ev: &Evidence) -> Result<()> {
    if ev.num_classes() != k {
        return Err(Error::Shape(format!(
            "state was fitted for {k} classes, evidence has {}",
            ev.num_classes()
        )));
    }
    Ok(())
}
