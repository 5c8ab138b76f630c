use ndarray::{Array1, Array2, ArrayView2};

use super::feature::{kth_smallest, normalized_rows, resolve_dim, Subspace};
use super::params::{DetectorParams, Method};
use super::state::DetectorState;
use super::{per_sample, Evidence, FitContext, Needs};
use crate::bundle::ClassifierHead;
use crate::error::{Error, Result};
use crate::numerics::stats::{argmax, dot, euclidean, l2_normalize, lse, lse_at, percentile_sorted, softmax};
use crate::numerics::{column_mean, percentile, top_singular};
use crate::refmodel::{Capability, ModelAdapter};
use crate::rng::SplitMix64;

/// Power-iteration cap for RankFeat's top singular pair.
const RANKFEAT_ITERS: usize = 1000;

fn require_head(ctx: &FitContext<'_>) -> Result<ClassifierHead> {
    ctx.source
        .head()?
        .ok_or_else(|| Error::Capability("this detector needs a classifier head".into()))
}

fn store_head(st: &mut DetectorState, head: ClassifierHead) {
    st.put_mat("weight", head.weight);
    st.put_vec("bias", head.bias);
}

fn load_head(st: &DetectorState, ev: &Evidence) -> Result<ClassifierHead> {
    let head = ClassifierHead {
        weight: st.mat("weight")?.to_owned(),
        bias: st.vec("bias")?.to_owned(),
    };
    if head.dim() != ev.z().ncols() || head.num_classes() != ev.num_classes() {
        return Err(Error::Shape(format!(
            "head is {}x{}, evidence has {} classes and width {}",
            head.num_classes(),
            head.dim(),
            ev.num_classes(),
            ev.z().ncols()
        )));
    }
    Ok(head)
}

/// Rows of `z` chosen by a seeded subsample of size `ceil(α·n)`, at least 1.
fn subsample(z: ArrayView2<f64>, alpha: f64, seed: u64) -> Result<Vec<usize>> {
    let n = z.nrows();
    if n == 0 {
        return Err(Error::InsufficientData("the training split is empty".into()));
    }
    let m = ((alpha * n as f64).ceil() as usize).clamp(1, n);
    Ok(if m == n {
        (0..n).collect()
    } else {
        SplitMix64::new(seed).sample_indices(n, m)
    })
}

/// Number of weights DICE keeps per row at percentile `p`.
pub(crate) fn dice_keep(d: usize, p: f64) -> usize {
    ((d as f64 * (100.0 - p) / 100.0 - 1e-9).ceil() as usize).clamp(1, d)
}

/// Per-row mask of the `keep` largest contributions; ties go to the lower index.
pub(crate) fn dice_mask(contrib: ArrayView2<f64>, keep: usize) -> Array2<f64> {
    let mut mask = Array2::zeros(contrib.dim());
    for (i, row) in contrib.rows().into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &idx[..keep] {
            mask[[i, j]] = 1.0;
        }
    }
    mask
}

/// ASH-B: prune below the per-sample percentile, set survivors to `Σz / kept`.
pub(crate) fn ash_transform(z: &[f64], p: f64) -> Result<Vec<f64>> {
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = percentile_sorted(&sorted, p);
    let kept = z.iter().filter(|&&v| v >= t).count();
    if kept == 0 {
        return Err(Error::AllPruned);
    }
    let fill = z.iter().sum::<f64>() / kept as f64;
    Ok(z.iter().map(|&v| if v >= t { fill } else { 0.0 }).collect())
}

/// SCALE: `z · exp(Σz / Σ_{z ≥ t} z)`.
pub(crate) fn scale_transform(z: &[f64], p: f64) -> Result<Vec<f64>> {
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = percentile_sorted(&sorted, p);
    let s1: f64 = z.iter().sum();
    let s2: f64 = z.iter().filter(|&&v| v >= t).sum();
    if !(s2 > 0.0) {
        return Err(Error::DegenerateActivation(format!("sum above the percentile is {s2}")));
    }
    let factor = (s1 / s2).exp();
    Ok(z.iter().map(|v| v * factor).collect())
}

/// `(1/(K−1)) Σ_{k≠ŷ} |f_ŷ − f_k| / ‖w_ŷ − w_k‖`.
pub(crate) fn fdbd_raw(f: &[f64], norms: ArrayView2<f64>) -> f64 {
    let y = argmax(f);
    let k = f.len();
    let total: f64 = (0..k)
        .filter(|&c| c != y)
        .map(|c| (f[y] - f[c]).abs() / norms[[y, c]])
        .sum();
    total / (k - 1) as f64
}

pub(super) fn fit(method: Method, mut p: DetectorParams, ctx: &FitContext<'_>) -> Result<DetectorState> {
    if method == Method::RankFeat {
        let adapter = ctx
            .adapter
            .ok_or_else(|| Error::Capability("RankFeat needs a model adapter".into()))?;
        adapter.require(Capability::ForwardFrom)?;
        rankfeat_layers(adapter)?;
        return Ok(DetectorState::new(method, p));
    }
    let train = ctx.evidence(ctx.id_train, &Needs::default())?;
    let z = train.z();
    match method {
        Method::Vim => {
            let dim = resolve_dim(&mut p, z.ncols());
            let sub = Subspace::fit(z, dim)?;
            let mass: f64 = z.rows().into_iter().map(|r| sub.residual_norm(r)).sum();
            if !(mass > 0.0) {
                return Err(Error::DegenerateSubspace("training residual norms are all zero".into()));
            }
            let f = train.logits();
            let top: f64 = f.rows().into_iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum();
            let mut st = DetectorState::new(method, p);
            sub.store(&mut st);
            st.put_scalar("alpha", top / mass);
            Ok(st)
        }
        Method::React => {
            let head = require_head(ctx)?;
            let pct = DetectorParams::req_f64(p.percentile, "percentile")?;
            let entries: Vec<f64> = z.iter().copied().collect();
            let clip = percentile(&entries, pct)?;
            let mut st = DetectorState::new(method, p);
            store_head(&mut st, head);
            st.put_scalar("clip", clip);
            Ok(st)
        }
        Method::Ash | Method::Scale => {
            let head = require_head(ctx)?;
            let mut st = DetectorState::new(method, p);
            store_head(&mut st, head);
            Ok(st)
        }
        Method::Dice => {
            let head = require_head(ctx)?;
            let pct = DetectorParams::req_f64(p.percentile, "percentile")?;
            let mean = column_mean(z);
            let contrib = &head.weight * &mean;
            let mask = dice_mask(contrib.view(), dice_keep(head.dim(), pct));
            let mut st = DetectorState::new(method, p);
            store_head(&mut st, head);
            st.put_mat("mask", mask);
            Ok(st)
        }
        Method::NnGuide => {
            let k = DetectorParams::req_usize(p.k, "k")?;
            let alpha = DetectorParams::req_f64(p.alpha_frac, "alpha_frac")?;
            let rows = subsample(z, alpha, p.seed.unwrap_or(0))?;
            if k > rows.len() {
                return Err(Error::InvalidParam(format!("k = {k} exceeds the bank size {}", rows.len())));
            }
            let bank = normalized_rows(z.select(ndarray::Axis(0), &rows).view());
            let mut st = DetectorState::new(method, p);
            st.put_mat("bank", bank);
            Ok(st)
        }
        Method::Fdbd => {
            let head = require_head(ctx)?;
            let k = head.num_classes();
            let w = &head.weight;
            let mut norms = Array2::zeros((k, k));
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        let d = euclidean(&w.row(i).to_vec(), &w.row(j).to_vec());
                        if d == 0.0 {
                            return Err(Error::DegenerateHead(format!("classes {i} and {j} share weights")));
                        }
                        norms[[i, j]] = d;
                    }
                }
            }
            let mut st = DetectorState::new(method, p);
            st.put_vec("mean", column_mean(z));
            st.put_mat("norms", norms);
            Ok(st)
        }
        Method::Relation => {
            let alpha = DetectorParams::req_f64(p.alpha_frac, "alpha_frac")?;
            let rows = subsample(z, alpha, p.seed.unwrap_or(0))?;
            let feats = normalized_rows(z.select(ndarray::Axis(0), &rows).view());
            let f = train.logits();
            let probs = Array2::from_shape_fn((rows.len(), f.ncols()), |(i, c)| softmax(&f.row(rows[i]).to_vec())[c]);
            let mut st = DetectorState::new(method, p);
            st.put_mat("bank_features", feats);
            st.put_mat("bank_probs", probs);
            Ok(st)
        }
        other => unreachable!("{other} is not a hybrid method"),
    }
}

/// The last two layers with a matrix view, in forward order.
fn rankfeat_layers(adapter: &dyn ModelAdapter) -> Result<Vec<(String, usize, usize)>> {
    let with_view: Vec<(String, usize, usize)> = adapter
        .layers()
        .into_iter()
        .filter_map(|l| l.matrix_view.map(|(r, c)| (l.name, r, c)))
        .collect();
    if with_view.is_empty() {
        return Err(Error::Capability(format!(
            "{} declares no layer with a matrix view",
            adapter.name()
        )));
    }
    Ok(with_view[with_view.len().saturating_sub(2)..].to_vec())
}

fn rankfeat_score(st: &DetectorState, ev: &Evidence, adapter: Option<&dyn ModelAdapter>) -> Result<Vec<f64>> {
    let adapter = adapter.ok_or_else(|| Error::Capability("RankFeat needs a model adapter".into()))?;
    adapter.require(Capability::ForwardFrom)?;
    let layers = rankfeat_layers(adapter)?;
    let acc = st.params.acc.unwrap_or(false);
    let t = DetectorParams::req_f64(st.params.temperature, "temperature")?;
    let seed = st.params.seed.unwrap_or(0);
    let used: Vec<&(String, usize, usize)> = if acc { layers.iter().collect() } else { vec![layers.last().expect("non-empty")] };
    let all_recorded = used.iter().all(|(name, _, _)| ev.has_layer(name));
    let (input, index) = if all_recorded {
        (None, Vec::new())
    } else {
        adapter.require(Capability::Features)?;
        let x = ev
            .input()
            .ok_or_else(|| Error::Capability("RankFeat needs recorded layer features or inputs".into()))?;
        let names: Vec<String> = adapter.layers().into_iter().map(|l| l.name).collect();
        let index = used
            .iter()
            .map(|(n, _, _)| names.iter().position(|m| m == n).expect("declared layer"))
            .collect();
        (Some(x), index)
    };
    per_sample(ev.len(), |i| {
        let captured = match input {
            Some(x) => Some(adapter.capture(&x.row(i).to_vec())?),
            None => None,
        };
        let mut sum: Option<Vec<f64>> = None;
        for (j, (name, r, c)) in used.iter().enumerate() {
            let feat: Vec<f64> = match &captured {
                Some(cap) => cap.features[index[j]].clone(),
                None => ev.layer(name)?.row(i).to_vec(),
            };
            if feat.len() != r * c {
                return Err(Error::Shape(format!("layer {name} has width {}, view is {r}x{c}", feat.len())));
            }
            let m = Array2::from_shape_vec((*r, *c), feat).expect("checked length");
            let top = top_singular(m.view(), RANKFEAT_ITERS, seed)?;
            let mut reduced = m;
            for a in 0..*r {
                for b in 0..*c {
                    reduced[[a, b]] -= top.sigma * top.u[a] * top.v[b];
                }
            }
            let logits = adapter.forward_from(name, reduced.as_slice().expect("standard layout"))?;
            sum = Some(match sum {
                None => logits,
                Some(s) => s.iter().zip(&logits).map(|(a, b)| a + b).collect(),
            });
        }
        let n_used = used.len() as f64;
        let f: Vec<f64> = sum.expect("at least one layer").iter().map(|v| v / n_used).collect();
        Ok(lse_at(&f, t))
    })
}

pub(super) fn score(st: &DetectorState, ev: &Evidence, adapter: Option<&dyn ModelAdapter>) -> Result<Vec<f64>> {
    let z = ev.z();
    let f = ev.logits();
    let n = ev.len();
    let zrow = |i: usize| z.row(i).to_vec();
    let frow = |i: usize| f.row(i).to_vec();
    let ebo_of = |head: &ClassifierHead, v: Vec<f64>| lse(head.logits(Array1::from(v).view()).as_slice().expect("contiguous"));
    match st.method {
        Method::Vim => {
            let sub = Subspace::from_state(st)?;
            sub.check_dim(z.ncols())?;
            let alpha = st.scalar("alpha")?;
            per_sample(n, |i| {
                let fi = frow(i);
                let mut ext = fi.clone();
                ext.push(alpha * sub.residual_norm(z.row(i)));
                Ok(lse(&fi) - lse(&ext))
            })
        }
        Method::React => {
            let head = load_head(st, ev)?;
            let clip = st.scalar("clip")?;
            per_sample(n, |i| Ok(ebo_of(&head, zrow(i).into_iter().map(|v| v.min(clip)).collect())))
        }
        Method::Ash => {
            let head = load_head(st, ev)?;
            let pct = DetectorParams::req_f64(st.params.percentile, "percentile")?;
            per_sample(n, |i| Ok(ebo_of(&head, ash_transform(&zrow(i), pct)?)))
        }
        Method::Scale => {
            let head = load_head(st, ev)?;
            let pct = DetectorParams::req_f64(st.params.percentile, "percentile")?;
            per_sample(n, |i| Ok(ebo_of(&head, scale_transform(&zrow(i), pct)?)))
        }
        Method::Dice => {
            let head = load_head(st, ev)?;
            let mask = st.mat("mask")?;
            if mask.dim() != head.weight.dim() {
                return Err(Error::Shape("DICE mask does not match the head".into()));
            }
            let masked = ClassifierHead {
                weight: &head.weight * &mask,
                bias: head.bias.clone(),
            };
            per_sample(n, |i| Ok(ebo_of(&masked, zrow(i))))
        }
        Method::NnGuide => {
            let bank = st.mat("bank")?;
            if bank.ncols() != z.ncols() {
                return Err(Error::Shape("NNGuide bank width does not match the features".into()));
            }
            let k = DetectorParams::req_usize(st.params.k, "k")?;
            if k > bank.nrows() {
                return Err(Error::InvalidParam(format!("k = {k} exceeds the bank size {}", bank.nrows())));
            }
            per_sample(n, |i| {
                let q = l2_normalize(&zrow(i));
                let neg: Vec<f64> = bank
                    .rows()
                    .into_iter()
                    .map(|b| -dot(&q, b.as_slice().expect("contiguous")))
                    .collect();
                let cut = kth_smallest(neg.clone(), k);
                // Mean of the k largest similarities; ties at the cut are counted once each up to k.
                let mut top: Vec<f64> = neg.iter().filter(|&&v| v < cut).map(|v| -v).collect();
                top.resize(k, -cut);
                let g = top.iter().sum::<f64>() / k as f64;
                Ok(g * lse(&frow(i)))
            })
        }
        Method::RankFeat => rankfeat_score(st, ev, adapter),
        Method::Fdbd => {
            let norms = st.mat("norms")?;
            let mean = st.vec("mean")?;
            if norms.nrows() != ev.num_classes() || mean.len() != z.ncols() {
                return Err(Error::Shape("fDBD state does not match the evidence".into()));
            }
            let normalized = st.params.normalized.unwrap_or(true);
            per_sample(n, |i| {
                let raw = fdbd_raw(&frow(i), norms);
                if !normalized {
                    return Ok(raw);
                }
                let d = euclidean(&zrow(i), mean.as_slice().expect("contiguous"));
                if d == 0.0 {
                    return Err(Error::InvalidInput(format!("sample {i} equals the training mean")));
                }
                Ok(raw / d)
            })
        }
        Method::Relation => {
            let feats = st.mat("bank_features")?;
            let probs = st.mat("bank_probs")?;
            if feats.ncols() != z.ncols() || probs.ncols() != ev.num_classes() {
                return Err(Error::Shape("Relation bank does not match the evidence".into()));
            }
            if feats.nrows() == 0 {
                return Err(Error::InsufficientData("Relation bank is empty".into()));
            }
            let pow = DetectorParams::req_f64(st.params.pow, "pow")?;
            per_sample(n, |i| {
                let q = l2_normalize(&zrow(i));
                let p = softmax(&frow(i));
                Ok(feats
                    .rows()
                    .into_iter()
                    .zip(probs.rows())
                    .map(|(b, pb)| {
                        let cos = dot(&q, b.as_slice().expect("contiguous")).max(0.0);
                        if cos == 0.0 {
                            0.0
                        } else {
                            cos.powf(pow) * dot(&p, pb.as_slice().expect("contiguous"))
                        }
                    })
                    .sum())
            })
        }
        other => unreachable!("{other} is not a hybrid method"),
    }
}
