//! Post-hoc OOD detectors.
//!
//! Each detector has a fit phase that reads designated splits and produces an
//! immutable [`DetectorState`], and a score phase mapping one sample's
//! evidence to a confidence. Every confidence follows one convention: higher
//! means more in-distribution.

mod classification;
mod evidence;
mod feature;
mod hybrid;
mod params;
mod state;

use rayon::prelude::*;

pub use classification::{ebo, gen, kl_floored, learn_temperature, mls, msp, nll_at, score_logits};
pub use evidence::{Evidence, EvidenceSource, MemorySource, Needs};
pub use params::{DetectorParams, Family, Method, Metric};
pub use state::{DetectorState, STATE_FILE};

use crate::bundle::{FeatureBundle, SplitKind};
use crate::error::{Error, Result};
use crate::refmodel::ModelAdapter;

/// Which splits a fit reads, and the model access available to it.
#[derive(Clone, Copy)]
pub struct FitContext<'a> {
    pub source: &'a dyn EvidenceSource,
    pub id_train: &'a str,
    pub id_val: Option<&'a str>,
    pub ood_val: &'a [String],
    pub adapter: Option<&'a dyn ModelAdapter>,
}

impl<'a> FitContext<'a> {
    pub fn new(source: &'a dyn EvidenceSource, id_train: &'a str) -> Self {
        Self {
            source,
            id_train,
            id_val: None,
            ood_val: &[],
            adapter: None,
        }
    }

    pub fn with_validation(mut self, id_val: &'a str, ood_val: &'a [String]) -> Self {
        self.id_val = Some(id_val);
        self.ood_val = ood_val;
        self
    }

    pub fn with_adapter(mut self, adapter: Option<&'a dyn ModelAdapter>) -> Self {
        self.adapter = adapter;
        self
    }

    pub(crate) fn evidence(&self, split: &str, needs: &Needs) -> Result<Evidence> {
        self.source
            .evidence(split, needs)
            .map_err(|e| e.context(format!("split {split}")))
    }

    pub(crate) fn id_val(&self) -> Result<&'a str> {
        self.id_val
            .ok_or_else(|| Error::InsufficientData("this detector needs an id_val split".into()))
    }

    /// ID validation evidence and the pooled OOD validation evidence.
    pub(crate) fn validation(&self, needs: &Needs) -> Result<(Evidence, Evidence)> {
        let id = self.evidence(self.id_val()?, needs)?;
        if self.ood_val.is_empty() {
            return Err(Error::InsufficientData("no OOD validation split given".into()));
        }
        let parts = self
            .ood_val
            .iter()
            .map(|s| self.evidence(s, needs))
            .collect::<Result<Vec<_>>>()?;
        Ok((id, Evidence::concat(&parts)?))
    }
}

/// Default split roles of a bundle: the first `id_train` and `id_val` splits
/// and every near-OOD validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub id_train: String,
    pub id_val: Option<String>,
    pub ood_val: Vec<String>,
}

impl SplitPlan {
    pub fn from_bundle(bundle: &FeatureBundle) -> Result<Self> {
        let m = bundle.manifest();
        let id_train = m
            .splits_of(SplitKind::IdTrain)
            .first()
            .map(|s| s.to_string())
            .ok_or_else(|| Error::InsufficientData("bundle has no id_train split".into()))?;
        let id_val = m.splits_of(SplitKind::IdVal).first().map(|s| s.to_string());
        let ood_val = m
            .splits
            .iter()
            .filter(|(_, e)| e.kind == SplitKind::NearOod && e.phase == crate::bundle::Phase::Val)
            .map(|(id, _)| id.clone())
            .collect();
        Ok(Self {
            id_train,
            id_val,
            ood_val,
        })
    }

    pub fn context<'a>(&'a self, source: &'a dyn EvidenceSource, adapter: Option<&'a dyn ModelAdapter>) -> FitContext<'a> {
        FitContext {
            source,
            id_train: &self.id_train,
            id_val: self.id_val.as_deref(),
            ood_val: &self.ood_val,
            adapter,
        }
    }
}

/// Fits `method` with `params`, filling unset parameters with the method defaults.
pub fn fit(method: Method, params: &DetectorParams, ctx: &FitContext<'_>) -> Result<DetectorState> {
    let p = params.with_defaults(method)?;
    let state = match method.family() {
        Family::Classification => classification::fit(method, p, ctx),
        Family::Feature => feature::fit(method, p, ctx),
        Family::Hybrid => hybrid::fit(method, p, ctx),
    };
    state.map_err(|e| e.context(format!("fitting {method}")))
}

impl DetectorState {
    /// What evidence scoring reads beyond penultimate features and logits.
    pub fn needs(&self) -> Needs {
        match self.method {
            Method::Odin | Method::Dropout => Needs::auxiliary(),
            Method::MdsEns => {
                let mut n = Needs::layers(self.layers.clone());
                if self.params.noise.unwrap_or(0.0) > 0.0 {
                    n.auxiliary = true;
                }
                n
            }
            Method::RankFeat => Needs::all_layers(),
            _ => Needs::default(),
        }
    }

    /// Confidences for every sample of `ev`, in row order.
    ///
    /// Reads `self` only; samples are scored independently and in parallel.
    pub fn score(&self, ev: &Evidence, adapter: Option<&dyn ModelAdapter>) -> Result<Vec<f64>> {
        let scores = match self.method.family() {
            Family::Classification => classification::score(self, ev, adapter),
            Family::Feature => feature::score(self, ev, adapter),
            Family::Hybrid => hybrid::score(self, ev, adapter),
        }?;
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{} produced a non-finite confidence for sample {i}",
                self.method
            )));
        }
        Ok(scores)
    }

    /// Loads the split's evidence from `source` and scores it.
    pub fn score_split(
        &self,
        source: &dyn EvidenceSource,
        split: &str,
        adapter: Option<&dyn ModelAdapter>,
    ) -> Result<Vec<f64>> {
        source
            .evidence(split, &self.needs())
            .and_then(|ev| self.score(&ev, adapter))
            .map_err(|e| e.context(format!("({}, {split})", self.method)))
    }
}

/// Maps `f` over sample indices in parallel, keeping row order.
pub(crate) fn per_sample<F>(n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<f64> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Sign with `sign(0) = 0`.
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean row per class; errors when a class has fewer than `min` rows.
pub(crate) fn class_means(
    x: ndarray::ArrayView2<f64>,
    labels: &[usize],
    k: usize,
    min: usize,
    what: &str,
) -> Result<ndarray::Array2<f64>> {
    let d = x.ncols();
    let mut sums = ndarray::Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &c) in x.rows().into_iter().zip(labels) {
        if c >= k {
            return Err(Error::InvalidInput(format!("label {c} out of range for {k} classes")));
        }
        counts[c] += 1;
        let mut s = sums.row_mut(c);
        s += &row;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n < min {
            return Err(Error::InsufficientData(format!(
                "class {c} has {n} {what} sample(s), at least {min} required"
            )));
        }
        let mut s = sums.row_mut(c);
        s /= n as f64;
    }
    Ok(sums)
}

pub(crate) fn require_labels<'e>(ev: &'e Evidence, split: &str) -> Result<&'e [usize]> {
    ev.labels()
        .ok_or_else(|| Error::InsufficientData(format!("split {split} has no labels")))
}
