//! Hyperparameter grid search on pooled OOD validation splits.
//!
//! Every grid point is fitted from scratch on `id_train` and scored on
//! `id_val` against the concatenation of the OOD validation splits. The point
//! with the highest AUROC wins (earliest on ties) and is then refitted from
//! scratch; sweep states are never returned.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use crate::detectors::{fit, DetectorParams, DetectorState, FitContext, Method};
use crate::error::{Error, Result};
use crate::metrics::{auroc, aupr, harmonic_aupr, Positive, ScoreSet};

/// Per-field value lists in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridSpec(pub Vec<(String, Vec<Value>)>);

impl<'de> Deserialize<'de> for GridSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = GridSpec;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping field names to value lists")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<GridSpec, A::Error> {
                let mut out: Vec<(String, Vec<Value>)> = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<Value>>()? {
                    if out.iter().any(|(seen, _)| *seen == k) {
                        return Err(de::Error::custom(format!("duplicate field {k:?}")));
                    }
                    out.push((k, v));
                }
                Ok(GridSpec(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// A grid file: method tag to [`GridSpec`], in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridFile(pub Vec<(Method, GridSpec)>);

impl<'de> Deserialize<'de> for GridFile {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = GridFile;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping method tags to grids")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<GridFile, A::Error> {
                let mut out: Vec<(Method, GridSpec)> = Vec::new();
                while let Some(tag) = map.next_key::<String>()? {
                    let method: Method = tag.parse().map_err(de::Error::custom)?;
                    if out.iter().any(|(m, _)| *m == method) {
                        return Err(de::Error::custom(format!("duplicate method {tag:?}")));
                    }
                    out.push((method, map.next_value()?));
                }
                Ok(GridFile(out))
            }
        }
        d.deserialize_map(V)
    }
}

impl GridFile {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::InvalidParam(format!("grid file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn spec(&self, method: Method) -> Option<&GridSpec> {
        self.0.iter().find(|(m, _)| *m == method).map(|(_, g)| g)
    }

    /// The expanded grid of `method`; a method without an entry gets a single
    /// default point.
    pub fn grid(&self, method: Method) -> Result<HyperGrid> {
        match self.spec(method) {
            Some(spec) => expand_grid(method, spec),
            None => Ok(HyperGrid {
                method,
                points: vec![DetectorParams::default()],
            }),
        }
    }
}

/// Ordered parameter points for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrid {
    pub method: Method,
    pub points: Vec<DetectorParams>,
}

/// Cartesian product of the value lists, first field varying slowest.
pub fn expand_grid(method: Method, spec: &GridSpec) -> Result<HyperGrid> {
    for (field, values) in &spec.0 {
        if values.is_empty() {
            return Err(Error::InvalidParam(format!("{method}: value list for {field} is empty")));
        }
    }
    let total: usize = spec.0.iter().map(|(_, v)| v.len()).product();
    let mut points = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rest = idx;
        let mut obj = serde_json::Map::new();
        for (field, values) in spec.0.iter().rev() {
            obj.insert(field.clone(), values[rest % values.len()].clone());
            rest /= values.len();
        }
        let p = DetectorParams::from_value(Value::Object(obj)).map_err(|e| e.context(format!("{method} grid")))?;
        p.check_method(method)?;
        points.push(p);
    }
    Ok(HyperGrid { method, points })
}

/// Outcome of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub enum PointOutcome {
    Evaluated { auroc: f64, aupr_h: f64 },
    /// The point is invalid for this data (for example `k` above the bank size).
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunePoint {
    pub params: DetectorParams,
    pub outcome: PointOutcome,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub method: Method,
    pub best_params: DetectorParams,
    pub best_val_auroc: f64,
    pub log: Vec<TunePoint>,
    /// Fitted from scratch at `best_params` after the sweep.
    pub refit_state: DetectorState,
}

fn evaluate_point(method: Method, params: &DetectorParams, ctx: &FitContext<'_>) -> Result<PointOutcome> {
    let state = match fit(method, params, ctx) {
        Ok(s) => s,
        Err(e) if matches!(e.root(), Error::InvalidParam(_)) => return Ok(PointOutcome::Skipped(e.to_string())),
        Err(e) => return Err(e),
    };
    let (id, ood) = ctx.validation(&state.needs())?;
    let id_scores = state.score(&id, ctx.adapter)?;
    let ood_scores = state.score(&ood, ctx.adapter)?;
    let s = ScoreSet::new(&id_scores, &ood_scores)?;
    let a_in = aupr(s, Positive::Id)?;
    let a_out = aupr(s, Positive::Ood)?;
    Ok(PointOutcome::Evaluated {
        auroc: auroc(s)?,
        aupr_h: harmonic_aupr(a_in, a_out).unwrap_or(0.0),
    })
}

/// Grid search for `grid.method` using the validation splits of `ctx`.
pub fn tune(grid: &HyperGrid, ctx: &FitContext<'_>) -> Result<TuneResult> {
    let method = grid.method;
    if grid.points.is_empty() {
        return Err(Error::InvalidParam(format!("{method}: the grid is empty")));
    }
    ctx.id_val()?;
    if ctx.ood_val.is_empty() {
        return Err(Error::InsufficientData(format!("{method}: no OOD validation split to tune on")));
    }
    let outcomes: Vec<Result<PointOutcome>> = grid
        .points
        .par_iter()
        .map(|p| evaluate_point(method, p, ctx).map_err(|e| e.context(format!("{method} at {}", p.describe()))))
        .collect();
    let mut log = Vec::with_capacity(outcomes.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, (params, outcome)) in grid.points.iter().zip(outcomes).enumerate() {
        let outcome = outcome?;
        if let PointOutcome::Evaluated { auroc, .. } = outcome {
            if best.is_none_or(|(_, b)| auroc > b) {
                best = Some((i, auroc));
            }
        }
        log.push(TunePoint {
            params: params.clone(),
            outcome,
        });
    }
    let (bi, best_val_auroc) = best.ok_or_else(|| {
        Error::InvalidParam(format!("{method}: no grid point is valid for this data"))
    })?;
    let best_params = grid.points[bi].clone();
    let refit_state = fit(method, &best_params, ctx)?;
    Ok(TuneResult {
        method,
        best_params,
        best_val_auroc,
        log,
        refit_state,
    })
}

/// Grid sizes per method, for logging.
pub fn grid_sizes(file: &GridFile) -> Result<BTreeMap<String, usize>> {
    file.0
        .iter()
        .map(|(m, spec)| Ok((m.tag().to_string(), expand_grid(*m, spec)?.points.len())))
        .collect()
}
