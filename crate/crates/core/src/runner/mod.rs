//! Benchmark orchestration: tuning and evaluating methods on a bundle,
//! Table-1 style aggregation, report rendering and synthetic benchmarks.

mod records;
mod report;
mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

pub use records::{load_records, read_records, records_csv, write_atomic, write_records, Group, Record};
pub use report::{
    aggregate, aggregate_table1, check_fixture, check_table, format_2dp, read_classifier_f1, read_expected_table,
    render_report, CheckedCell, ExpectedTable, FixtureCheck, Format, ReportRow, ReportTable, SUMMARY_COLUMNS,
};
pub use synth::{synth_benchmark, SynthBenchmark, SynthSpec, MODEL_DIR};

use crate::bundle::{read_bundle, FeatureBundle, Phase, SplitKind};
use crate::detectors::{fit, DetectorParams, DetectorState, Method, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::refmodel::{Capability, MlpModel, ModelAdapter};
use crate::tuner::{expand_grid, tune, GridSpec, TuneResult};

/// How one method is configured: fixed parameters or a grid to tune over.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    #[serde(default)]
    pub params: Option<DetectorParams>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

impl MethodConfig {
    pub fn fixed(method: Method, params: DetectorParams) -> Self {
        Self {
            method,
            params: Some(params),
            grid: None,
        }
    }

    pub fn tuned(method: Method, grid: GridSpec) -> Self {
        Self {
            method,
            params: None,
            grid: Some(grid),
        }
    }

    fn check(&self) -> Result<()> {
        if self.params.is_some() && self.grid.is_some() {
            return Err(Error::InvalidParam(format!("{}: give params or grid, not both", self.method)));
        }
        if let Some(p) = &self.params {
            p.check_method(self.method)?;
        }
        Ok(())
    }
}

/// A benchmark run, usually read from strict JSON.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub bundle: PathBuf,
    /// Saved reference network, for detectors that need model access.
    #[serde(default)]
    pub model: Option<PathBuf>,
    pub methods: Vec<MethodConfig>,
    /// Test splits to evaluate and their groups; defaults to every csID split
    /// and every near/far-OOD test split of the bundle.
    #[serde(default)]
    pub groups: BTreeMap<String, Group>,
    /// Seed for detectors with a stochastic fit when none is given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl BenchmarkConfig {
    /// Parses a config; relative paths resolve against `base`.
    pub fn from_json(bytes: &[u8], base: &Path) -> Result<Self> {
        let mut c: Self = serde_json::from_slice(bytes).map_err(|e| Error::InvalidParam(format!("benchmark config: {e}")))?;
        for m in &c.methods {
            m.check()?;
        }
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut c.bundle);
        if let Some(m) = c.model.as_mut() {
            fix(m);
        }
        if let Some(o) = c.out.as_mut() {
            fix(o);
        }
        Ok(c)
    }
}

/// Everything a run produces.
#[derive(Debug)]
pub struct BenchmarkOutput {
    /// Method order of the config, then test-split order.
    pub records: Vec<Record>,
    pub table: ReportTable,
    pub states: Vec<DetectorState>,
    /// One entry per tuned method.
    pub tuning: Vec<TuneResult>,
}

/// Test splits and their groups: the explicit map, or every csID split and
/// every near/far-OOD test split. Ordered by group, then split id.
pub fn test_splits(bundle: &FeatureBundle, groups: &BTreeMap<String, Group>) -> Result<Vec<(String, Group)>> {
    let m = bundle.manifest();
    let mut out: Vec<(String, Group)> = if groups.is_empty() {
        m.splits
            .iter()
            .filter_map(|(id, e)| match (e.kind, e.phase) {
                (SplitKind::Csid, _) => Some((id.clone(), Group::Csid)),
                (SplitKind::NearOod, Phase::Test) => Some((id.clone(), Group::NearOod)),
                (SplitKind::FarOod, Phase::Test) => Some((id.clone(), Group::FarOod)),
                _ => None,
            })
            .collect()
    } else {
        for id in groups.keys() {
            m.split(id).map_err(|e| Error::Schema(format!("group map: {e}")))?;
        }
        groups.iter().map(|(k, g)| (k.clone(), *g)).collect()
    };
    out.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
    if out.is_empty() {
        return Err(Error::Schema("no test OOD or csID split to evaluate".into()));
    }
    Ok(out)
}

fn id_test_split(bundle: &FeatureBundle) -> Result<String> {
    bundle
        .manifest()
        .splits_of(SplitKind::IdTest)
        .first()
        .map(|s| s.to_string())
        .ok_or_else(|| Error::InsufficientData("bundle has no id_test split".into()))
}

/// Seed given to methods that leave theirs unset. Dropout evaluated from
/// recorded passes takes the recording's seed, since no other seed can match.
fn seed_for(method: Method, bundle: &FeatureBundle, adapter: Option<&dyn ModelAdapter>, seed: u64) -> u64 {
    if method != Method::Dropout || adapter.is_some_and(|a| a.has(Capability::Dropout)) {
        return seed;
    }
    let recorded = bundle.manifest().recording.as_ref().and_then(|r| r.dropout.as_ref());
    recorded.map_or(seed, |d| d.seed)
}

fn with_seed(method: Method, mut p: DetectorParams, seed: u64) -> DetectorParams {
    if method.fields().contains(&"seed") && p.seed.is_none() {
        p.seed = Some(seed);
    }
    p
}

/// Scores every test split with `state` and returns one record per split.
pub fn evaluate_state(
    bundle: &FeatureBundle,
    state: &DetectorState,
    adapter: Option<&dyn ModelAdapter>,
    splits: &[(String, Group)],
) -> Result<Vec<Record>> {
    let id_split = id_test_split(bundle)?;
    let id = state.score_split(bundle, &id_split, adapter)?;
    let bench = &bundle.manifest().benchmark_name;
    let method = state.method;
    splits
        .iter()
        .map(|(split, group)| {
            let ood = state.score_split(bundle, split, adapter)?;
            let m = evaluate(&id, &ood).map_err(|e| e.context(format!("({method}, {split})")))?;
            Ok(Record::from_metrics(bench, method.display_name(), method.family().as_str(), *group, split, &m))
        })
        .collect()
}

/// Fits (or tunes) every configured method on `bundle` and evaluates it on
/// the test splits. Methods run in parallel; output order follows the config.
pub fn run_on(
    bundle: &FeatureBundle,
    adapter: Option<&dyn ModelAdapter>,
    methods: &[MethodConfig],
    groups: &BTreeMap<String, Group>,
    seed: u64,
) -> Result<BenchmarkOutput> {
    if methods.is_empty() {
        return Err(Error::InvalidParam("no method configured".into()));
    }
    let plan = SplitPlan::from_bundle(bundle)?;
    let splits = test_splits(bundle, groups)?;
    let ctx = plan.context(bundle, adapter);
    let per_method: Vec<Result<(DetectorState, Option<TuneResult>, Vec<Record>)>> = methods
        .par_iter()
        .map(|mc| {
            mc.check()?;
            let method = mc.method;
            let seed = seed_for(method, bundle, adapter, seed);
            let (state, tuned) = match &mc.grid {
                Some(spec) => {
                    let mut grid = expand_grid(method, spec)?;
                    grid.points = grid.points.into_iter().map(|p| with_seed(method, p, seed)).collect();
                    let r = tune(&grid, &ctx)?;
                    (r.refit_state.clone(), Some(r))
                }
                None => {
                    let p = with_seed(method, mc.params.clone().unwrap_or_default(), seed);
                    (fit(method, &p, &ctx)?, None)
                }
            };
            let records = evaluate_state(bundle, &state, adapter, &splits)?;
            Ok((state, tuned, records))
        })
        .collect();
    let mut out = BenchmarkOutput {
        records: Vec::new(),
        table: ReportTable {
            benchmarks: Vec::new(),
            rows: Vec::new(),
            classifier_f1: BTreeMap::new(),
        },
        states: Vec::new(),
        tuning: Vec::new(),
    };
    for r in per_method {
        let (state, tuned, records) = r?;
        out.states.push(state);
        out.tuning.extend(tuned);
        out.records.extend(records);
    }
    out.table = aggregate(&out.records)?;
    Ok(out)
}

/// Loads the bundle (and network, if configured), runs every method and,
/// when `cfg.out` is set, writes `records.csv`, `table.md`, `table.csv` and
/// one state directory per method under `states/`.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkOutput> {
    let bundle = read_bundle(&cfg.bundle)?;
    let model = cfg.model.as_ref().map(MlpModel::load).transpose()?;
    let adapter = model.as_ref().map(|m| m as &dyn ModelAdapter);
    let out = run_on(&bundle, adapter, &cfg.methods, &cfg.groups, cfg.seed)?;
    if let Some(dir) = &cfg.out {
        write_atomic(dir.join("records.csv"), records_csv(&out.records)?.as_bytes())?;
        write_atomic(dir.join("table.md"), render_report(&out.table, Format::Markdown).as_bytes())?;
        write_atomic(dir.join("table.csv"), render_report(&out.table, Format::Csv).as_bytes())?;
        for st in &out.states {
            st.save(dir.join("states").join(st.method.tag()))?;
        }
    }
    Ok(out)
}
