use oodkit::bundle::SplitKind;
use oodkit::detectors::{fit, DetectorState, Method, SplitPlan};
use oodkit::refmodel::ModelAdapter;
use oodkit::runner::{synth_benchmark, SynthSpec};
use oodkit::tuner::{expand_grid, tune, GridFile, GridSpec, PointOutcome};

use crate::support::{ensure, fixture, OrMsg};

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn run() -> Result<String, String> {
    let spec = SynthSpec { n: 300, ..SynthSpec::default() };
    let bench = synth_benchmark(&spec).or_msg("synthetic benchmark")?;
    let bundle = &bench.bundle;
    let adapter: &dyn ModelAdapter = &bench.model;
    let plan = SplitPlan::from_bundle(bundle).or_msg("split plan")?;
    let ctx = plan.context(bundle, Some(adapter));
    let grids = GridFile::load(fixture("grids.json")).or_msg("grids")?;
    let m = bundle.manifest();
    let test_splits: Vec<&str> = [SplitKind::IdTest, SplitKind::Csid, SplitKind::NearOod, SplitKind::FarOod]
        .into_iter()
        .flat_map(|k| m.splits_of(k))
        .filter(|s| m.splits[*s].phase == oodkit::bundle::Phase::Test)
        .collect();

    let score_all = |st: &DetectorState, order: &[&str]| -> Result<Vec<(String, Vec<u64>)>, String> {
        let mut out = order
            .iter()
            .map(|s| Ok((s.to_string(), bits(&st.score_split(bundle, s, Some(adapter)).or_msg(s)?))))
            .collect::<Result<Vec<_>, String>>()?;
        out.sort();
        Ok(out)
    };

    let mut points = 0;
    for &method in Method::ALL {
        // The shipped subspace sizes exceed the 16-wide synthetic features.
        let grid = match method {
            Method::Residual | Method::Vim => {
                let spec: GridSpec = serde_json::from_str(r#"{"dim": [2, 4, 8, 12]}"#).or_msg("grid")?;
                expand_grid(method, &spec).or_msg("grid")?
            }
            _ => grids.grid(method).or_msg(method.tag())?,
        };
        let result = tune(&grid, &ctx).or_msg(method.tag())?;
        points += result.log.iter().filter(|p| matches!(p.outcome, PointOutcome::Evaluated { .. })).count();
        let refit = &result.refit_state;
        let before = refit.to_bytes().or_msg("state bytes")?;

        let from_refit = score_all(refit, &test_splits)?;
        let reversed: Vec<&str> = test_splits.iter().rev().copied().collect();
        let again = score_all(refit, &reversed)?;
        ensure(refit.to_bytes().or_msg("state bytes")? == before, || format!("{method}: scoring changed the state"))?;
        ensure(from_refit == again, || format!("{method}: scores depend on split order"))?;

        let winner = fit(method, &result.best_params, &ctx).or_msg(method.tag())?;
        ensure(winner.to_bytes().or_msg("state bytes")? == before, || {
            format!("{method}: refit state differs from a fit at {}", result.best_params.describe())
        })?;
        let from_winner = score_all(&winner, &test_splits)?;
        ensure(from_refit == from_winner, || format!("{method}: refit scores differ from the winning configuration"))?;
    }
    Ok(format!(
        "{} detectors, {points} evaluated grid points, {} test splits scored bitwise-equal",
        Method::ALL.len(),
        test_splits.len()
    ))
}
