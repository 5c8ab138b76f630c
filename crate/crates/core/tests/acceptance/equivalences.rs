use ndarray::Array2;
use oodkit::detectors::{fit, DetectorParams, FitContext, MemorySource, Method};
use oodkit::refmodel::{MlpModel, ModelAdapter};
use oodkit::rng::SplitMix64;

use crate::support::{ensure, OrMsg};

const N: usize = 100;
const TOL: f64 = 1e-10;

fn inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = SplitMix64::new(seed);
    Array2::from_shape_fn((n, d), |_| 1.5 * rng.standard_normal())
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn run() -> Result<String, String> {
    let model = MlpModel::random(8, &[24, 16], 5, 31).or_msg("model")?;
    let adapter: &dyn ModelAdapter = &model;
    let src = MemorySource::from_adapter(
        adapter,
        Some(model.classifier_head()),
        vec![("train".into(), inputs(N, 8, 1), None), ("eval".into(), inputs(N, 8, 2), None)],
    )
    .or_msg("capture")?;
    let ctx = FitContext::new(&src, "train").with_adapter(Some(adapter));
    let p = |f: fn(&mut DetectorParams)| {
        let mut q = DetectorParams::default();
        f(&mut q);
        q
    };
    let scores = |m: Method, params: DetectorParams, split: &str| -> Result<Vec<f64>, String> {
        let st = fit(m, &params, &ctx).or_msg(m.tag())?;
        st.score_split(&src, split, Some(adapter)).or_msg(m.tag())
    };

    let msp = scores(Method::Msp, DetectorParams::default(), "eval")?;
    let ebo = scores(Method::Ebo, DetectorParams::default(), "eval")?;
    let mut report = Vec::new();

    let cases: [(&str, Method, DetectorParams, &Vec<f64>); 3] = [
        ("tempscale(T=1)=MSP", Method::TempScale, p(|q| q.temperature = Some(1.0)), &msp),
        ("dice(p=0)=EBO", Method::Dice, p(|q| q.percentile = Some(0.0)), &ebo),
        ("odin(eps=0,T=1)=MSP", Method::Odin, p(|q| {
            q.temperature = Some(1.0);
            q.epsilon = Some(0.0);
        }), &msp),
    ];
    for (label, m, params, want) in cases {
        let got = scores(m, params, "eval")?;
        let gap = max_gap(&got, want);
        ensure(got.len() == N && gap <= TOL, || format!("{label}: max gap {gap:e}"))?;
        report.push(format!("{label} {gap:.0e}"));
    }

    // A clip at or above every activation leaves the energy unchanged: the
    // 100th percentile of the fit split covers that split, and an unbounded
    // clip covers any split.
    let react = fit(Method::React, &p(|q| q.percentile = Some(100.0)), &ctx).or_msg("react")?;
    let on_train = react.score_split(&src, "train", None).or_msg("react")?;
    let ebo_train = scores(Method::Ebo, DetectorParams::default(), "train")?;
    let gap_fit = max_gap(&on_train, &ebo_train);
    let mut unbounded = react.clone();
    unbounded.scalars.insert("clip".into(), f64::MAX);
    let gap_eval = max_gap(&unbounded.score_split(&src, "eval", None).or_msg("react")?, &ebo);
    ensure(gap_fit <= TOL && gap_eval <= TOL, || format!("react(c>=max)=EBO: gaps {gap_fit:e}, {gap_eval:e}"))?;
    report.push(format!("react(c>=max)=EBO {:.0e}", gap_fit.max(gap_eval)));

    Ok(format!("{N} samples each: {}", report.join(", ")))
}
