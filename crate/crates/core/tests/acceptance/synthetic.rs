use std::collections::BTreeMap;

use oodkit::detectors::{DetectorParams, Family, Method};
use oodkit::runner::{run_on, synth_benchmark, Group, MethodConfig, Record, SynthSpec};

use crate::support::{ensure, OrMsg};

fn family_mean(records: &[Record], family: Family, group: Group) -> f64 {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.family == family.as_str() && r.group == group)
        .map(|r| r.auroc)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn auroc_of(records: &[Record], method: Method, group: Group) -> Result<f64, String> {
    records
        .iter()
        .find(|r| r.method == method.display_name() && r.group == group)
        .map(|r| r.auroc)
        .ok_or_else(|| format!("no {method} record for {group}"))
}

pub fn run() -> Result<String, String> {
    // The covariate-shift split is drawn from the ID law itself.
    let spec = SynthSpec { covariate: 0.0, ..SynthSpec::default() };
    ensure(spec.n == 2000 && spec.dim == 16 && spec.classes == 3, || "unexpected synthetic size".into())?;
    let bench = synth_benchmark(&spec).or_msg("synthetic benchmark")?;
    let methods: Vec<MethodConfig> = Method::ALL
        .iter()
        .filter(|m| m.family() != Family::Hybrid)
        .map(|&m| MethodConfig::fixed(m, DetectorParams::default()))
        .collect();
    let out = run_on(&bench.bundle, None, &methods, &BTreeMap::new(), spec.seed).or_msg("run")?;
    let r = &out.records;

    let far_mds = auroc_of(r, Method::Mds, Group::FarOod)?;
    let far_knn = auroc_of(r, Method::Knn, Group::FarOod)?;
    ensure(far_mds >= 0.99 && far_knn >= 0.99, || format!("far AUROC MDS {far_mds:.4}, KNN {far_knn:.4}"))?;

    let csid: Vec<(&str, f64)> = r.iter().filter(|x| x.group == Group::Csid).map(|x| (x.method.as_str(), x.auroc)).collect();
    let csid_mds = auroc_of(r, Method::Mds, Group::Csid)?;
    if let Some((m, a)) = csid.iter().find(|(_, a)| !(0.45..=0.55).contains(a)) {
        return Err(format!("zero-shift csID AUROC of {m} is {a:.4}"));
    }

    let feature = family_mean(r, Family::Feature, Group::NearOod);
    let classification = family_mean(r, Family::Classification, Group::NearOod);
    ensure(feature > classification, || {
        format!("near-OOD family means: feature {feature:.4} <= classification {classification:.4}")
    })?;
    Ok(format!(
        "far MDS {far_mds:.4} KNN {far_knn:.4}; zero-shift csID in [0.45,0.55] for {} methods (MDS {csid_mds:.4}); near family means feature {feature:.4} > classification {classification:.4}",
        csid.len()
    ))
}
