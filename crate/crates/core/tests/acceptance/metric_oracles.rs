use oodkit::metrics::{aupr, auroc, fpr_at_95_tpr, Positive, ScoreSet};
use oodkit::rng::SplitMix64;

use crate::support::{ensure, OrMsg};

/// Scores on a coarse lattice so that ties within and across sides are common.
fn random_set(rng: &mut SplitMix64) -> (Vec<f64>, Vec<f64>) {
    let n_id = 1 + rng.below(100) as usize;
    let n_ood = 1 + rng.below(100) as usize;
    let levels = 2 + rng.below(40);
    let shift = rng.below(5) as f64 - 2.0;
    let id = (0..n_id).map(|_| (rng.below(levels) as f64 + shift) / 4.0).collect();
    let ood = (0..n_ood).map(|_| rng.below(levels) as f64 / 4.0).collect();
    (id, ood)
}

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut u = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                u += 1.0;
            } else if a == b {
                u += 0.5;
            }
        }
    }
    u / (id.len() as f64 * ood.len() as f64)
}

/// Average precision from every observed threshold, highest first.
fn sweep_aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = pos.iter().filter(|&&x| x >= t).count() as f64;
        let fp = neg.iter().filter(|&&x| x >= t).count() as f64;
        let recall = tp / pos.len() as f64;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

fn enumerated_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for &t in id.iter().chain(ood) {
        let kept = id.iter().filter(|&&x| x >= t).count();
        if kept * 100 >= 95 * id.len() && t > best {
            best = t;
        }
    }
    ood.iter().filter(|&&x| x >= best).count() as f64 / ood.len() as f64
}

pub fn run() -> Result<String, String> {
    let mut rng = SplitMix64::new(2024);
    let mut worst_ap = 0.0f64;
    for case in 0..200 {
        let (id, ood) = random_set(&mut rng);
        let s = ScoreSet::new(&id, &ood).or_msg("score set")?;
        let got = auroc(s).or_msg("auroc")?;
        let want = pairwise_auroc(&id, &ood);
        ensure(got == want, || format!("case {case}: auroc {got} != pairwise {want}"))?;

        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        for (positive, want) in [
            (Positive::Id, sweep_aupr(&id, &ood)),
            (Positive::Ood, sweep_aupr(&neg(&ood), &neg(&id))),
        ] {
            let got = aupr(s, positive).or_msg("aupr")?;
            worst_ap = worst_ap.max((got - want).abs());
            ensure((got - want).abs() <= 1e-12, || format!("case {case}: aupr {positive:?} {got} vs {want}"))?;
        }

        if case < 100 {
            let got = fpr_at_95_tpr(s).or_msg("fpr95")?;
            let want = enumerated_fpr95(&id, &ood);
            ensure(got == want, || format!("case {case}: fpr95 {got} != enumerated {want}"))?;
        }
    }
    Ok(format!("200 AUROC/AUPR sets, 100 FPR@95 sets; max AUPR deviation {worst_ap:.1e}"))
}
