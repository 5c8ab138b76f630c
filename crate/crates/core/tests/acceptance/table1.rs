use std::collections::BTreeSet;

use oodkit::runner::{aggregate_table1, check_fixture, load_records, SUMMARY_COLUMNS};

use crate::support::{ensure, fixture, OrMsg};

/// Published summary values quoted for two rows: mean near AUROC, harmonic
/// near AUPR, mean near FPR@95.
const QUOTED: [(&str, [f64; 3]); 2] = [("MDSEns", [96.14, 91.86, 11.97]), ("DICE", [44.54, 34.22, 92.83])];

pub fn run() -> Result<String, String> {
    let check = check_fixture(fixture("supp_tables.csv"), fixture("table1.csv"), 0.05)
        .or_msg("fixture check")?
        .only(&SUMMARY_COLUMNS);
    let methods: BTreeSet<&str> = check.cells.iter().map(|c| c.method.as_str()).collect();
    ensure(methods.len() == 24, || format!("expected 24 methods, found {}", methods.len()))?;
    ensure(check.cells.len() == 72, || format!("expected 72 summary cells, found {}", check.cells.len()))?;
    if let Some(f) = check.failures().first() {
        return Err(format!(
            "{} {}: expected {}, computed {:?} ({} cells off)",
            f.method,
            f.column,
            f.expected,
            f.computed,
            check.failures().len()
        ));
    }

    let table = aggregate_table1(&load_records(fixture("supp_tables.csv")).or_msg("records")?).or_msg("aggregate")?;
    for (method, want) in QUOTED {
        let row = table
            .rows
            .iter()
            .find(|r| r.method == method)
            .ok_or_else(|| format!("no {method} row"))?;
        let got = [row.mean_near_auroc, row.near_aupr_h, row.mean_near_fpr95];
        for (g, w) in got.iter().zip(want) {
            let g = g.ok_or_else(|| format!("{method}: missing summary value"))? * 100.0;
            ensure((g - w).abs() <= 0.05, || format!("{method}: computed {g:.4}, published {w}"))?;
        }
    }
    Ok(format!(
        "24 methods x 3 columns within 0.05 (max deviation {:.4})",
        check.max_deviation()
    ))
}
