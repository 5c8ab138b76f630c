use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use super::records::{Group, Record};
use crate::error::{Error, Result};
use crate::metrics::harmonic_aupr;

/// Output format of [`render_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            other => Err(Error::InvalidInput(format!("unknown report format {other:?} (csv, md)"))),
        }
    }
}

/// One method's row. Values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub family: String,
    /// Mean AUROC per benchmark and group, aligned with [`ReportTable::benchmarks`].
    pub groups: Vec<[Option<f64>; 3]>,
    /// Mean over benchmarks of the per-benchmark mean near-OOD AUROC.
    pub mean_near_auroc: Option<f64>,
    /// Harmonic mean of the cross-benchmark mean AUPR-IN and AUPR-OUT.
    pub near_aupr_h: Option<f64>,
    pub mean_near_fpr95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub benchmarks: Vec<String>,
    /// Sorted by mean near-OOD AUROC, descending; ties keep input order.
    pub rows: Vec<ReportRow>,
    /// Classifier F1 per benchmark, in percent; carried as labels only.
    pub classifier_f1: BTreeMap<String, f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

/// Aggregates records per method. Benchmarks and methods keep their first
/// appearance order before rows are ranked. Near-OOD averages are present
/// only when every benchmark has near-OOD records for the method.
pub fn aggregate(records: &[Record]) -> Result<ReportTable> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to aggregate".into()));
    }
    let benchmarks = first_seen(records.iter().map(|r| r.benchmark.as_str()));
    let methods = first_seen(records.iter().map(|r| r.method.as_str()));
    let mut rows = Vec::with_capacity(methods.len());
    for m in &methods {
        let mine: Vec<&Record> = records.iter().filter(|r| &r.method == m).collect();
        let family = mine[0].family.clone();
        if let Some(r) = mine.iter().find(|r| r.family != family) {
            return Err(Error::Schema(format!("{m} is listed under families {family} and {}", r.family)));
        }
        let mut groups = Vec::with_capacity(benchmarks.len());
        let mut near: Vec<Option<[f64; 4]>> = Vec::with_capacity(benchmarks.len());
        for b in &benchmarks {
            let pick = |g: Group| -> Vec<&Record> { mine.iter().copied().filter(|r| &r.benchmark == b && r.group == g).collect() };
            let mut cells = [None; 3];
            for (cell, g) in cells.iter_mut().zip(Group::ALL) {
                let rs = pick(g);
                if !rs.is_empty() {
                    *cell = Some(mean(&rs.iter().map(|r| r.auroc).collect::<Vec<_>>()));
                }
            }
            groups.push(cells);
            let rs = pick(Group::NearOod);
            near.push((!rs.is_empty()).then(|| {
                let col = |f: fn(&Record) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
                [col(|r| r.auroc), col(|r| r.aupr_in), col(|r| r.aupr_out), col(|r| r.fpr95)]
            }));
        }
        let (mean_near_auroc, near_aupr_h, mean_near_fpr95) = if near.iter().all(Option::is_some) {
            let near: Vec<[f64; 4]> = near.into_iter().flatten().collect();
            let across = |j: usize| mean(&near.iter().map(|v| v[j]).collect::<Vec<_>>());
            let (a_in, a_out) = (across(1), across(2));
            let h = if a_in > 0.0 && a_out > 0.0 { Some(harmonic_aupr(a_in, a_out)?) } else { Some(0.0) };
            (Some(across(0)), h, Some(across(3)))
        } else {
            (None, None, None)
        };
        rows.push(ReportRow {
            method: m.clone(),
            family,
            groups,
            mean_near_auroc,
            near_aupr_h,
            mean_near_fpr95,
        });
    }
    rows.sort_by(|a, b| match (a.mean_near_auroc, b.mean_near_auroc) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(ReportTable {
        benchmarks,
        rows,
        classifier_f1: BTreeMap::new(),
    })
}

/// Table-1 aggregation: like [`aggregate`], but every method must have
/// near-OOD records on every benchmark.
pub fn aggregate_table1(records: &[Record]) -> Result<ReportTable> {
    let table = aggregate(records)?;
    for row in &table.rows {
        if let Some(i) = row.groups.iter().position(|g| g[1].is_none()) {
            return Err(Error::Schema(format!(
                "{} has no near-OOD records for benchmark {}",
                row.method, table.benchmarks[i]
            )));
        }
    }
    Ok(table)
}

/// Rounds `x` to two decimals, ties to even, treating `x` as the decimal it
/// prints as at ten places.
pub fn format_2dp(x: f64) -> String {
    let units = (x.abs() * 1e10).round() as i128;
    let (mut q, r) = (units / 100_000_000, units % 100_000_000);
    if r > 50_000_000 || (r == 50_000_000 && q % 2 == 1) {
        q += 1;
    }
    let sign = if x < 0.0 && q != 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", q / 100, q % 100)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format_2dp(x * 100.0))
}

impl ReportTable {
    pub fn with_classifier_f1(mut self, f1: BTreeMap<String, f64>) -> Self {
        self.classifier_f1 = f1;
        self
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["method".to_string()];
        for b in &self.benchmarks {
            for g in Group::ALL {
                h.push(format!("{}_{g}", b.to_lowercase()));
            }
        }
        h.extend(["mean_near_ood_auroc", "near_ood_aupr_harmonic", "mean_near_ood_fpr95"].map(String::from));
        h
    }

    /// Formatted cells per row, in percent.
    pub fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut c = vec![r.method.clone()];
                for g in &r.groups {
                    c.extend(g.iter().map(|v| cell(*v)));
                }
                c.extend([r.mean_near_auroc, r.near_aupr_h, r.mean_near_fpr95].map(cell));
                c
            })
            .collect()
    }
}

/// Renders the aggregated table with two-decimal percentages.
pub fn render_report(table: &ReportTable, format: Format) -> String {
    let header = table.header();
    let rows = table.cells();
    let mut out = String::new();
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header).expect("in-memory write");
            for r in &rows {
                w.write_record(r).expect("in-memory write");
            }
            out = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
        }
        Format::Markdown => {
            if !table.classifier_f1.is_empty() {
                let f1: Vec<String> = table
                    .benchmarks
                    .iter()
                    .filter_map(|b| table.classifier_f1.get(b).map(|v| format!("{b} {}", format_2dp(*v))))
                    .collect();
                writeln!(out, "Classifier F1: {}\n", f1.join(", ")).unwrap();
            }
            writeln!(out, "| {} |", header.join(" | ")).unwrap();
            let align: Vec<&str> = header.iter().enumerate().map(|(i, _)| if i == 0 { ":---" } else { "---:" }).collect();
            writeln!(out, "| {} |", align.join(" | ")).unwrap();
            for r in &rows {
                writeln!(out, "| {} |", r.join(" | ")).unwrap();
            }
        }
    }
    out
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct F1Row {
    benchmark: String,
    classifier_f1: f64,
}

/// Reads `benchmark,classifier_f1` rows.
pub fn read_classifier_f1(reader: impl Read) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<F1Row>()
        .map(|r| {
            r.map(|r| (r.benchmark, r.classifier_f1))
                .map_err(|e| Error::Schema(format!("classifier F1 table: {e}")))
        })
        .collect()
}

/// A published table: method → column name → value in percent.
pub type ExpectedTable = Vec<(String, BTreeMap<String, f64>)>;

pub fn read_expected_table(reader: impl Read) -> Result<ExpectedTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("expected table: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    if header.first().map(String::as_str) != Some("method") {
        return Err(Error::Schema("expected table must start with a method column".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Schema(format!("expected table: {e}")))?;
        let mut cols = BTreeMap::new();
        for (h, v) in header.iter().zip(rec.iter()).skip(1) {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Schema(format!("expected table: {h} = {v:?} is not a number")))?;
            cols.insert(h.clone(), x);
        }
        out.push((rec[0].to_string(), cols));
    }
    Ok(out)
}

/// Comparison of one aggregated value with its published counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckedCell {
    pub method: String,
    pub column: String,
    pub expected: f64,
    pub computed: Option<f64>,
}

impl CheckedCell {
    pub fn deviation(&self) -> f64 {
        self.computed.map_or(f64::INFINITY, |c| (c - self.expected).abs())
    }
}

#[derive(Debug, Clone)]
pub struct FixtureCheck {
    pub tolerance: f64,
    pub cells: Vec<CheckedCell>,
}

impl FixtureCheck {
    pub fn failures(&self) -> Vec<&CheckedCell> {
        self.cells.iter().filter(|c| !(c.deviation() <= self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_deviation(&self) -> f64 {
        self.cells.iter().map(CheckedCell::deviation).fold(0.0, f64::max)
    }

    /// Restricts the check to the given columns.
    pub fn only(&self, columns: &[&str]) -> FixtureCheck {
        FixtureCheck {
            tolerance: self.tolerance,
            cells: self.cells.iter().filter(|c| columns.contains(&c.column.as_str())).cloned().collect(),
        }
    }
}

/// The three cross-benchmark columns of Table 1.
pub const SUMMARY_COLUMNS: [&str; 3] = ["mean_near_ood_auroc", "near_ood_aupr_harmonic", "mean_near_ood_fpr95"];

/// Compares the aggregate of `records` with every cell of `expected`
/// (percent, `tolerance` in percentage points). Methods or columns absent
/// from the aggregate are reported as missing.
pub fn check_table(records: &[Record], expected: &ExpectedTable, tolerance: f64) -> Result<FixtureCheck> {
    let table = aggregate_table1(records)?;
    let header = table.header();
    let mut cells = Vec::new();
    for (method, cols) in expected {
        let row = table.rows.iter().position(|r| &r.method == method);
        let values: Vec<Option<f64>> = match row {
            Some(i) => {
                let r = &table.rows[i];
                let mut v: Vec<Option<f64>> = r.groups.iter().flat_map(|g| g.iter().copied()).collect();
                v.extend([r.mean_near_auroc, r.near_aupr_h, r.mean_near_fpr95]);
                v
            }
            None => vec![None; header.len() - 1],
        };
        for (col, &exp) in cols {
            let computed = header
                .iter()
                .skip(1)
                .position(|h| h == col)
                .and_then(|j| values[j])
                .map(|x| x * 100.0);
            cells.push(CheckedCell {
                method: method.clone(),
                column: col.clone(),
                expected: exp,
                computed,
            });
        }
    }
    Ok(FixtureCheck { tolerance, cells })
}

pub fn check_fixture(supp: impl AsRef<Path>, table: impl AsRef<Path>, tolerance: f64) -> Result<FixtureCheck> {
    let records = super::records::load_records(supp)?;
    let path = table.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let expected = read_expected_table(f).map_err(|e| e.context(path.display().to_string()))?;
    check_table(&records, &expected, tolerance)
}
