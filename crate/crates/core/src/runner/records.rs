use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;

/// Evaluation group of a test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Csid,
    NearOod,
    FarOod,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Csid, Group::NearOod, Group::FarOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Csid => "csid",
            Group::NearOod => "near_ood",
            Group::FarOod => "far_ood",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown group {s:?}")))
    }
}

/// Metrics of one method on one test split. Values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub benchmark: String,
    pub method: String,
    pub family: String,
    pub group: Group,
    pub dataset: String,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub fpr95: f64,
}

impl Record {
    pub fn from_metrics(benchmark: &str, method: &str, family: &str, group: Group, dataset: &str, m: &MetricRecord) -> Self {
        Self {
            benchmark: benchmark.into(),
            method: method.into(),
            family: family.into(),
            group,
            dataset: dataset.into(),
            auroc: m.auroc,
            aupr_in: m.aupr_in,
            aupr_out: m.aupr_out,
            fpr95: m.fpr95,
        }
    }
}

/// CSV row; metrics in percent.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    benchmark: String,
    method: String,
    family: String,
    group: Group,
    dataset: String,
    auroc: f64,
    aupr_in: f64,
    aupr_out: f64,
    fpr95: f64,
}

fn check_percent(v: f64, what: &str) -> Result<f64> {
    if !(0.0..=100.0).contains(&v) {
        return Err(Error::Schema(format!("{what} = {v} is outside [0, 100]")));
    }
    Ok(v / 100.0)
}

/// Parses a records CSV with metrics in percent.
pub fn read_records(reader: impl Read) -> Result<Vec<Record>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let r = row.map_err(|e| Error::Schema(format!("records row {}: {e}", i + 1)))?;
        out.push(Record {
            auroc: check_percent(r.auroc, "auroc")?,
            aupr_in: check_percent(r.aupr_in, "aupr_in")?,
            aupr_out: check_percent(r.aupr_out, "aupr_out")?,
            fpr95: check_percent(r.fpr95, "fpr95")?,
            benchmark: r.benchmark,
            method: r.method,
            family: r.family,
            group: r.group,
            dataset: r.dataset,
        });
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(f).map_err(|e| e.context(path.display().to_string()))
}

/// Writes records with metrics in percent, in the given order.
pub fn write_records(records: &[Record], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(Row {
            benchmark: r.benchmark.clone(),
            method: r.method.clone(),
            family: r.family.clone(),
            group: r.group,
            dataset: r.dataset.clone(),
            auroc: r.auroc * 100.0,
            aupr_in: r.aupr_in * 100.0,
            aupr_out: r.aupr_out * 100.0,
            fpr95: r.fpr95 * 100.0,
        })
        .map_err(|e| Error::Format(format!("records: {e}")))?;
    }
    w.flush().map_err(|e| Error::Format(format!("records: {e}")))?;
    Ok(())
}

pub fn records_csv(records: &[Record]) -> Result<String> {
    let mut buf = Vec::new();
    write_records(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
