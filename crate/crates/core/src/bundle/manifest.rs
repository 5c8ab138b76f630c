use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Component, Path};
use std::str::FromStr;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    IdTrain,
    IdVal,
    IdTest,
    Csid,
    NearOod,
    FarOod,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::IdTrain => "id_train",
            SplitKind::IdVal => "id_val",
            SplitKind::IdTest => "id_test",
            SplitKind::Csid => "csid",
            SplitKind::NearOod => "near_ood",
            SplitKind::FarOod => "far_ood",
        }
    }

    /// Splits drawn from the training distribution; these must carry labels.
    pub fn is_id(self) -> bool {
        matches!(self, SplitKind::IdTrain | SplitKind::IdVal | SplitKind::IdTest)
    }

    /// Groups scored against the ID test split.
    pub fn is_shifted(self) -> bool {
        !self.is_id()
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TensorRole {
    Features(String),
    Logits,
    Labels,
    DropoutLogits,
    PerturbedLogits,
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorRole::Features(layer) => write!(f, "features:{layer}"),
            TensorRole::Logits => f.write_str("logits"),
            TensorRole::Labels => f.write_str("labels"),
            TensorRole::DropoutLogits => f.write_str("dropout_logits"),
            TensorRole::PerturbedLogits => f.write_str("perturbed_logits"),
        }
    }
}

impl FromStr for TensorRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(TensorRole::Logits),
            "labels" => Ok(TensorRole::Labels),
            "dropout_logits" => Ok(TensorRole::DropoutLogits),
            "perturbed_logits" => Ok(TensorRole::PerturbedLogits),
            _ => match s.strip_prefix("features:") {
                Some(layer) if !layer.is_empty() => Ok(TensorRole::Features(layer.to_string())),
                _ => Err(Error::Schema(format!("unknown tensor role {s:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub kind: SplitKind,
    pub phase: Phase,
    pub sample_count: usize,
    /// Tensor role → file path relative to the bundle directory.
    #[serde(deserialize_with = "unique_map")]
    pub tensors: BTreeMap<String, String>,
}

impl SplitEntry {
    pub fn path_of(&self, role: &TensorRole) -> Option<&str> {
        self.tensors.get(&role.to_string()).map(String::as_str)
    }

    pub fn has(&self, role: &TensorRole) -> bool {
        self.path_of(role).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadRef {
    /// `K × D` f32 tensor.
    pub weight: String,
    /// Length-`K` f32 tensor.
    pub bias: String,
}

/// Parameters under which the auxiliary logit passes were recorded.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recording {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<DropoutRecording>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationRecording>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutRecording {
    pub p: f64,
    pub times: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationRecording {
    pub temperature: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub benchmark_name: String,
    pub num_classes: usize,
    /// Ordered capture points; the last entry is the penultimate layer.
    pub layer_names: Vec<String>,
    #[serde(deserialize_with = "unique_map")]
    pub splits: BTreeMap<String, SplitEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording: Option<Recording>,
}

impl Manifest {
    pub fn penultimate(&self) -> &str {
        self.layer_names.last().map(String::as_str).unwrap_or("")
    }

    /// Split ids of one kind, in sorted order.
    pub fn splits_of(&self, kind: SplitKind) -> Vec<&str> {
        self.splits
            .iter()
            .filter(|(_, e)| e.kind == kind)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn split(&self, id: &str) -> Result<&SplitEntry> {
        self.splits
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("bundle has no split {id:?}")))
    }

    /// Every relative tensor path the manifest declares.
    pub fn declared_paths(&self) -> BTreeSet<&str> {
        let mut out: BTreeSet<&str> = self
            .splits
            .values()
            .flat_map(|e| e.tensors.values().map(String::as_str))
            .collect();
        if let Some(h) = &self.head {
            out.insert(&h.weight);
            out.insert(&h.bias);
        }
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: Manifest =
            serde_json::from_slice(bytes).map_err(|e| Error::Schema(format!("manifest.json: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// Canonical JSON: sorted keys, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        canonical_json(&value)
    }

    /// Structural invariants that need no tensor data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Schema(msg));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("format_version {} is not {FORMAT_VERSION}", self.format_version));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.layer_names.is_empty() {
            return bad("layer_names is empty".into());
        }
        let mut seen = BTreeSet::new();
        for name in &self.layer_names {
            if name.is_empty() {
                return bad("empty layer name".into());
            }
            if !seen.insert(name.as_str()) {
                return bad(format!("duplicate layer name {name:?}"));
            }
        }
        let penultimate = TensorRole::Features(self.penultimate().to_string());
        let mut paths = BTreeSet::new();
        for (id, entry) in &self.splits {
            if id.is_empty() {
                return bad("empty split id".into());
            }
            let expected_phase = match entry.kind {
                SplitKind::IdTrain => Some(Phase::Train),
                SplitKind::IdVal => Some(Phase::Val),
                SplitKind::IdTest => Some(Phase::Test),
                _ => None,
            };
            match expected_phase {
                Some(p) if p != entry.phase => {
                    return bad(format!("split {id}: kind {} requires phase {p:?}", entry.kind));
                }
                None if entry.phase == Phase::Train => {
                    return bad(format!("split {id}: shifted splits cannot be in the train phase"));
                }
                _ => {}
            }
            for (role_name, path) in &entry.tensors {
                let role: TensorRole = role_name.parse()?;
                if let TensorRole::Features(layer) = &role {
                    if !seen.contains(layer.as_str()) {
                        return bad(format!("split {id}: layer {layer:?} not in layer_names"));
                    }
                }
                check_relative_path(path)?;
                if !paths.insert(path.as_str()) {
                    return bad(format!("tensor path {path:?} declared twice"));
                }
            }
            if !entry.has(&TensorRole::Logits) {
                return bad(format!("split {id}: missing logits"));
            }
            if !entry.has(&penultimate) {
                return bad(format!("split {id}: missing penultimate features"));
            }
            if entry.kind.is_id() && !entry.has(&TensorRole::Labels) {
                return bad(format!("split {id}: {} splits must carry labels", entry.kind));
            }
        }
        if let Some(head) = &self.head {
            for p in [&head.weight, &head.bias] {
                check_relative_path(p)?;
                if !paths.insert(p.as_str()) {
                    return bad(format!("tensor path {p:?} declared twice"));
                }
            }
        }
        if let Some(rec) = &self.recording {
            if let Some(d) = &rec.dropout {
                if !(0.0..1.0).contains(&d.p) || d.times == 0 {
                    return bad(format!("recording.dropout p={} times={} invalid", d.p, d.times));
                }
            }
            if let Some(p) = &rec.perturbation {
                if !(p.temperature > 0.0) || !p.temperature.is_finite() || !(p.epsilon >= 0.0) || !p.epsilon.is_finite() {
                    return bad("recording.perturbation needs temperature > 0 and epsilon ≥ 0".into());
                }
            }
        }
        Ok(())
    }
}

fn check_relative_path(p: &str) -> Result<()> {
    let path = Path::new(p);
    let ok = !p.is_empty()
        && path.components().all(|c| matches!(c, Component::Normal(_)))
        && p.ends_with(".oodt");
    if ok && p != "manifest.json" {
        Ok(())
    } else {
        Err(Error::Schema(format!(
            "tensor path {p:?} must be a relative .oodt path inside the bundle"
        )))
    }
}

/// Serializes a JSON value with object keys sorted and no whitespace.
pub fn canonical_json(value: &serde_json::Value) -> String {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", parts.join(","))
        }
        other => other.to_string(),
    }
}

/// Deserializes a JSON object into a map, rejecting repeated keys.
fn unique_map<'de, D, V>(de: D) -> std::result::Result<BTreeMap<String, V>, D::Error>
where
    D: Deserializer<'de>,
    V: Deserialize<'de>,
{
    struct UniqueVisitor<V>(std::marker::PhantomData<V>);

    impl<'de, V: Deserialize<'de>> Visitor<'de> for UniqueVisitor<V> {
        type Value = BTreeMap<String, V>;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("an object with unique keys")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((k, v)) = access.next_entry::<String, V>()? {
                if out.contains_key(&k) {
                    return Err(serde::de::Error::custom(format!("duplicate key {k:?}")));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }

    de.deserialize_map(UniqueVisitor(std::marker::PhantomData))
}
