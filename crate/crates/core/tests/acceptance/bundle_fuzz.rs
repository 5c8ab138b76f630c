//! Mutation fuzz of on-disk bundles.
//!
//! A hand-encoded base bundle receives up to three mutations that keep it
//! well-formed and, in half of the cases, one final mutation that breaks a
//! format rule. Each mutation's validity is known by construction, so the
//! reader must accept exactly the first kind (and round-trip it bit for bit)
//! and reject every case carrying the second.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use oodkit::bundle::{read_bundle, FeatureBundle};
use oodkit::rng::SplitMix64;
use serde_json::{json, Map, Value};

use crate::support::ensure;

const CASES: usize = 1000;
const K: usize = 3;
const PEN_WIDTH: u64 = 4;
const F32: u8 = 0;
const I64: u8 = 1;
const F64: u8 = 2;

/// A tensor file, encoded here independently of the library.
#[derive(Clone, Debug)]
struct Raw {
    dtype: u8,
    shape: Vec<u64>,
    payload: Vec<u8>,
}

fn width(dtype: u8) -> usize {
    if dtype == F32 {
        4
    } else {
        8
    }
}

impl Raw {
    fn f32(shape: Vec<u64>, rng: &mut SplitMix64) -> Self {
        let n: u64 = shape.iter().product();
        let payload = (0..n).flat_map(|_| (rng.standard_normal() as f32).to_le_bytes()).collect();
        Self { dtype: F32, shape, payload }
    }

    fn labels(n: u64, rng: &mut SplitMix64) -> Self {
        let payload = (0..n).flat_map(|_| (rng.below(K as u64) as i64).to_le_bytes()).collect();
        Self { dtype: I64, shape: vec![n], payload }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = b"OODB".to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        out.push(self.dtype);
        out.push(self.shape.len() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    fn decode(bytes: &[u8]) -> Self {
        let ndim = bytes[9] as usize;
        let shape = (0..ndim)
            .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()))
            .collect();
        Self { dtype: bytes[8], shape, payload: bytes[12 + 8 * ndim..].to_vec() }
    }

    fn elements(&self) -> Vec<Vec<u8>> {
        self.payload.chunks(width(self.dtype)).map(<[u8]>::to_vec).collect()
    }

    /// Same element values in another dtype.
    fn convert(&self, dtype: u8) -> Self {
        let values: Vec<f64> = self
            .elements()
            .iter()
            .map(|e| match self.dtype {
                F32 => f32::from_le_bytes(e[..].try_into().unwrap()) as f64,
                I64 => i64::from_le_bytes(e[..].try_into().unwrap()) as f64,
                _ => f64::from_le_bytes(e[..].try_into().unwrap()),
            })
            .collect();
        let payload = values
            .iter()
            .flat_map(|&v| match dtype {
                F32 => (v as f32).to_le_bytes().to_vec(),
                I64 => (v as i64).to_le_bytes().to_vec(),
                _ => v.to_le_bytes().to_vec(),
            })
            .collect();
        Self { dtype, shape: self.shape.clone(), payload }
    }
}

#[derive(Clone)]
struct Case {
    manifest: Value,
    files: BTreeMap<String, Vec<u8>>,
    /// Replaces the serialized manifest when set.
    text: Option<Vec<u8>>,
}

impl Case {
    fn splits(&self) -> Vec<String> {
        self.manifest["splits"].as_object().unwrap().keys().cloned().collect()
    }

    fn entry(&mut self, id: &str) -> &mut Map<String, Value> {
        self.manifest["splits"][id].as_object_mut().unwrap()
    }

    fn roles(&self, id: &str) -> Vec<(String, String)> {
        self.manifest["splits"][id]["tensors"]
            .as_object()
            .unwrap()
            .iter()
            .map(|(r, p)| (r.clone(), p.as_str().unwrap().to_string()))
            .collect()
    }

    fn kind(&self, id: &str) -> String {
        self.manifest["splits"][id]["kind"].as_str().unwrap().to_string()
    }

    fn count(&self, id: &str) -> u64 {
        self.manifest["splits"][id]["sample_count"].as_u64().unwrap()
    }

    fn layers(&self) -> Vec<String> {
        self.manifest["layer_names"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect()
    }

    fn penultimate(&self) -> String {
        self.layers().last().unwrap().clone()
    }

    fn head_paths(&self) -> Vec<(String, String)> {
        match self.manifest.get("head") {
            Some(h) => ["weight", "bias"].iter().map(|k| (k.to_string(), h[*k].as_str().unwrap().to_string())).collect(),
            None => Vec::new(),
        }
    }

    /// (split, role, path) for every split tensor.
    fn all_roles(&self) -> Vec<(String, String, String)> {
        self.splits()
            .into_iter()
            .flat_map(|s| self.roles(&s).into_iter().map(move |(r, p)| (s.clone(), r, p)))
            .collect()
    }

    fn all_paths(&self) -> Vec<String> {
        let mut out: Vec<String> = self.all_roles().into_iter().map(|(_, _, p)| p).collect();
        out.extend(self.head_paths().into_iter().map(|(_, p)| p));
        out
    }

    fn raw(&self, path: &str) -> Raw {
        Raw::decode(&self.files[path])
    }

    fn put(&mut self, path: &str, raw: &Raw) {
        self.files.insert(path.to_string(), raw.encode());
    }

    fn fresh_path(&self, rng: &mut SplitMix64) -> String {
        let taken: BTreeSet<String> = self.all_paths().into_iter().collect();
        loop {
            let p = match rng.below(3) {
                0 => format!("t{}.oodt", rng.below(1_000_000)),
                1 => format!("d{}/t{}.oodt", rng.below(50), rng.below(1_000_000)),
                _ => format!("d{}/e{}/t{}.oodt", rng.below(5), rng.below(5), rng.below(1_000_000)),
            };
            if !taken.contains(&p) && !self.files.contains_key(&p) {
                return p;
            }
        }
    }

    fn set_path(&mut self, split: Option<&str>, key: &str, path: &str) {
        match split {
            Some(s) => {
                self.entry(s)["tensors"][key] = json!(path);
            }
            None => self.manifest["head"][key] = json!(path),
        }
    }
}

fn is_id_kind(kind: &str) -> bool {
    kind.starts_with("id_")
}

fn pick<T: Clone>(rng: &mut SplitMix64, v: &[T]) -> Option<T> {
    (!v.is_empty()).then(|| v[rng.below(v.len() as u64) as usize].clone())
}

fn base(rng: &mut SplitMix64) -> Case {
    let layers = ["input", "mid", "pen"];
    // id, kind, phase, samples, labelled, feature layers, auxiliary logits
    let plan: [(&str, &str, &str, u64, bool, &[&str], bool); 5] = [
        ("train", "id_train", "train", 6, true, &layers, false),
        ("val", "id_val", "val", 5, true, &["pen"], false),
        ("test", "id_test", "test", 4, true, &["mid", "pen"], false),
        ("near", "near_ood", "test", 3, false, &["pen"], true),
        ("far", "far_ood", "val", 2, true, &["input", "pen"], false),
    ];
    let mut files = BTreeMap::new();
    let mut splits = Map::new();
    for (id, kind, phase, n, labelled, feats, aux) in plan {
        let mut tensors = Map::new();
        let mut add = |role: &str, raw: Raw| {
            let path = format!("{id}_{}.oodt", role.replace(':', "_"));
            tensors.insert(role.to_string(), json!(path));
            files.insert(path, raw.encode());
        };
        for &f in feats {
            let shape = match f {
                "input" => vec![n, 2, 3],
                "mid" => vec![n, 5],
                _ => vec![n, PEN_WIDTH],
            };
            add(&format!("features:{f}"), Raw::f32(shape, rng));
        }
        add("logits", Raw::f32(vec![n, K as u64], rng));
        if labelled {
            add("labels", Raw::labels(n, rng));
        }
        if aux {
            add("dropout_logits", Raw::f32(vec![2, n, K as u64], rng));
            add("perturbed_logits", Raw::f32(vec![n, K as u64], rng));
        }
        splits.insert(id.into(), json!({"kind": kind, "phase": phase, "sample_count": n, "tensors": tensors}));
    }
    files.insert("head_w.oodt".into(), Raw::f32(vec![K as u64, PEN_WIDTH], rng).encode());
    files.insert("head_b.oodt".into(), Raw::f32(vec![K as u64], rng).encode());
    let manifest = json!({
        "format_version": 1,
        "benchmark_name": "fuzz",
        "num_classes": K,
        "layer_names": layers,
        "splits": splits,
        "head": {"weight": "head_w.oodt", "bias": "head_b.oodt"},
        "recording": {
            "dropout": {"p": 0.5, "times": 2, "seed": 0},
            "perturbation": {"temperature": 1000.0, "epsilon": 0.0014}
        }
    });
    Case { manifest, files, text: None }
}

type Mutation = fn(&mut Case, &mut SplitMix64) -> bool;

// ---- mutations that keep the bundle well-formed ----

fn rename_benchmark(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let pool = ['a', 'Z', '0', ' ', '"', '\\', '\n', 'é', '漢', '\u{1F600}', '-', '{'];
    let name: String = (0..rng.below(12)).map(|_| pool[rng.below(pool.len() as u64) as usize]).collect();
    c.manifest["benchmark_name"] = json!(name);
    true
}

fn rename_split(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let Some(id) = pick(rng, &c.splits()) else { return false };
    let new = format!("split-{}", rng.below(1_000_000));
    let splits = c.manifest["splits"].as_object_mut().unwrap();
    if splits.contains_key(&new) {
        return false;
    }
    let e = splits.remove(&id).unwrap();
    splits.insert(new, e);
    true
}

fn move_file(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let mut slots: Vec<(Option<String>, String, String)> =
        c.all_roles().into_iter().map(|(s, r, p)| (Some(s), r, p)).collect();
    slots.extend(c.head_paths().into_iter().map(|(k, p)| (None, k, p)));
    let Some((split, key, path)) = pick(rng, &slots) else { return false };
    let new = c.fresh_path(rng);
    let bytes = c.files.remove(&path).unwrap();
    c.files.insert(new.clone(), bytes);
    c.set_path(split.as_deref(), &key, &new);
    true
}

fn overwrite_value(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let floats: Vec<String> = c.all_paths().into_iter().filter(|p| c.raw(p).dtype == F32).collect();
    let Some(path) = pick(rng, &floats) else { return false };
    let mut raw = c.raw(&path);
    let i = rng.below((raw.payload.len() / 4) as u64) as usize * 4;
    raw.payload[i..i + 4].copy_from_slice(&(rng.next_u64() as u32).to_le_bytes());
    c.put(&path, &raw);
    true
}

fn relabel(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let labels: Vec<String> = c.all_roles().into_iter().filter(|(_, r, _)| r == "labels").map(|(_, _, p)| p).collect();
    let Some(path) = pick(rng, &labels) else { return false };
    let mut raw = c.raw(&path);
    let i = rng.below((raw.payload.len() / 8) as u64) as usize * 8;
    raw.payload[i..i + 8].copy_from_slice(&(rng.below(K as u64) as i64).to_le_bytes());
    c.put(&path, &raw);
    true
}

fn drop_optional(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let pen = format!("features:{}", c.penultimate());
    let optional: Vec<(String, String, String)> = c
        .all_roles()
        .into_iter()
        .filter(|(s, r, _)| r != "logits" && *r != pen && !(r == "labels" && is_id_kind(&c.kind(s))))
        .collect();
    let Some((split, role, path)) = pick(rng, &optional) else { return false };
    c.entry(&split)["tensors"].as_object_mut().unwrap().remove(&role);
    c.files.remove(&path);
    true
}

fn drop_split(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let ids = c.splits();
    if ids.len() < 2 {
        return false;
    }
    let id = pick(rng, &ids).unwrap();
    for (_, p) in c.roles(&id) {
        c.files.remove(&p);
    }
    c.manifest["splits"].as_object_mut().unwrap().remove(&id);
    true
}

fn drop_head(c: &mut Case, _rng: &mut SplitMix64) -> bool {
    let paths = c.head_paths();
    if paths.is_empty() {
        return false;
    }
    for (_, p) in paths {
        c.files.remove(&p);
    }
    c.manifest.as_object_mut().unwrap().remove("head");
    true
}

fn prepend_layer(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let name = format!("extra-{}", rng.below(1_000_000));
    if c.layers().contains(&name) {
        return false;
    }
    c.manifest["layer_names"].as_array_mut().unwrap().insert(0, json!(name));
    true
}

fn reassign_shift(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let shifted: Vec<String> = c.splits().into_iter().filter(|s| !is_id_kind(&c.kind(s))).collect();
    let Some(id) = pick(rng, &shifted) else { return false };
    let kind = pick(rng, &["csid", "near_ood", "far_ood"]).unwrap();
    let phase = pick(rng, &["val", "test"]).unwrap();
    let e = c.entry(&id);
    e["kind"] = json!(kind);
    e["phase"] = json!(phase);
    true
}

fn truncate_split(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let ids: Vec<String> = c.splits().into_iter().filter(|s| c.count(s) >= 2).collect();
    let Some(id) = pick(rng, &ids) else { return false };
    let m = 1 + rng.below(c.count(&id) - 1);
    for (role, path) in c.roles(&id) {
        let mut raw = c.raw(&path);
        let w = width(raw.dtype);
        if role == "dropout_logits" {
            let (passes, n, k) = (raw.shape[0] as usize, raw.shape[1] as usize, raw.shape[2] as usize);
            raw.payload = (0..passes)
                .flat_map(|p| raw.payload[p * n * k * w..(p * n * k + m as usize * k) * w].to_vec())
                .collect();
            raw.shape[1] = m;
        } else {
            let row: u64 = raw.shape[1..].iter().product();
            raw.payload.truncate((m * row) as usize * w);
            raw.shape[0] = m;
        }
        c.put(&path, &raw);
    }
    c.entry(&id)["sample_count"] = json!(m);
    true
}

fn clone_split(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let Some(id) = pick(rng, &c.splits()) else { return false };
    let new = format!("copy-{}", rng.below(1_000_000));
    if c.splits().contains(&new) {
        return false;
    }
    let mut entry = c.manifest["splits"][&id].clone();
    for (role, path) in c.roles(&id) {
        let p = c.fresh_path(rng);
        let bytes = c.files[&path].clone();
        c.files.insert(p.clone(), bytes);
        entry["tensors"][&role] = json!(p);
    }
    c.manifest["splits"].as_object_mut().unwrap().insert(new, entry);
    true
}

fn retune_recording(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let Some(rec) = c.manifest.get_mut("recording") else { return false };
    if let Some(d) = rec.get_mut("dropout") {
        d["p"] = json!(0.99 * rng.next_f64());
        d["seed"] = json!(rng.next_u64());
    }
    if let Some(p) = rec.get_mut("perturbation") {
        p["temperature"] = json!(0.1 + 2000.0 * rng.next_f64());
        p["epsilon"] = json!(0.01 * rng.next_f64());
    }
    true
}

const VALID: [(&str, Mutation); 13] = [
    ("rename-benchmark", rename_benchmark),
    ("rename-split", rename_split),
    ("move-file", move_file),
    ("overwrite-value", overwrite_value),
    ("relabel", relabel),
    ("drop-optional-tensor", drop_optional),
    ("drop-split", drop_split),
    ("drop-head", drop_head),
    ("prepend-layer", prepend_layer),
    ("reassign-shift", reassign_shift),
    ("truncate-split", truncate_split),
    ("clone-split", clone_split),
    ("retune-recording", retune_recording),
];

// ---- mutations that break exactly one rule ----

fn bad_version(c: &mut Case, rng: &mut SplitMix64) -> bool {
    c.manifest["format_version"] = json!(pick(rng, &[0u64, 2, 7, u32::MAX as u64]).unwrap());
    true
}

fn bad_classes(c: &mut Case, rng: &mut SplitMix64) -> bool {
    c.manifest["num_classes"] = json!(pick(rng, &[0u64, 1, 2, 4, 100]).unwrap());
    true
}

fn bad_layers(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let mut layers = c.layers();
    match rng.below(4) {
        0 => layers.clear(),
        1 => {
            let dup = pick(rng, &layers).unwrap();
            let at = rng.below(layers.len() as u64 + 1) as usize;
            layers.insert(at, dup);
        }
        2 => {
            let at = rng.below(layers.len() as u64 + 1) as usize;
            layers.insert(at, String::new());
        }
        _ => {
            let used: BTreeSet<String> = c
                .all_roles()
                .into_iter()
                .filter_map(|(_, r, _)| r.strip_prefix("features:").map(str::to_string))
                .collect();
            let used: Vec<String> = used.into_iter().collect();
            let gone = pick(rng, &used).unwrap();
            layers.retain(|l| *l != gone);
        }
    }
    c.manifest["layer_names"] = json!(layers);
    true
}

fn unknown_key(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let target: &mut Value = match rng.below(5) {
        0 => &mut c.manifest,
        1 => {
            let id = pick(rng, &c.splits()).unwrap();
            &mut c.manifest["splits"][&id]
        }
        2 => match c.manifest.get_mut("head") {
            Some(h) => h,
            None => return false,
        },
        3 => match c.manifest.get_mut("recording") {
            Some(r) => r,
            None => return false,
        },
        _ => match c.manifest.get_mut("recording").and_then(|r| r.get_mut("dropout")) {
            Some(d) => d,
            None => return false,
        },
    };
    target["comment"] = json!("unexpected");
    true
}

fn duplicate_key(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let text = serde_json::to_string(&c.manifest).unwrap();
    let injected = if rng.below(2) == 0 {
        let key = pick(rng, &["format_version", "benchmark_name", "num_classes", "layer_names"]).unwrap();
        format!("{{\"{key}\":{},{}", c.manifest[key], &text[1..])
    } else {
        let id = pick(rng, &c.splits()).unwrap();
        let at = text.find("\"splits\":{").unwrap() + "\"splits\":{".len();
        let entry = format!("{}:{},", json!(id), c.manifest["splits"][&id]);
        format!("{}{entry}{}", &text[..at], &text[at..])
    };
    c.text = Some(injected.into_bytes());
    true
}

fn missing_key(c: &mut Case, rng: &mut SplitMix64) -> bool {
    if rng.below(2) == 0 {
        let key = pick(rng, &["format_version", "benchmark_name", "num_classes", "layer_names", "splits"]).unwrap();
        c.manifest.as_object_mut().unwrap().remove(key);
    } else {
        let id = pick(rng, &c.splits()).unwrap();
        let key = pick(rng, &["kind", "phase", "sample_count", "tensors"]).unwrap();
        c.entry(&id).remove(key);
    }
    true
}

fn wrong_type(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let id = pick(rng, &c.splits()).unwrap();
    match rng.below(8) {
        0 => c.manifest["num_classes"] = json!("3"),
        1 => c.manifest["format_version"] = json!(1.5),
        2 => c.manifest["layer_names"] = json!("pen"),
        3 => c.manifest["splits"] = json!([]),
        4 => c.entry(&id)["sample_count"] = json!(-1),
        5 => c.entry(&id)["kind"] = json!("ood"),
        6 => c.entry(&id)["phase"] = json!("dev"),
        _ => c.entry(&id)["tensors"] = json!(5),
    }
    true
}

fn bad_phase(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let id = pick(rng, &c.splits()).unwrap();
    let kind = c.kind(&id);
    let right = match kind.as_str() {
        "id_train" => "train",
        "id_val" => "val",
        "id_test" => "test",
        _ => {
            c.entry(&id)["phase"] = json!("train");
            return true;
        }
    };
    if rng.below(2) == 0 {
        let wrong: Vec<&str> = ["train", "val", "test"].into_iter().filter(|p| *p != right).collect();
        c.entry(&id)["phase"] = json!(pick(rng, &wrong).unwrap());
    } else {
        let other: Vec<&str> = ["id_train", "id_val", "id_test"].into_iter().filter(|k| *k != kind).collect();
        c.entry(&id)["kind"] = json!(pick(rng, &other).unwrap());
    }
    true
}

fn bad_count(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let id = pick(rng, &c.splits()).unwrap();
    let n = c.count(&id);
    let m = if rng.below(2) == 0 || n == 0 { n + 1 + rng.below(5) } else { rng.below(n) };
    c.entry(&id)["sample_count"] = json!(m);
    true
}

fn bad_path(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let mut slots: Vec<(Option<String>, String, String)> =
        c.all_roles().into_iter().map(|(s, r, p)| (Some(s), r, p)).collect();
    slots.extend(c.head_paths().into_iter().map(|(k, p)| (None, k, p)));
    let (split, key, path) = pick(rng, &slots).unwrap();
    let others: Vec<String> = c.all_paths().into_iter().filter(|p| *p != path).collect();
    let new = match rng.below(9) {
        0 => "/tmp/abs.oodt".to_string(),
        1 => "../outside.oodt".to_string(),
        2 => "d/../up.oodt".to_string(),
        3 => "./here.oodt".to_string(),
        4 => "tensor.npy".to_string(),
        5 => String::new(),
        6 => "manifest.json".to_string(),
        7 => format!("{path}/"),
        _ => match pick(rng, &others) {
            Some(p) => p,
            None => return false,
        },
    };
    c.set_path(split.as_deref(), &key, &new);
    true
}

fn drop_required(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let pen = format!("features:{}", c.penultimate());
    let required: Vec<(String, String)> = c
        .all_roles()
        .into_iter()
        .filter(|(s, r, _)| *r == "logits" || *r == pen || (r == "labels" && is_id_kind(&c.kind(s))))
        .map(|(s, r, _)| (s, r))
        .collect();
    let (split, role) = pick(rng, &required).unwrap();
    c.entry(&split)["tensors"].as_object_mut().unwrap().remove(&role);
    true
}

fn bad_role(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let (split, role, path) = pick(rng, &c.all_roles()).unwrap();
    let new = pick(rng, &["features:nowhere", "weights", "features:", "Logits", "features", "label"]).unwrap();
    let tensors = c.entry(&split)["tensors"].as_object_mut().unwrap();
    if tensors.contains_key(new) {
        return false;
    }
    tensors.remove(&role);
    tensors.insert(new.to_string(), json!(path));
    true
}

fn corrupt_header(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let path = pick(rng, &c.all_paths()).unwrap();
    let bytes = c.files.get_mut(&path).unwrap();
    match rng.below(9) {
        0 => bytes[rng.below(4) as usize] ^= 1 + rng.below(255) as u8,
        1 => bytes[4..8].copy_from_slice(&(2 + rng.below(1000) as u32).to_le_bytes()),
        2 => bytes[8] = 3 + rng.below(253) as u8,
        3 => bytes[10..12].copy_from_slice(&(1 + rng.below(65535) as u16).to_le_bytes()),
        4 => {
            let cut = 1 + rng.below(bytes.len() as u64) as usize;
            bytes.truncate(bytes.len() - cut);
        }
        5 => bytes.extend((0..1 + rng.below(16)).map(|i| i as u8)),
        6 => {
            let ndim = bytes[9] as u64;
            let at = 12 + 8 * rng.below(ndim) as usize;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            bytes[at..at + 8].copy_from_slice(&(d + 1 + rng.below(3)).to_le_bytes());
        }
        7 => {
            let ndim = bytes[9] as u64;
            let at = 12 + 8 * rng.below(ndim) as usize;
            bytes[at..at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        }
        _ => bytes[9] += 1,
    }
    true
}

fn wrong_dtype(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let path = pick(rng, &c.all_paths()).unwrap();
    let raw = c.raw(&path);
    let target = if raw.dtype == I64 { pick(rng, &[F32, F64]).unwrap() } else { pick(rng, &[I64, F64]).unwrap() };
    c.put(&path, &raw.convert(target));
    true
}

fn wrong_shape(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let pen = format!("features:{}", c.penultimate());
    let roles = c.all_roles();
    let (split, role, path) = pick(rng, &roles).unwrap();
    let mut raw = c.raw(&path);
    let n = c.count(&split);
    match role.as_str() {
        "logits" | "perturbed_logits" => raw = Raw::f32(vec![n, K as u64 + 1], rng),
        "labels" => raw.shape = vec![n, 1],
        "dropout_logits" => {
            let passes = c.manifest.pointer("/recording/dropout/times").and_then(Value::as_u64);
            raw = match (rng.below(2), passes) {
                (0, Some(t)) => Raw::f32(vec![t + 1, n, K as u64], rng),
                (0, None) => Raw::f32(vec![0, n, K as u64], rng),
                _ => Raw::f32(vec![raw.shape[0], n + 1, K as u64], rng),
            };
        }
        r if r == pen && rng.below(2) == 0 => raw.shape = vec![n, 2, PEN_WIDTH / 2],
        r => {
            // Widen one split's copy of a layer that another split also records.
            let shared = roles.iter().any(|(s, r2, _)| *s != split && r2 == r);
            if !shared {
                return false;
            }
            let mut shape = raw.shape.clone();
            *shape.last_mut().unwrap() += 1;
            raw = Raw::f32(shape, rng);
        }
    }
    c.put(&path, &raw);
    true
}

fn wrong_head(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let paths = c.head_paths();
    if paths.is_empty() {
        return false;
    }
    let (w, b) = (&paths[0].1, &paths[1].1);
    match rng.below(3) {
        0 => {
            let raw = Raw::f32(vec![K as u64, PEN_WIDTH + 1], rng);
            c.put(&w.clone(), &raw);
        }
        1 => {
            let raw = Raw::f32(vec![K as u64 + 1], rng);
            c.put(&b.clone(), &raw);
        }
        _ => {
            let raw = Raw::f32(vec![K as u64 * PEN_WIDTH], rng);
            c.put(&w.clone(), &raw);
        }
    }
    true
}

fn bad_recording(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let rec = c.manifest.as_object_mut().unwrap().entry("recording").or_insert(json!({}));
    if rng.below(2) == 0 {
        let d = rec.as_object_mut().unwrap().entry("dropout").or_insert(json!({"p": 0.5, "times": 2, "seed": 0}));
        match rng.below(4) {
            0 => d["p"] = json!(1.0),
            1 => d["p"] = json!(1.5),
            2 => d["p"] = json!(-0.1),
            _ => d["times"] = json!(0),
        }
    } else {
        let p = rec
            .as_object_mut()
            .unwrap()
            .entry("perturbation")
            .or_insert(json!({"temperature": 1000.0, "epsilon": 0.0014}));
        match rng.below(3) {
            0 => p["temperature"] = json!(0.0),
            1 => p["temperature"] = json!(-2.0),
            _ => p["epsilon"] = json!(-0.1),
        }
    }
    true
}

fn delete_file(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let path = pick(rng, &c.all_paths()).unwrap();
    c.files.remove(&path);
    true
}

fn label_range(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let labels: Vec<String> = c.all_roles().into_iter().filter(|(_, r, _)| r == "labels").map(|(_, _, p)| p).collect();
    let Some(path) = pick(rng, &labels) else { return false };
    let mut raw = c.raw(&path);
    let i = rng.below((raw.payload.len() / 8) as u64) as usize * 8;
    let v = pick(rng, &[K as i64, -1, i64::MAX, i64::MIN]).unwrap();
    raw.payload[i..i + 8].copy_from_slice(&v.to_le_bytes());
    c.put(&path, &raw);
    true
}

fn broken_text(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let text = serde_json::to_vec(&c.manifest).unwrap();
    c.text = Some(match rng.below(5) {
        0 => text[..rng.below(text.len() as u64) as usize].to_vec(),
        1 => b"[]".to_vec(),
        2 => b"null".to_vec(),
        3 => vec![0xff, 0xfe, b'{', b'}'],
        _ => Vec::new(),
    });
    true
}

fn empty_split_id(c: &mut Case, rng: &mut SplitMix64) -> bool {
    let id = pick(rng, &c.splits()).unwrap();
    let splits = c.manifest["splits"].as_object_mut().unwrap();
    let e = splits.remove(&id).unwrap();
    splits.insert(String::new(), e);
    true
}

const INVALID: [(&str, Mutation); 21] = [
    ("format-version", bad_version),
    ("num-classes", bad_classes),
    ("layer-names", bad_layers),
    ("unknown-key", unknown_key),
    ("duplicate-key", duplicate_key),
    ("missing-key", missing_key),
    ("wrong-json-type", wrong_type),
    ("kind-phase", bad_phase),
    ("sample-count", bad_count),
    ("tensor-path", bad_path),
    ("required-role", drop_required),
    ("unknown-role", bad_role),
    ("header-bytes", corrupt_header),
    ("dtype", wrong_dtype),
    ("shape", wrong_shape),
    ("head-shape", wrong_head),
    ("recording", bad_recording),
    ("missing-file", delete_file),
    ("label-range", label_range),
    ("manifest-text", broken_text),
    ("empty-split-id", empty_split_id),
];

fn write_case(c: &Case, dir: &Path, rng: &mut SplitMix64) {
    let text = c.text.clone().unwrap_or_else(|| {
        if rng.below(2) == 0 {
            serde_json::to_vec_pretty(&c.manifest).unwrap()
        } else {
            serde_json::to_vec(&c.manifest).unwrap()
        }
    });
    fs::write(dir.join("manifest.json"), text).unwrap();
    for (p, bytes) in &c.files {
        let path = dir.join(p);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, bytes).unwrap();
    }
}

fn open(dir: &Path) -> oodkit::Result<FeatureBundle> {
    let b = read_bundle(dir)?;
    b.validate_all()?;
    Ok(b)
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Rewrites an accepted bundle and compares every byte of every tensor and
/// the manifest contents with the input.
fn roundtrip(c: &Case, b: &FeatureBundle, dir: &Path) -> Result<(), String> {
    let out = dir.join("rewritten");
    b.write(&out).map_err(|e| format!("rewrite failed: {e}"))?;
    let again = open(&out).map_err(|e| format!("rewritten bundle rejected: {e}"))?;
    ensure(again.manifest() == b.manifest(), || "manifest changed on rewrite".into())?;
    let mut files = files_under(&out);
    let manifest: Value = serde_json::from_slice(&files.remove("manifest.json").unwrap()).unwrap();
    ensure(manifest == c.manifest, || format!("rewritten manifest differs: {manifest}\nexpected {}", c.manifest))?;
    ensure(files == c.files, || "rewritten tensor files differ from the input bytes".into())
}

fn one_case(i: usize, rng: &mut SplitMix64, stats: &mut BTreeMap<&'static str, usize>) -> Result<bool, String> {
    let mut c = base(rng);
    let mut applied = Vec::new();
    for _ in 0..rng.below(4) {
        let (name, m) = VALID[rng.below(VALID.len() as u64) as usize];
        if m(&mut c, rng) {
            applied.push(name);
        }
    }
    let breaking = rng.below(2) == 0;
    if breaking {
        loop {
            let (name, m) = INVALID[rng.below(INVALID.len() as u64) as usize];
            if m(&mut c, rng) {
                applied.push(name);
                break;
            }
        }
    }
    for name in &applied {
        *stats.entry(name).or_default() += 1;
    }
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("bundle");
    fs::create_dir_all(&dir).unwrap();
    write_case(&c, &dir, rng);
    let outcome = catch_unwind(AssertUnwindSafe(|| open(&dir)))
        .map_err(|_| format!("case {i} ({applied:?}): reader panicked"))?;
    match (breaking, outcome) {
        (true, Ok(_)) => Err(format!("case {i} ({applied:?}): invalid bundle accepted")),
        (true, Err(_)) => Ok(false),
        (false, Err(e)) => Err(format!("case {i} ({applied:?}): valid bundle rejected: {e}")),
        (false, Ok(b)) => roundtrip(&c, &b, tmp.path())
            .map(|_| true)
            .map_err(|e| format!("case {i} ({applied:?}): {e}")),
    }
}

pub fn run() -> Result<String, String> {
    let mut rng = SplitMix64::new(0x00D8_F022);
    let mut stats = BTreeMap::new();
    let (mut valid, mut invalid) = (0, 0);
    for i in 0..CASES {
        if one_case(i, &mut rng, &mut stats)? {
            valid += 1;
        } else {
            invalid += 1;
        }
    }
    let unused: Vec<&str> = VALID.iter().chain(INVALID.iter()).map(|(n, _)| *n).filter(|n| !stats.contains_key(n)).collect();
    ensure(unused.is_empty(), || format!("mutations never applied: {unused:?}"))?;
    Ok(format!(
        "{CASES} cases: {valid} valid round-tripped bit-exactly, {invalid} invalid rejected ({} mutation kinds)",
        stats.len()
    ))
}
