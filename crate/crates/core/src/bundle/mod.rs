//! On-disk record of model evidence: per-split features, logits, labels and
//! optional auxiliary logit passes, described by a strict `manifest.json`.

pub mod manifest;
pub mod tensor;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};

pub use manifest::{
    canonical_json, DropoutRecording, HeadRef, Manifest, PerturbationRecording, Phase, Recording,
    SplitEntry, SplitKind, TensorRole, FORMAT_VERSION,
};
pub use tensor::{read_header, read_tensor, write_tensor, DType, Tensor, TensorData, TensorHeader};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Relative deviation above which a declared head is rejected.
pub const HEAD_TOLERANCE: f64 = 1e-4;
/// Rows of `id_train` checked by [`validate_head`].
pub const HEAD_SAMPLE_ROWS: usize = 256;

/// Final linear layer `logits = W z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `K × D`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    /// `b_c + Σ_j W_cj z_j`, summed in index order so every caller gets
    /// bit-identical results.
    pub fn logits(&self, z: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(self.num_classes(), |c| {
            let w = self.weight.row(c);
            let mut s = self.bias[c];
            for j in 0..z.len() {
                s += w[j] * z[j];
            }
            s
        })
    }

    pub fn logits_batch(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((z.nrows(), self.num_classes()));
        for (i, row) in z.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.logits(row));
        }
        out
    }
}

enum Source {
    Dir(PathBuf),
    Memory(BTreeMap<String, Arc<Tensor>>),
}

/// A validated bundle. Tensors load lazily and are memoized; the bundle is
/// read-only and can be shared across threads.
pub struct FeatureBundle {
    manifest: Manifest,
    source: Source,
    headers: BTreeMap<String, TensorHeader>,
    cache: RwLock<HashMap<String, Arc<Tensor>>>,
}

impl std::fmt::Debug for FeatureBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureBundle")
            .field("benchmark", &self.manifest.benchmark_name)
            .field("splits", &self.manifest.splits.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Reads and validates `dir/manifest.json` and every tensor header. Payloads
/// are read on first access.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<FeatureBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = Manifest::from_json(&bytes)?;
    let mut headers = BTreeMap::new();
    for path in manifest.declared_paths() {
        let header = read_header(&dir.join(path)).map_err(|e| e.context(path.to_string()))?;
        headers.insert(path.to_string(), header);
    }
    check_headers(&manifest, &headers)?;
    Ok(FeatureBundle {
        manifest,
        source: Source::Dir(dir.to_path_buf()),
        headers,
        cache: RwLock::new(HashMap::new()),
    })
}

/// Validates and writes a bundle. `tensors` maps each declared relative path
/// to its tensor. The directory is staged next to `dir` and renamed into place.
pub fn write_bundle(
    manifest: &Manifest,
    tensors: &BTreeMap<String, Tensor>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    validate_parts(manifest, tensors)?;
    let dir = dir.as_ref();
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".oodkit-staging-")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    for (rel, t) in tensors {
        let path = staging.path().join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        fs::write(&path, t.encode()).map_err(|e| Error::io(&path, e))?;
    }
    let mpath = staging.path().join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_canonical_json()).map_err(|e| Error::io(&mpath, e))?;
    replace_dir(staging, dir)
}

/// Moves a fully written staging directory over `dir`.
pub(crate) fn replace_dir(staging: tempfile::TempDir, dir: &Path) -> Result<()> {
    if dir.exists() {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let old = tempfile::Builder::new()
            .prefix(".oodkit-old-")
            .tempdir_in(parent)
            .map_err(|e| Error::io(parent, e))?;
        let old_path = old.path().join("prev");
        fs::rename(dir, &old_path).map_err(|e| Error::io(dir, e))?;
        let staged = staging.keep();
        if let Err(e) = fs::rename(&staged, dir) {
            let _ = fs::rename(&old_path, dir);
            let _ = fs::remove_dir_all(&staged);
            return Err(Error::io(dir, e));
        }
        drop(old);
    } else {
        let staged = staging.keep();
        if let Err(e) = fs::rename(&staged, dir) {
            let _ = fs::remove_dir_all(&staged);
            return Err(Error::io(dir, e));
        }
    }
    Ok(())
}

fn validate_parts(manifest: &Manifest, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    manifest.validate()?;
    let declared = manifest.declared_paths();
    for path in &declared {
        if !tensors.contains_key(*path) {
            return Err(Error::Schema(format!("no tensor supplied for declared path {path}")));
        }
    }
    if let Some(extra) = tensors.keys().find(|k| !declared.contains(k.as_str())) {
        return Err(Error::Schema(format!("tensor {extra} is not declared in the manifest")));
    }
    let headers: BTreeMap<String, TensorHeader> =
        tensors.iter().map(|(k, t)| (k.clone(), t.header())).collect();
    check_headers(manifest, &headers)?;
    for entry in manifest.splits.values() {
        if let Some(p) = entry.path_of(&TensorRole::Labels) {
            check_labels(&tensors[p], manifest.num_classes).map_err(|e| e.context(p.to_string()))?;
        }
    }
    Ok(())
}

fn check_labels(t: &Tensor, k: usize) -> Result<()> {
    if let Some(bad) = t.as_i64()?.iter().find(|&&l| l < 0 || l as u64 >= k as u64) {
        return Err(Error::Schema(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// Shape and dtype agreement between the manifest and tensor headers.
fn check_headers(m: &Manifest, headers: &BTreeMap<String, TensorHeader>) -> Result<()> {
    let k = m.num_classes;
    let penultimate = m.penultimate();
    let mut layer_tail: BTreeMap<&str, &[usize]> = BTreeMap::new();
    for (id, entry) in &m.splits {
        let n = entry.sample_count;
        for (role_name, path) in &entry.tensors {
            let h = &headers[path];
            let role: TensorRole = role_name.parse()?;
            let fail = |what: String| {
                Err(Error::Schema(format!("split {id}, {role_name}: {what}, header is {} {:?}", h.dtype.name(), h.shape)))
            };
            let want_dtype = if role == TensorRole::Labels { DType::I64 } else { DType::F32 };
            if h.dtype != want_dtype {
                return fail(format!("expected dtype {}", want_dtype.name()));
            }
            match &role {
                TensorRole::Features(layer) => {
                    if h.shape.len() < 2 || h.shape[0] != n {
                        return fail(format!("expected {n} samples × features"));
                    }
                    if layer == penultimate && h.shape.len() != 2 {
                        return fail("penultimate features must be rank 2".into());
                    }
                    let tail = &h.shape[1..];
                    let key = &role_name["features:".len()..];
                    match layer_tail.get(key) {
                        Some(prev) if *prev != tail => {
                            return fail(format!("layer {layer} has per-sample shape {prev:?} elsewhere"));
                        }
                        _ => {
                            layer_tail.insert(key, tail);
                        }
                    }
                }
                TensorRole::Logits | TensorRole::PerturbedLogits => {
                    if h.shape != [n, k] {
                        return fail(format!("expected [{n}, {k}]"));
                    }
                }
                TensorRole::Labels => {
                    if h.shape != [n] {
                        return fail(format!("expected [{n}]"));
                    }
                }
                TensorRole::DropoutLogits => {
                    if h.shape.len() != 3 || h.shape[0] == 0 || h.shape[1] != n || h.shape[2] != k {
                        return fail(format!("expected [passes, {n}, {k}]"));
                    }
                    let times = m.recording.as_ref().and_then(|r| r.dropout.as_ref()).map(|d| d.times);
                    if let Some(t) = times {
                        if h.shape[0] != t {
                            return fail(format!("recording declares {t} dropout passes"));
                        }
                    }
                }
            }
        }
    }
    if let Some(head) = &m.head {
        let w = &headers[&head.weight];
        let b = &headers[&head.bias];
        if w.dtype != DType::F32 || b.dtype != DType::F32 {
            return Err(Error::Schema("head tensors must be f32".into()));
        }
        let d = layer_tail.get(penultimate).map(|t| t[0]);
        let w_ok = w.shape.len() == 2 && w.shape[0] == k && d.is_none_or(|d| w.shape[1] == d);
        if !w_ok {
            return Err(Error::Schema(format!("head weight shape {:?} is not [{k}, D]", w.shape)));
        }
        if b.shape != [k] {
            return Err(Error::Schema(format!("head bias shape {:?} is not [{k}]", b.shape)));
        }
    }
    Ok(())
}

impl FeatureBundle {
    /// An in-memory bundle validated exactly as a written one would be.
    pub fn from_parts(manifest: Manifest, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        validate_parts(&manifest, &tensors)?;
        let headers = tensors.iter().map(|(k, t)| (k.clone(), t.header())).collect();
        Ok(Self {
            manifest,
            source: Source::Memory(tensors.into_iter().map(|(k, t)| (k, Arc::new(t))).collect()),
            headers,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dir(&self) -> Option<&Path> {
        match &self.source {
            Source::Dir(d) => Some(d),
            Source::Memory(_) => None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn sample_count(&self, split: &str) -> Result<usize> {
        Ok(self.manifest.split(split)?.sample_count)
    }

    pub fn header(&self, split: &str, role: &TensorRole) -> Result<&TensorHeader> {
        let path = self.path_of(split, role)?;
        Ok(&self.headers[path])
    }

    fn path_of(&self, split: &str, role: &TensorRole) -> Result<&str> {
        let entry = self.manifest.split(split)?;
        entry
            .path_of(role)
            .ok_or_else(|| Error::Capability(format!("split {split} has no {role} tensor")))
    }

    pub fn has(&self, split: &str, role: &TensorRole) -> bool {
        self.path_of(split, role).is_ok()
    }

    fn load(&self, path: &str) -> Result<Arc<Tensor>> {
        if let Some(t) = self.cache.read().expect("cache lock").get(path) {
            return Ok(t.clone());
        }
        let tensor = match &self.source {
            Source::Memory(map) => map[path].clone(),
            Source::Dir(dir) => {
                let t = read_tensor(&dir.join(path))?;
                if t.header() != self.headers[path] {
                    return Err(Error::Schema(format!("{path} changed since the bundle was opened")));
                }
                if self.is_label_path(path) {
                    check_labels(&t, self.manifest.num_classes).map_err(|e| e.context(path.to_string()))?;
                }
                Arc::new(t)
            }
        };
        let mut cache = self.cache.write().expect("cache lock");
        Ok(cache.entry(path.to_string()).or_insert(tensor).clone())
    }

    fn is_label_path(&self, path: &str) -> bool {
        self.manifest
            .splits
            .values()
            .any(|e| e.path_of(&TensorRole::Labels) == Some(path))
    }

    pub fn tensor(&self, split: &str, role: &TensorRole) -> Result<Arc<Tensor>> {
        let path = self.path_of(split, role)?;
        self.load(path).map_err(|e| e.context(format!("split {split}, {role}")))
    }

    /// `n × features` for a layer; higher-rank activations are flattened per sample.
    pub fn features(&self, split: &str, layer: &str) -> Result<Array2<f64>> {
        self.tensor(split, &TensorRole::Features(layer.to_string()))?.to_matrix()
    }

    pub fn penultimate(&self, split: &str) -> Result<Array2<f64>> {
        self.features(split, self.manifest.penultimate())
    }

    pub fn logits(&self, split: &str) -> Result<Array2<f64>> {
        self.tensor(split, &TensorRole::Logits)?.to_matrix()
    }

    /// `None` for splits recorded without labels.
    pub fn labels(&self, split: &str) -> Result<Option<Vec<usize>>> {
        if !self.has(split, &TensorRole::Labels) {
            self.manifest.split(split)?;
            return Ok(None);
        }
        let t = self.tensor(split, &TensorRole::Labels)?;
        Ok(Some(t.as_i64()?.iter().map(|&l| l as usize).collect()))
    }

    /// `passes × n × K`.
    pub fn dropout_logits(&self, split: &str) -> Result<Array3<f64>> {
        self.tensor(split, &TensorRole::DropoutLogits)?.to_array3()
    }

    pub fn perturbed_logits(&self, split: &str) -> Result<Array2<f64>> {
        self.tensor(split, &TensorRole::PerturbedLogits)?.to_matrix()
    }

    pub fn head(&self) -> Result<Option<ClassifierHead>> {
        let Some(h) = &self.manifest.head else {
            return Ok(None);
        };
        Ok(Some(ClassifierHead {
            weight: self.load(&h.weight)?.to_matrix()?,
            bias: self.load(&h.bias)?.to_vector()?,
        }))
    }

    /// Loads every tensor, surfacing any payload-level violation.
    pub fn validate_all(&self) -> Result<()> {
        for path in self.headers.keys() {
            self.load(path).map_err(|e| e.context(path.clone()))?;
        }
        Ok(())
    }

    /// All tensors keyed by relative path, for rewriting or comparison.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.headers
            .keys()
            .map(|p| Ok((p.clone(), (*self.load(p)?).clone())))
            .collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_bundle(&self.manifest, &self.tensors()?, dir)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadReport {
    pub split: String,
    pub rows_checked: usize,
    pub max_deviation: f64,
}

/// Recomputes logits from the penultimate features of up to 256 evenly spaced
/// `id_train` rows. Products are formed in f64 and rounded to f32 before the
/// comparison, so a head that generated the logits reports deviation 0.
pub fn validate_head(bundle: &FeatureBundle) -> Result<HeadReport> {
    let head = bundle
        .head()?
        .ok_or_else(|| Error::InvalidInput("bundle declares no classifier head".into()))?;
    let split = bundle
        .manifest()
        .splits_of(SplitKind::IdTrain)
        .first()
        .map(|s| s.to_string())
        .ok_or_else(|| Error::Schema("head validation needs an id_train split".into()))?;
    let z = bundle.penultimate(&split)?;
    let logits = bundle.logits(&split)?;
    let n = z.nrows();
    let rows: Vec<usize> = if n <= HEAD_SAMPLE_ROWS {
        (0..n).collect()
    } else {
        (0..HEAD_SAMPLE_ROWS).map(|i| i * n / HEAD_SAMPLE_ROWS).collect()
    };
    let mut worst = 0.0f64;
    for &i in &rows {
        let pred = head.logits(z.row(i));
        for (p, &rec) in pred.iter().zip(logits.row(i)) {
            let p = *p as f32 as f64;
            worst = worst.max((p - rec).abs() / rec.abs().max(1.0));
        }
    }
    if worst > HEAD_TOLERANCE {
        return Err(Error::HeadMismatch { deviation: worst });
    }
    Ok(HeadReport {
        split,
        rows_checked: rows.len(),
        max_deviation: worst,
    })
}

/// Assembles a manifest and its tensors with generated file names.
#[derive(Debug, Clone)]
pub struct BundleBuilder {
    manifest: Manifest,
    tensors: BTreeMap<String, Tensor>,
}

impl BundleBuilder {
    pub fn new(benchmark: &str, num_classes: usize, layer_names: Vec<String>) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                benchmark_name: benchmark.to_string(),
                num_classes,
                layer_names,
                splits: BTreeMap::new(),
                head: None,
                recording: None,
            },
            tensors: BTreeMap::new(),
        }
    }

    pub fn split(&mut self, id: &str, kind: SplitKind, phase: Phase) -> &mut Self {
        self.manifest.splits.insert(
            id.to_string(),
            SplitEntry {
                kind,
                phase,
                sample_count: 0,
                tensors: BTreeMap::new(),
            },
        );
        self
    }

    /// Adds a tensor for a role of an existing split. The split's sample count
    /// follows the leading dimension (the second one for dropout passes).
    pub fn put(&mut self, split: &str, role: TensorRole, tensor: Tensor) -> Result<&mut Self> {
        let file = self.file_name(&format!("{split}.{role}"));
        let entry = self
            .manifest
            .splits
            .get_mut(split)
            .ok_or_else(|| Error::InvalidInput(format!("unknown split {split}")))?;
        let axis = usize::from(role == TensorRole::DropoutLogits);
        if let Some(&n) = tensor.shape().get(axis) {
            entry.sample_count = n;
        }
        entry.tensors.insert(role.to_string(), file.clone());
        self.tensors.insert(file, tensor);
        Ok(self)
    }

    pub fn head(&mut self, head: &ClassifierHead) -> &mut Self {
        let weight = self.file_name("head.weight");
        let bias = self.file_name("head.bias");
        self.tensors.insert(weight.clone(), Tensor::from_matrix_f32(head.weight.view()));
        self.tensors.insert(
            bias.clone(),
            Tensor::f32(vec![head.bias.len()], head.bias.iter().map(|&x| x as f32).collect())
                .expect("vector shape"),
        );
        self.manifest.head = Some(HeadRef { weight, bias });
        self
    }

    pub fn recording(&mut self, recording: Recording) -> &mut Self {
        self.manifest.recording = Some(recording);
        self
    }

    fn file_name(&self, stem: &str) -> String {
        let clean: String = stem
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
            .collect();
        let mut name = format!("{clean}.oodt");
        let mut i = 1;
        while self.tensors.contains_key(&name) {
            name = format!("{clean}.{i}.oodt");
            i += 1;
        }
        name
    }

    pub fn finish(self) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
        validate_parts(&self.manifest, &self.tensors)?;
        Ok((self.manifest, self.tensors))
    }

    pub fn build(self) -> Result<FeatureBundle> {
        let (m, t) = self.finish()?;
        FeatureBundle::from_parts(m, t)
    }

    pub fn write(self, dir: impl AsRef<Path>) -> Result<()> {
        let (m, t) = self.finish()?;
        write_bundle(&m, &t, dir)
    }
}
