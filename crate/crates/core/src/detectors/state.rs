use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Ix1, Ix2};
use serde::{Deserialize, Serialize};

use super::params::{DetectorParams, Method};
use crate::bundle::{canonical_json, read_tensor, Tensor, TensorData};
use crate::error::{Error, Result};

pub const STATE_FILE: &str = "state.json";
const STATE_VERSION: u32 = 1;

/// Fitted detector: method, resolved parameters and named payload arrays.
///
/// Nothing in here changes after `fit`; scoring only reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub method: Method,
    pub params: DetectorParams,
    /// Layer names the payload refers to (MDSEns).
    pub layers: Vec<String>,
    pub scalars: BTreeMap<String, f64>,
    pub arrays: BTreeMap<String, ArrayD<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateManifest {
    format_version: u32,
    method: Method,
    params: DetectorParams,
    layers: Vec<String>,
    scalars: BTreeMap<String, f64>,
    /// Payload role → tensor file.
    arrays: BTreeMap<String, String>,
}

fn file_for(role: &str) -> String {
    format!("{role}.oodt")
}

impl DetectorState {
    pub(crate) fn new(method: Method, params: DetectorParams) -> Self {
        Self {
            method,
            params,
            layers: Vec::new(),
            scalars: BTreeMap::new(),
            arrays: BTreeMap::new(),
        }
    }

    pub(crate) fn put_scalar(&mut self, name: &str, v: f64) {
        self.scalars.insert(name.to_string(), v);
    }

    pub(crate) fn put_vec(&mut self, name: &str, v: Array1<f64>) {
        self.arrays.insert(name.to_string(), v.into_dyn());
    }

    pub(crate) fn put_mat(&mut self, name: &str, m: Array2<f64>) {
        self.arrays.insert(name.to_string(), m.into_dyn());
    }

    fn array(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Schema(format!("{} state has no {name:?} array", self.method)))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("{} state has no {name:?} scalar", self.method)))
    }

    pub fn vec(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        self.array(name)?
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Schema(format!("{} state array {name:?} is not a vector", self.method)))
    }

    pub fn mat(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        self.array(name)?
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Schema(format!("{} state array {name:?} is not a matrix", self.method)))
    }

    fn manifest(&self) -> StateManifest {
        StateManifest {
            format_version: STATE_VERSION,
            method: self.method,
            params: self.params.clone(),
            layers: self.layers.clone(),
            scalars: self.scalars.clone(),
            arrays: self.arrays.keys().map(|k| (k.clone(), file_for(k))).collect(),
        }
    }

    fn tensor_of(a: &ArrayD<f64>) -> Tensor {
        let data: Vec<f64> = a.iter().copied().collect();
        Tensor::f64(a.shape().to_vec(), data).expect("shape matches data")
    }

    /// The exact bytes [`save`](Self::save) writes, in file order.
    pub fn to_bytes(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let value = serde_json::to_value(self.manifest()).map_err(|e| Error::Schema(e.to_string()))?;
        let mut out = vec![(STATE_FILE.to_string(), canonical_json(&value).into_bytes())];
        for (k, a) in &self.arrays {
            out.push((file_for(k), Self::tensor_of(a).encode()));
        }
        Ok(out)
    }

    /// Writes `state.json` plus one f64 tensor per payload array, replacing `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let staging = tempfile::Builder::new()
            .prefix(".state-staging")
            .tempdir_in(parent)
            .map_err(|e| Error::io(parent, e))?;
        for (name, bytes) in self.to_bytes()? {
            let path = staging.path().join(&name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        }
        crate::bundle::replace_dir(staging, dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(STATE_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: StateManifest =
            serde_json::from_slice(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if m.format_version != STATE_VERSION {
            return Err(Error::Schema(format!("unsupported state version {}", m.format_version)));
        }
        m.params.check_method(m.method)?;
        let mut arrays = BTreeMap::new();
        for (role, file) in &m.arrays {
            if file != &file_for(role) || file.contains('/') || file.contains('\\') {
                return Err(Error::Schema(format!("state array {role:?} has unexpected file {file:?}")));
            }
            let t = read_tensor(&dir.join(file))?;
            let TensorData::F64(data) = t.data() else {
                return Err(Error::Schema(format!("state array {role:?} must be f64")));
            };
            let a = ArrayD::from_shape_vec(t.shape().to_vec(), data.clone())
                .map_err(|e| Error::Schema(format!("state array {role:?}: {e}")))?;
            arrays.insert(role.clone(), a);
        }
        Ok(Self {
            method: m.method,
            params: m.params,
            layers: m.layers,
            scalars: m.scalars,
            arrays,
        })
    }
}
