use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Capability, Capture, LayerDesc, ModelAdapter};
use crate::bundle::{canonical_json, read_tensor, replace_dir, ClassifierHead, Tensor};
use crate::error::{Error, Result};
use crate::numerics::stats::softmax_at;
use crate::rng::SplitMix64;

/// Name of the pseudo-layer whose activation is the raw input.
pub const INPUT_LAYER: &str = "input";
pub const DEFAULT_DROPOUT_P: f64 = 0.5;
pub const DEFAULT_DROPOUT_TIMES: usize = 15;
const MODEL_FILE: &str = "model.json";
const CHECKPOINT_VERSION: u32 = 1;

/// `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "weight has {} rows, bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("layer parameters must be finite".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Sums in index order so repeated evaluations are bit-identical.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim())
            .map(|i| {
                let row = self.weight.row(i);
                let mut s = self.bias[i];
                for (j, &xj) in x.iter().enumerate() {
                    s += row[j] * xj;
                }
                s
            })
            .collect()
    }

    /// `Wᵀ g`.
    fn pullback(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim()];
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.weight[[i, j]] * gi;
            }
        }
        out
    }
}

/// Serialized description of an [`MlpModel`]; the parameters live in tensor files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    /// One name per hidden layer; the last is the penultimate layer.
    pub layer_names: Vec<String>,
    /// Optional `[rows, cols]` reshape per hidden layer.
    pub matrix_views: Vec<Option<[usize; 2]>>,
    pub dropout_p: f64,
    pub dropout_times: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    #[serde(flatten)]
    config: MlpConfig,
}

/// Rectifier network: hidden layers `h ← max(0, W h + b)`, then a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    config: MlpConfig,
    hidden: Vec<DenseLayer>,
    head: DenseLayer,
}

struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl MlpModel {
    pub fn new(config: MlpConfig, hidden: Vec<DenseLayer>, head: DenseLayer) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::InvalidInput("the network needs at least one hidden layer".into()));
        }
        if config.layer_names.len() != hidden.len() || config.matrix_views.len() != hidden.len() {
            return Err(Error::Shape("one name and one matrix view per hidden layer required".into()));
        }
        let mut names = BTreeSet::new();
        for n in &config.layer_names {
            if n.is_empty() || n == INPUT_LAYER || !names.insert(n) {
                return Err(Error::InvalidInput(format!("invalid or repeated layer name {n:?}")));
            }
        }
        if config.num_classes < 2 {
            return Err(Error::InvalidInput("at least two classes required".into()));
        }
        let mut width = config.input_dim;
        for (i, layer) in hidden.iter().enumerate() {
            if layer.in_dim() != width {
                return Err(Error::Shape(format!(
                    "hidden layer {i} expects {} inputs, previous width is {width}",
                    layer.in_dim()
                )));
            }
            width = layer.out_dim();
            if let Some([r, c]) = config.matrix_views[i] {
                if r * c != width {
                    return Err(Error::Shape(format!("matrix view {r}×{c} does not cover width {width}")));
                }
            }
        }
        if head.in_dim() != width || head.out_dim() != config.num_classes {
            return Err(Error::Shape(format!(
                "head is {}×{}, expected {}×{width}",
                head.out_dim(),
                head.in_dim(),
                config.num_classes
            )));
        }
        if !(0.0..1.0).contains(&config.dropout_p) || config.dropout_times == 0 {
            return Err(Error::InvalidParam("dropout p must lie in [0, 1) and times ≥ 1".into()));
        }
        Ok(Self { config, hidden, head })
    }

    /// Gaussian weights with variance `2/fan_in` and small biases, for tests.
    pub fn random(input_dim: usize, widths: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::new(seed);
        let layer = |i: usize, o: usize, rng: &mut SplitMix64| {
            let s = (2.0 / i as f64).sqrt();
            DenseLayer::new(
                Array2::from_shape_fn((o, i), |_| s * rng.standard_normal()),
                Array1::from_shape_fn(o, |_| 0.1 * rng.standard_normal()),
            )
        };
        let mut hidden = Vec::new();
        let mut prev = input_dim;
        for &w in widths {
            hidden.push(layer(prev, w, &mut rng)?);
            prev = w;
        }
        let head = layer(prev, num_classes, &mut rng)?;
        let config = MlpConfig {
            input_dim,
            num_classes,
            layer_names: (0..widths.len()).map(|i| format!("hidden{i}")).collect(),
            matrix_views: vec![None; widths.len()],
            dropout_p: DEFAULT_DROPOUT_P,
            dropout_times: DEFAULT_DROPOUT_TIMES,
            seed,
        };
        Self::new(config, hidden, head)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn hidden(&self) -> &[DenseLayer] {
        &self.hidden
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    /// The final layer as a [`ClassifierHead`].
    pub fn classifier_head(&self) -> ClassifierHead {
        ClassifierHead {
            weight: self.head.weight.clone(),
            bias: self.head.bias.clone(),
        }
    }

    pub fn penultimate_name(&self) -> &str {
        self.config.layer_names.last().expect("non-empty")
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input has width {}, model expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Index of the first hidden layer to apply after `layer`'s output.
    fn resume_index(&self, layer: &str) -> Result<usize> {
        if layer == INPUT_LAYER {
            return Ok(0);
        }
        self.config
            .layer_names
            .iter()
            .position(|n| n == layer)
            .map(|i| i + 1)
            .ok_or_else(|| Error::Shape(format!("unknown layer {layer:?}")))
    }

    fn width_of(&self, resume: usize) -> usize {
        if resume == 0 {
            self.config.input_dim
        } else {
            self.hidden[resume - 1].out_dim()
        }
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut post = Vec::with_capacity(self.hidden.len());
        let mut h = x.to_vec();
        for layer in &self.hidden {
            let a = layer.apply(&h);
            h = a.iter().map(|&v| v.max(0.0)).collect();
            pre.push(a);
            post.push(h.clone());
        }
        let logits = self.head.apply(&h);
        Trace { pre, post, logits }
    }

    fn run_from(&self, resume: usize, feature: &[f64]) -> Vec<f64> {
        let mut h = feature.to_vec();
        for layer in &self.hidden[resume..] {
            h = layer.apply(&h).into_iter().map(|v| v.max(0.0)).collect();
        }
        self.head.apply(&h)
    }

    /// Backpropagates a cotangent on the output of the first `top` hidden
    /// layers down to the input. The rectifier derivative at exactly 0 is 0.
    fn backprop(&self, trace: &Trace, top: usize, mut g: Vec<f64>) -> Vec<f64> {
        for l in (0..top).rev() {
            for (gi, &a) in g.iter_mut().zip(&trace.pre[l]) {
                if a <= 0.0 {
                    *gi = 0.0;
                }
            }
            g = self.hidden[l].pullback(&g);
        }
        g
    }

    /// Keep-mask of dropout pass `pass`: each penultimate unit is dropped
    /// with probability `p`, independently of the sample.
    pub fn dropout_mask(&self, p: f64, seed: u64, pass: usize) -> Vec<bool> {
        let mut rng = SplitMix64::derive(seed, pass as u64);
        (0..self.head.in_dim()).map(|_| rng.next_f64() >= p).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let staging = tempfile::Builder::new()
            .prefix(".oodkit-model-")
            .tempdir_in(parent)
            .map_err(|e| Error::io(parent, e))?;
        let mut files: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, l) in self.hidden.iter().enumerate() {
            files.insert(format!("hidden{i}.weight.oodt"), Tensor::from_matrix_f64(l.weight.view()));
            files.insert(format!("hidden{i}.bias.oodt"), Tensor::f64(vec![l.bias.len()], l.bias.to_vec())?);
        }
        files.insert("head.weight.oodt".into(), Tensor::from_matrix_f64(self.head.weight.view()));
        files.insert("head.bias.oodt".into(), Tensor::f64(vec![self.head.bias.len()], self.head.bias.to_vec())?);
        for (name, t) in &files {
            let p = staging.path().join(name);
            fs::write(&p, t.encode()).map_err(|e| Error::io(&p, e))?;
        }
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
        };
        let json = canonical_json(&serde_json::to_value(&file).expect("config serializes"));
        let p = staging.path().join(MODEL_FILE);
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        replace_dir(staging, dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join(MODEL_FILE);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let file: CheckpointFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("{MODEL_FILE}: {e}")))?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("unsupported model version {}", file.format_version)));
        }
        let layer = |stem: &str| -> Result<DenseLayer> {
            let w = read_tensor(&dir.join(format!("{stem}.weight.oodt")))?;
            let b = read_tensor(&dir.join(format!("{stem}.bias.oodt")))?;
            if w.shape().len() != 2 {
                return Err(Error::Schema(format!("{stem}.weight must be rank 2")));
            }
            DenseLayer::new(w.to_matrix()?, b.to_vector()?)
        };
        let hidden = (0..file.config.layer_names.len())
            .map(|i| layer(&format!("hidden{i}")))
            .collect::<Result<Vec<_>>>()?;
        let head = layer("head")?;
        Self::new(file.config, hidden, head)
    }
}

impl ModelAdapter for MlpModel {
    fn name(&self) -> &str {
        "reference MLP"
    }

    fn capabilities(&self) -> BTreeSet<Capability> {
        [
            Capability::Forward,
            Capability::Features,
            Capability::InputGrad,
            Capability::Dropout,
            Capability::ForwardFrom,
        ]
        .into_iter()
        .collect()
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn layers(&self) -> Vec<LayerDesc> {
        let mut out = vec![LayerDesc {
            name: INPUT_LAYER.into(),
            width: self.config.input_dim,
            matrix_view: None,
        }];
        for (i, l) in self.hidden.iter().enumerate() {
            out.push(LayerDesc {
                name: self.config.layer_names[i].clone(),
                width: l.out_dim(),
                matrix_view: self.config.matrix_views[i].map(|[r, c]| (r, c)),
            });
        }
        out
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).logits)
    }

    fn capture(&self, x: &[f64]) -> Result<Capture> {
        self.check_input(x)?;
        let t = self.trace(x);
        let mut features = vec![x.to_vec()];
        features.extend(t.post);
        Ok(Capture {
            logits: t.logits,
            features,
        })
    }

    fn input_gradient(&self, x: &[f64], class: usize, temperature: f64) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if class >= self.config.num_classes {
            return Err(Error::InvalidInput(format!("class {class} out of range")));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidParam(format!("temperature {temperature} must be positive")));
        }
        let t = self.trace(x);
        let p = softmax_at(&t.logits, temperature);
        let g_logits: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(i, &pi)| (f64::from(u8::from(i == class)) - pi) / temperature)
            .collect();
        let g = self.head.pullback(&g_logits);
        Ok(self.backprop(&t, self.hidden.len(), g))
    }

    fn feature_vjp(&self, x: &[f64], layer: &str, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let resume = self.resume_index(layer)?;
        if cotangent.len() != self.width_of(resume) {
            return Err(Error::Shape(format!("cotangent width {} does not match layer {layer}", cotangent.len())));
        }
        let t = self.trace(x);
        Ok(self.backprop(&t, resume, cotangent.to_vec()))
    }

    fn dropout_logits(&self, x: &[f64], p: f64, times: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParam(format!("dropout probability {p} must lie in [0, 1)")));
        }
        if times == 0 {
            return Err(Error::InvalidParam("dropout needs at least one pass".into()));
        }
        let t = self.trace(x);
        let h = t.post.last().expect("hidden layer");
        let scale = 1.0 / (1.0 - p);
        Ok((0..times)
            .map(|pass| {
                let mask = self.dropout_mask(p, seed, pass);
                let dropped: Vec<f64> = h
                    .iter()
                    .zip(&mask)
                    .map(|(&v, &keep)| if keep { v * scale } else { 0.0 })
                    .collect();
                self.head.apply(&dropped)
            })
            .collect())
    }

    fn forward_from(&self, layer: &str, feature: &[f64]) -> Result<Vec<f64>> {
        let resume = self.resume_index(layer)?;
        let width = self.width_of(resume);
        if feature.len() != width {
            return Err(Error::Shape(format!(
                "layer {layer} has width {width}, feature has {}",
                feature.len()
            )));
        }
        Ok(self.run_from(resume, feature))
    }
}
