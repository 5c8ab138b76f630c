use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Array3, ArrayView2, Axis};

use crate::bundle::{ClassifierHead, DropoutRecording, FeatureBundle, PerturbationRecording, TensorRole};
use crate::error::{Error, Result};
use crate::refmodel::{ModelAdapter, INPUT_LAYER};

/// Evidence a detector reads beyond penultimate features, logits and labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Needs {
    /// Extra feature layers by name.
    pub layers: Vec<String>,
    /// Every recorded feature layer.
    pub all_layers: bool,
    /// Input features plus recorded dropout and perturbed logits, when present.
    pub auxiliary: bool,
}

impl Needs {
    pub fn layers(layers: Vec<String>) -> Self {
        Self {
            layers,
            ..Default::default()
        }
    }

    pub fn all_layers() -> Self {
        Self {
            all_layers: true,
            auxiliary: true,
            ..Default::default()
        }
    }

    pub fn auxiliary() -> Self {
        Self {
            auxiliary: true,
            ..Default::default()
        }
    }
}

fn check_finite(a: ArrayView2<f64>, what: &str) -> Result<()> {
    if let Some(i) = a.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{what} has a non-finite value in row {}",
            i / a.ncols().max(1)
        )));
    }
    Ok(())
}

/// Per-sample evidence of one split, row-aligned across all arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    penultimate: String,
    layers: BTreeMap<String, Array2<f64>>,
    logits: Array2<f64>,
    labels: Option<Vec<usize>>,
    dropout: Option<(Array3<f64>, DropoutRecording)>,
    perturbed: Option<(Array2<f64>, PerturbationRecording)>,
}

impl Evidence {
    /// Penultimate features `n × D` under the layer name `penultimate`.
    pub fn new(z: Array2<f64>, logits: Array2<f64>) -> Result<Self> {
        Self::named("penultimate", z, logits)
    }

    pub fn named(penultimate: &str, z: Array2<f64>, logits: Array2<f64>) -> Result<Self> {
        if z.nrows() != logits.nrows() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} logit rows",
                z.nrows(),
                logits.nrows()
            )));
        }
        if logits.ncols() < 2 {
            return Err(Error::Shape("logits need at least 2 classes".into()));
        }
        check_finite(z.view(), "penultimate features")?;
        check_finite(logits.view(), "logits")?;
        Ok(Self {
            penultimate: penultimate.to_string(),
            layers: BTreeMap::from([(penultimate.to_string(), z)]),
            logits,
            labels: None,
            dropout: None,
            perturbed: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), self.len())));
        }
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {k} classes")));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_layer(mut self, name: &str, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.len() {
            return Err(Error::Shape(format!("layer {name} has {} rows, expected {}", features.nrows(), self.len())));
        }
        if name == self.penultimate {
            return Err(Error::InvalidInput(format!("layer {name} is already the penultimate layer")));
        }
        check_finite(features.view(), name)?;
        self.layers.insert(name.to_string(), features);
        Ok(self)
    }

    /// Recorded dropout passes, `times × n × K`.
    pub fn with_dropout(mut self, passes: Array3<f64>, recording: DropoutRecording) -> Result<Self> {
        let (t, n, k) = passes.dim();
        if n != self.len() || k != self.num_classes() || t != recording.times {
            return Err(Error::Shape(format!(
                "dropout passes {t}x{n}x{k} do not match {} passes of {}x{}",
                recording.times,
                self.len(),
                self.num_classes()
            )));
        }
        if passes.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dropout logits are not finite".into()));
        }
        self.dropout = Some((passes, recording));
        Ok(self)
    }

    pub fn with_perturbed(mut self, logits: Array2<f64>, recording: PerturbationRecording) -> Result<Self> {
        if logits.dim() != self.logits.dim() {
            return Err(Error::Shape("perturbed logits must match the logits' shape".into()));
        }
        check_finite(logits.view(), "perturbed logits")?;
        self.perturbed = Some((logits, recording));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }

    pub fn penultimate_name(&self) -> &str {
        &self.penultimate
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.layers[&self.penultimate].view()
    }

    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.logits.view()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn layer(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        self.layers
            .get(name)
            .map(|a| a.view())
            .ok_or_else(|| Error::Capability(format!("no recorded features for layer {name:?}")))
    }

    pub fn input(&self) -> Option<ArrayView2<'_, f64>> {
        self.layers.get(INPUT_LAYER).map(|a| a.view())
    }

    pub fn dropout(&self) -> Option<(&Array3<f64>, &DropoutRecording)> {
        self.dropout.as_ref().map(|(a, r)| (a, r))
    }

    pub fn perturbed(&self) -> Option<(&Array2<f64>, &PerturbationRecording)> {
        self.perturbed.as_ref().map(|(a, r)| (a, r))
    }

    /// Stacks splits row-wise. Arrays present in only some parts are dropped.
    pub fn concat(parts: &[Evidence]) -> Result<Evidence> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InsufficientData("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.penultimate != first.penultimate || p.num_classes() != first.num_classes()) {
            return Err(Error::Shape("evidence parts disagree on layout".into()));
        }
        let stack2 = |get: &dyn Fn(&Evidence) -> Option<ArrayView2<'_, f64>>| -> Result<Option<Array2<f64>>> {
            let views: Option<Vec<_>> = parts.iter().map(get).collect();
            match views {
                Some(v) => concatenate(Axis(0), &v)
                    .map(Some)
                    .map_err(|e| Error::Shape(format!("cannot stack evidence: {e}"))),
                None => Ok(None),
            }
        };
        let mut layers = BTreeMap::new();
        for name in first.layers.keys() {
            if let Some(a) = stack2(&|p| p.layers.get(name).map(|a| a.view()))? {
                layers.insert(name.clone(), a);
            }
        }
        let logits = stack2(&|p| Some(p.logits.view()))?.expect("logits always present");
        let labels = parts
            .iter()
            .map(|p| p.labels.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        let perturbed = match parts.iter().map(|p| p.perturbed.as_ref()).collect::<Option<Vec<_>>>() {
            Some(v) if v.iter().all(|(_, r)| r == &v[0].1) => {
                let views: Vec<_> = v.iter().map(|(a, _)| a.view()).collect();
                Some((
                    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?,
                    v[0].1.clone(),
                ))
            }
            _ => None,
        };
        let dropout = match parts.iter().map(|p| p.dropout.as_ref()).collect::<Option<Vec<_>>>() {
            Some(v) if v.iter().all(|(_, r)| r == &v[0].1) => {
                let views: Vec<_> = v.iter().map(|(a, _)| a.view()).collect();
                Some((
                    concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?,
                    v[0].1.clone(),
                ))
            }
            _ => None,
        };
        Ok(Evidence {
            penultimate: first.penultimate.clone(),
            layers,
            logits,
            labels,
            dropout,
            perturbed,
        })
    }
}

/// Where fitting and scoring read per-split evidence from.
pub trait EvidenceSource: Sync {
    fn evidence(&self, split: &str, needs: &Needs) -> Result<Evidence>;

    /// Classifier head mapping penultimate features to logits, if known.
    fn head(&self) -> Result<Option<ClassifierHead>>;

    /// Feature layers in forward order; the last is the penultimate layer.
    fn layer_names(&self) -> Vec<String>;
}

impl EvidenceSource for FeatureBundle {
    fn evidence(&self, split: &str, needs: &Needs) -> Result<Evidence> {
        let m = self.manifest();
        let pen = m.penultimate();
        let mut ev = Evidence::named(pen, self.penultimate(split)?, self.logits(split)?)?;
        if let Some(labels) = self.labels(split)? {
            ev = ev.with_labels(labels)?;
        }
        let mut wanted: Vec<String> = if needs.all_layers {
            m.layer_names
                .iter()
                .filter(|l| self.has(split, &TensorRole::Features((*l).clone())))
                .cloned()
                .collect()
        } else {
            needs.layers.clone()
        };
        if needs.auxiliary && self.has(split, &TensorRole::Features(INPUT_LAYER.into())) {
            wanted.push(INPUT_LAYER.into());
        }
        for layer in wanted {
            if layer != pen && !ev.has_layer(&layer) {
                let f = self.features(split, &layer)?;
                ev = ev.with_layer(&layer, f)?;
            }
        }
        if needs.auxiliary {
            let rec = m.recording.clone().unwrap_or_default();
            if let (Some(r), true) = (rec.dropout, self.has(split, &TensorRole::DropoutLogits)) {
                ev = ev.with_dropout(self.dropout_logits(split)?, r)?;
            }
            if let (Some(r), true) = (rec.perturbation, self.has(split, &TensorRole::PerturbedLogits)) {
                ev = ev.with_perturbed(self.perturbed_logits(split)?, r)?;
            }
        }
        Ok(ev)
    }

    fn head(&self) -> Result<Option<ClassifierHead>> {
        FeatureBundle::head(self)
    }

    fn layer_names(&self) -> Vec<String> {
        self.manifest().layer_names.clone()
    }
}

/// Evidence held in memory, at full f64 precision.
#[derive(Debug, Clone)]
pub struct MemorySource {
    layer_names: Vec<String>,
    head: Option<ClassifierHead>,
    splits: BTreeMap<String, Evidence>,
}

impl MemorySource {
    pub fn new(layer_names: Vec<String>, head: Option<ClassifierHead>) -> Self {
        Self {
            layer_names,
            head,
            splits: BTreeMap::new(),
        }
    }

    pub fn with_split(mut self, name: &str, ev: Evidence) -> Self {
        self.splits.insert(name.to_string(), ev);
        self
    }

    /// Runs every input through `adapter` and records all its layers.
    pub fn from_adapter(
        adapter: &dyn ModelAdapter,
        head: Option<ClassifierHead>,
        splits: Vec<(String, Array2<f64>, Option<Vec<usize>>)>,
    ) -> Result<Self> {
        let layers = adapter.layers();
        let names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
        let pen = names
            .last()
            .ok_or_else(|| Error::Shape(format!("{} declares no layers", adapter.name())))?
            .clone();
        let mut out = Self::new(names.clone(), head);
        for (split, x, labels) in splits {
            let n = x.nrows();
            let caps = x
                .rows()
                .into_iter()
                .map(|r| adapter.capture(&r.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let k = adapter.num_classes();
            let logits = Array2::from_shape_fn((n, k), |(i, c)| caps[i].logits[c]);
            let layer = |j: usize| Array2::from_shape_fn((n, layers[j].width), |(i, c)| caps[i].features[j][c]);
            let mut ev = Evidence::named(&pen, layer(names.len() - 1), logits)?;
            for j in 0..names.len() - 1 {
                ev = ev.with_layer(&names[j], layer(j))?;
            }
            if let Some(l) = labels {
                ev = ev.with_labels(l)?;
            }
            out.splits.insert(split, ev);
        }
        Ok(out)
    }

    pub fn split(&self, name: &str) -> Result<&Evidence> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::Schema(format!("unknown split {name:?}")))
    }
}

impl EvidenceSource for MemorySource {
    fn evidence(&self, split: &str, _needs: &Needs) -> Result<Evidence> {
        self.split(split).cloned()
    }

    fn head(&self) -> Result<Option<ClassifierHead>> {
        Ok(self.head.clone())
    }

    fn layer_names(&self) -> Vec<String> {
        self.layer_names.clone()
    }
}
