use std::collections::BTreeSet;
use std::sync::Arc;

use super::{missing, Capability, LayerDesc, ModelAdapter};
use crate::bundle::{ClassifierHead, FeatureBundle, TensorRole};
use crate::error::{Error, Result};

/// What a bundle alone supports: recorded features, and re-forwarding from
/// the penultimate layer when a classifier head is declared. Recorded dropout
/// and perturbed passes are reached through the bundle's roles, not here.
pub struct RecordedAdapter {
    bundle: Arc<FeatureBundle>,
    head: Option<ClassifierHead>,
}

impl RecordedAdapter {
    pub fn new(bundle: Arc<FeatureBundle>) -> Result<Self> {
        let head = bundle.head()?;
        Ok(Self { bundle, head })
    }

    pub fn bundle(&self) -> &FeatureBundle {
        &self.bundle
    }

    /// True when every listed split recorded the role.
    pub fn recorded(&self, splits: &[&str], role: &TensorRole) -> bool {
        splits.iter().all(|s| self.bundle.has(s, role))
    }
}

impl ModelAdapter for RecordedAdapter {
    fn name(&self) -> &str {
        "recorded bundle"
    }

    fn capabilities(&self) -> BTreeSet<Capability> {
        let mut caps = BTreeSet::from([Capability::Features]);
        if self.head.is_some() {
            caps.insert(Capability::ForwardFrom);
        }
        caps
    }

    fn num_classes(&self) -> usize {
        self.bundle.num_classes()
    }

    fn layers(&self) -> Vec<LayerDesc> {
        let m = self.bundle.manifest();
        m.layer_names
            .iter()
            .map(|name| {
                let role = TensorRole::Features(name.clone());
                let width = m
                    .splits
                    .keys()
                    .find_map(|s| self.bundle.header(s, &role).ok())
                    .map(|h| h.shape[1..].iter().product())
                    .unwrap_or(0);
                LayerDesc {
                    name: name.clone(),
                    width,
                    matrix_view: None,
                }
            })
            .collect()
    }

    fn forward_from(&self, layer: &str, feature: &[f64]) -> Result<Vec<f64>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| missing(Capability::ForwardFrom, self.name()))?;
        if layer != self.bundle.manifest().penultimate() {
            return Err(Error::Capability(format!(
                "recorded evidence can only be re-forwarded from the penultimate layer, not {layer:?}"
            )));
        }
        if feature.len() != head.dim() {
            return Err(Error::Shape(format!(
                "penultimate width is {}, feature has {}",
                head.dim(),
                feature.len()
            )));
        }
        Ok(head.logits(ndarray::ArrayView1::from(feature)).to_vec())
    }
}
