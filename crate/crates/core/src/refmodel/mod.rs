//! Model access for detectors that need more than recorded evidence.
//!
//! [`ModelAdapter`] is the capability contract; [`MlpModel`] is a small
//! rectifier network that implements all of it, and [`RecordedAdapter`]
//! exposes what a bundle alone can provide.

mod mlp;
mod recorded;

use std::collections::BTreeSet;
use std::fmt;

pub use mlp::{DenseLayer, MlpConfig, MlpModel, INPUT_LAYER, DEFAULT_DROPOUT_P, DEFAULT_DROPOUT_TIMES};
pub use recorded::RecordedAdapter;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Capability {
    Forward,
    Features,
    InputGrad,
    Dropout,
    ForwardFrom,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Forward => "forward",
            Capability::Features => "features",
            Capability::InputGrad => "input_grad",
            Capability::Dropout => "dropout",
            Capability::ForwardFrom => "forward_from",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub width: usize,
    /// `rows × cols` reshape of the flat activation, when one is declared.
    pub matrix_view: Option<(usize, usize)>,
}

/// Logits and per-layer activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub logits: Vec<f64>,
    /// Aligned with [`ModelAdapter::layers`].
    pub features: Vec<Vec<f64>>,
}

pub(crate) fn missing(cap: Capability, who: &str) -> Error {
    Error::Capability(format!("{who} does not provide the {cap} capability"))
}

/// Capability contract between detectors and a model.
///
/// Every method has a default that fails with [`Error::Capability`], so an
/// adapter only implements what it supports and advertises it through
/// [`capabilities`](ModelAdapter::capabilities).
pub trait ModelAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> BTreeSet<Capability>;

    fn num_classes(&self) -> usize;

    /// Capture points in forward order; the last is the penultimate layer.
    fn layers(&self) -> Vec<LayerDesc>;

    fn has(&self, cap: Capability) -> bool {
        self.capabilities().contains(&cap)
    }

    fn require(&self, cap: Capability) -> Result<()> {
        if self.has(cap) {
            Ok(())
        } else {
            Err(missing(cap, self.name()))
        }
    }

    fn layer(&self, name: &str) -> Result<LayerDesc> {
        self.layers()
            .into_iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Shape(format!("{} has no layer {name:?}", self.name())))
    }

    fn forward(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Err(missing(Capability::Forward, self.name()))
    }

    fn capture(&self, _x: &[f64]) -> Result<Capture> {
        Err(missing(Capability::Features, self.name()))
    }

    /// Gradient of `log softmax_c(f(x)/T)` with respect to the input.
    fn input_gradient(&self, _x: &[f64], _class: usize, _temperature: f64) -> Result<Vec<f64>> {
        Err(missing(Capability::InputGrad, self.name()))
    }

    /// Vector-Jacobian product: `∂⟨g, h_ℓ(x)⟩/∂x` for the activation of `layer`.
    fn feature_vjp(&self, _x: &[f64], _layer: &str, _cotangent: &[f64]) -> Result<Vec<f64>> {
        Err(missing(Capability::InputGrad, self.name()))
    }

    /// `times` stochastic passes; pass `i` depends only on `(seed, i)`.
    fn dropout_logits(&self, _x: &[f64], _p: f64, _times: usize, _seed: u64) -> Result<Vec<Vec<f64>>> {
        Err(missing(Capability::Dropout, self.name()))
    }

    /// Continues the forward pass from the output of `layer`.
    fn forward_from(&self, _layer: &str, _feature: &[f64]) -> Result<Vec<f64>> {
        Err(missing(Capability::ForwardFrom, self.name()))
    }
}
