use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::bundle::{
    BundleBuilder, ClassifierHead, DropoutRecording, FeatureBundle, PerturbationRecording, Phase, Recording, SplitKind,
    Tensor, TensorRole,
};
use crate::error::{Error, Result};
use crate::numerics::stats::argmax;
use crate::refmodel::{DenseLayer, MlpConfig, MlpModel, ModelAdapter, INPUT_LAYER};
use crate::rng::SplitMix64;

/// ODIN defaults under which perturbed logits are recorded.
const REC_TEMPERATURE: f64 = 1000.0;
const REC_EPSILON: f64 = 0.0014;
/// Dropout defaults under which dropout passes are recorded.
const REC_DROPOUT_P: f64 = 0.5;
const REC_DROPOUT_TIMES: usize = 15;
const REC_DROPOUT_SEED: u64 = 0;

/// Desk-scale benchmark with a known geometry.
///
/// Class `c` is a unit Gaussian at `separation·e_c`. The near-OOD cluster sits
/// at `overconfidence·separation·e_0 + semantic·e_K`, deeper in class 0's logit
/// cone than class 0 itself but off the class subspace. The far-OOD cluster is
/// offset by `far` along `e_{K+1}`. Covariate-shifted ID keeps the class means,
/// adds `covariate·u` for a fixed unit vector `u`, and scales the noise by
/// `1 + covariate/10`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub benchmark: String,
    pub dim: usize,
    pub classes: usize,
    /// Samples per split.
    pub n: usize,
    pub separation: f64,
    pub covariate: f64,
    pub semantic: f64,
    pub far: f64,
    pub overconfidence: f64,
    /// Logit gain of the linear head.
    pub logit_scale: f64,
    /// Hidden-layer bias keeping the rectifiers in their linear range.
    pub activation_offset: f64,
    /// Record dropout passes and perturbed logits at the detector defaults.
    pub record_auxiliary: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            benchmark: "synthetic".into(),
            dim: 16,
            classes: 3,
            n: 2000,
            separation: 4.0,
            covariate: 1.0,
            semantic: 6.0,
            far: 20.0,
            overconfidence: 1.5,
            logit_scale: 1.0,
            activation_offset: 30.0,
            record_auxiliary: true,
        }
    }
}

impl SynthSpec {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let s: Self = serde_json::from_slice(bytes).map_err(|e| Error::InvalidParam(format!("synth spec: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.classes < 2 {
            return bad("at least two classes required".into());
        }
        if self.dim < self.classes + 2 {
            return bad(format!("dim must be at least classes + 2 = {}", self.classes + 2));
        }
        if self.n < 2 {
            return bad("n must be at least 2".into());
        }
        for (name, v) in [
            ("separation", self.separation),
            ("covariate", self.covariate),
            ("semantic", self.semantic),
            ("far", self.far),
            ("overconfidence", self.overconfidence),
            ("activation_offset", self.activation_offset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return bad("logit_scale must be positive".into());
        }
        if !(self.far > self.semantic && self.semantic > self.covariate) {
            return bad(format!(
                "offsets must satisfy far > semantic > covariate, got {} > {} > {}",
                self.far, self.semantic, self.covariate
            ));
        }
        Ok(())
    }
}

/// A generated bundle and the network that produced it.
pub struct SynthBenchmark {
    pub bundle: FeatureBundle,
    pub model: MlpModel,
}

impl SynthBenchmark {
    /// Writes the bundle to `dir` and the network to `dir/model`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.bundle.write(dir)?;
        self.model.save(dir.join(MODEL_DIR))
    }
}

/// Subdirectory of a written synthetic benchmark holding the network.
pub const MODEL_DIR: &str = "model";

#[derive(Clone, Copy)]
enum Cluster {
    Class,
    Covariate,
    Semantic,
    Far,
}

const SPLITS: [(&str, SplitKind, Phase, Cluster); 7] = [
    ("id_train", SplitKind::IdTrain, Phase::Train, Cluster::Class),
    ("id_val", SplitKind::IdVal, Phase::Val, Cluster::Class),
    ("id_test", SplitKind::IdTest, Phase::Test, Cluster::Class),
    ("csid_test", SplitKind::Csid, Phase::Test, Cluster::Covariate),
    ("near_ood_val", SplitKind::NearOod, Phase::Val, Cluster::Semantic),
    ("near_ood_test", SplitKind::NearOod, Phase::Test, Cluster::Semantic),
    ("far_ood_test", SplitKind::FarOod, Phase::Test, Cluster::Far),
];

fn orthogonal(d: usize, rng: &mut SplitMix64) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            for j in 0..i {
                let p: f64 = (0..d).map(|t| v[t] * q[[j, t]]).sum();
                for t in 0..d {
                    v[t] -= p * q[[j, t]];
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                for t in 0..d {
                    q[[i, t]] = v[t] / n;
                }
                break;
            }
        }
    }
    q
}

fn build_model(spec: &SynthSpec, q: &Array2<f64>) -> Result<MlpModel> {
    let (d, k) = (spec.dim, spec.classes);
    let beta = spec.activation_offset;
    let block = DenseLayer::new(q.clone(), Array1::from_elem(d, beta))?;
    let qt = q.t().to_owned();
    let back_bias = Array1::from_shape_fn(d, |i| beta - beta * qt.row(i).sum());
    let pen = DenseLayer::new(qt, back_bias)?;
    let mut w = Array2::zeros((k, d));
    for c in 0..k {
        w[[c, c]] = spec.logit_scale;
    }
    let head = DenseLayer::new(w, Array1::from_elem(k, -spec.logit_scale * beta))?;
    let side = (d as f64).sqrt().round() as usize;
    let view = (side * side == d).then_some([side, side]);
    let config = MlpConfig {
        input_dim: d,
        num_classes: k,
        layer_names: vec!["block".into(), "penultimate".into()],
        matrix_views: vec![view; 2],
        dropout_p: REC_DROPOUT_P,
        dropout_times: REC_DROPOUT_TIMES,
        seed: spec.seed,
    };
    MlpModel::new(config, vec![block, pen], head)
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

fn sample(spec: &SynthSpec, cluster: Cluster, u: &[f64], rng: &mut SplitMix64) -> (Array2<f64>, Vec<usize>) {
    let (n, d, k) = (spec.n, spec.dim, spec.classes);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let noise_scale = match cluster {
        Cluster::Covariate => 1.0 + spec.covariate / 10.0,
        _ => 1.0,
    };
    let x = Array2::from_shape_fn((n, d), |(i, j)| {
        let mean = match cluster {
            Cluster::Class => spec.separation * f64::from(u8::from(j == labels[i])),
            Cluster::Covariate => spec.separation * f64::from(u8::from(j == labels[i])) + spec.covariate * u[j],
            Cluster::Semantic => {
                if j == 0 {
                    spec.overconfidence * spec.separation
                } else if j == k {
                    spec.semantic
                } else {
                    0.0
                }
            }
            Cluster::Far => spec.far * f64::from(u8::from(j == k + 1)),
        };
        round32(mean + noise_scale * rng.standard_normal())
    });
    (x, labels)
}

fn matrix_f32(rows: &[Vec<f64>]) -> Tensor {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    Tensor::f32(vec![n, d], rows.iter().flatten().map(|&v| v as f32).collect()).expect("rectangular rows")
}

/// Generates the benchmark. The same spec always yields bit-identical bundles.
pub fn synth_benchmark(spec: &SynthSpec) -> Result<SynthBenchmark> {
    spec.validate()?;
    let mut rng = SplitMix64::derive(spec.seed, 0);
    let q = orthogonal(spec.dim, &mut rng);
    let mut u: Vec<f64> = (0..spec.dim).map(|_| rng.standard_normal()).collect();
    let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= un);
    let model = build_model(spec, &q)?;
    let full = model.classifier_head();
    let head = ClassifierHead {
        weight: full.weight.mapv(round32),
        bias: full.bias.mapv(round32),
    };
    let layer_names: Vec<String> = model.layers().into_iter().map(|l| l.name).collect();
    let mut b = BundleBuilder::new(&spec.benchmark, spec.classes, layer_names.clone());
    b.head(&head);
    if spec.record_auxiliary {
        b.recording(Recording {
            dropout: Some(DropoutRecording {
                p: REC_DROPOUT_P,
                times: REC_DROPOUT_TIMES,
                seed: REC_DROPOUT_SEED,
            }),
            perturbation: Some(PerturbationRecording {
                temperature: REC_TEMPERATURE,
                epsilon: REC_EPSILON,
            }),
        });
    }
    for (i, (name, kind, phase, cluster)) in SPLITS.iter().enumerate() {
        let mut srng = SplitMix64::derive(spec.seed, 1 + i as u64);
        let (x, labels) = sample(spec, *cluster, &u, &mut srng);
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        let captures = rows.iter().map(|r| model.capture(r)).collect::<Result<Vec<_>>>()?;
        b.split(name, *kind, *phase);
        for (l, lname) in layer_names.iter().enumerate() {
            let feats: Vec<Vec<f64>> = captures.iter().map(|c| c.features[l].clone()).collect();
            b.put(name, TensorRole::Features(lname.clone()), matrix_f32(&feats))?;
        }
        let z = Array2::from_shape_fn((spec.n, spec.dim), |(s, j)| round32(*captures[s].features.last().expect("penultimate").get(j).expect("width")));
        let logits = head.logits_batch(z.view());
        b.put(name, TensorRole::Logits, Tensor::from_matrix_f32(logits.view()))?;
        if !matches!(cluster, Cluster::Semantic | Cluster::Far) {
            b.put(name, TensorRole::Labels, Tensor::from_labels(&labels))?;
        }
        if spec.record_auxiliary {
            let mut drop = Array3::<f64>::zeros((REC_DROPOUT_TIMES, spec.n, spec.classes));
            let mut pert = Array2::<f64>::zeros((spec.n, spec.classes));
            for (s, r) in rows.iter().enumerate() {
                for (t, pass) in model.dropout_logits(r, REC_DROPOUT_P, REC_DROPOUT_TIMES, REC_DROPOUT_SEED)?.into_iter().enumerate() {
                    for (c, v) in pass.into_iter().enumerate() {
                        drop[[t, s, c]] = v;
                    }
                }
                let f = model.forward(r)?;
                let g = model.input_gradient(r, argmax(&f), REC_TEMPERATURE)?;
                let shifted: Vec<f64> = r.iter().zip(&g).map(|(x, g)| x + REC_EPSILON * crate::detectors::sign(*g)).collect();
                for (c, v) in model.forward(&shifted)?.into_iter().enumerate() {
                    pert[[s, c]] = v;
                }
            }
            let dshape = drop.shape().to_vec();
            b.put(
                name,
                TensorRole::DropoutLogits,
                Tensor::f32(dshape, drop.iter().map(|&v| v as f32).collect()).expect("shape"),
            )?;
            b.put(name, TensorRole::PerturbedLogits, Tensor::from_matrix_f32(pert.view()))?;
        }
    }
    debug_assert_eq!(layer_names.first().map(String::as_str), Some(INPUT_LAYER));
    Ok(SynthBenchmark {
        bundle: b.build()?,
        model,
    })
}
