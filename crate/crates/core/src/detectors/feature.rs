use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{DetectorParams, Method, Metric};
use super::state::DetectorState;
use super::{class_means, per_sample, require_labels, sign, Evidence, FitContext, Needs};
use crate::error::{Error, Result};
use crate::numerics::stats::{argmax, dot, euclidean, l2_normalize, norm};
use crate::numerics::{column_mean, covariance, logistic_fit, sym_eig, Centering, RidgeCholesky};
use crate::refmodel::{Capability, ModelAdapter, INPUT_LAYER};

/// Ridge penalty of the MDSEns layer combination.
const MDSENS_L2: f64 = 1e-3;

/// Class means and ridge-regularized tied covariance.
pub(crate) struct Gaussian {
    pub means: Array2<f64>,
    pub chol: RidgeCholesky,
}

impl Gaussian {
    pub fn fit(x: ArrayView2<f64>, labels: &[usize], k: usize) -> Result<Self> {
        let means = class_means(x, labels, k, 2, "training")?;
        let cov = covariance(
            x,
            Centering::Groups {
                labels,
                means: means.view(),
            },
        )?;
        Ok(Self {
            chol: RidgeCholesky::new(cov.view())?,
            means,
        })
    }

    fn from_state(st: &DetectorState, prefix: &str) -> Result<Self> {
        Ok(Self {
            means: st.mat(&format!("{prefix}means"))?.to_owned(),
            chol: RidgeCholesky::from_lower(st.mat(&format!("{prefix}chol"))?.to_owned())?,
        })
    }

    fn store(self, st: &mut DetectorState, prefix: &str) {
        st.put_mat(&format!("{prefix}means"), self.means);
        st.put_mat(&format!("{prefix}chol"), self.chol.lower().clone());
    }

    fn distances(&self, z: &[f64]) -> Vec<f64> {
        self.means
            .rows()
            .into_iter()
            .map(|m| {
                let v: Vec<f64> = z.iter().zip(m).map(|(a, b)| a - b).collect();
                self.chol.mahalanobis(&v)
            })
            .collect()
    }

    /// `max_c −d_c(z)` and the minimising class.
    fn confidence(&self, z: &[f64]) -> (f64, usize) {
        let d = self.distances(z);
        let c = (0..d.len()).fold(0, |b, i| if d[i] < d[b] { i } else { b });
        (-d[c], c)
    }

    fn check_dim(&self, d: usize, what: &str) -> Result<()> {
        if self.means.ncols() != d {
            return Err(Error::Shape(format!(
                "{what} has width {d}, state expects {}",
                self.means.ncols()
            )));
        }
        Ok(())
    }
}

/// Mean and the eigenvectors of the `dim` smallest covariance eigenvalues.
pub(crate) struct Subspace {
    pub mean: Array1<f64>,
    /// `D × dim`.
    pub basis: Array2<f64>,
}

impl Subspace {
    pub fn fit(x: ArrayView2<f64>, dim: usize) -> Result<Self> {
        let d = x.ncols();
        if dim < 1 || dim >= d {
            return Err(Error::InvalidParam(format!("dim = {dim} must lie in [1, {}]", d.saturating_sub(1))));
        }
        let mean = column_mean(x);
        let cov = covariance(x, Centering::PooledMean)?;
        let eig = sym_eig(cov.view())?;
        let basis = eig.eigenvectors.slice(ndarray::s![.., ..dim]).to_owned();
        Ok(Self { mean, basis })
    }

    pub fn from_state(st: &DetectorState) -> Result<Self> {
        Ok(Self {
            mean: st.vec("mean")?.to_owned(),
            basis: st.mat("basis")?.to_owned(),
        })
    }

    pub fn store(self, st: &mut DetectorState) {
        st.put_vec("mean", self.mean);
        st.put_mat("basis", self.basis);
    }

    /// `‖Rᵀ(z − μ)‖`.
    pub fn residual_norm(&self, z: ArrayView1<f64>) -> f64 {
        let c = &z - &self.mean;
        self.basis.t().dot(&c).mapv(|v| v * v).sum().sqrt()
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.mean.len() != d {
            return Err(Error::Shape(format!("features have width {d}, state expects {}", self.mean.len())));
        }
        Ok(())
    }
}

/// Default residual size: half the feature width.
pub(crate) fn resolve_dim(p: &mut DetectorParams, d: usize) -> usize {
    *p.dim.get_or_insert((d / 2).max(1))
}

pub(crate) fn normalized_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (i, r) in x.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&Array1::from(l2_normalize(&r.to_vec())));
    }
    out
}

/// Layers combined by MDSEns: every recorded layer except the raw input.
fn ensemble_layers(ctx: &FitContext<'_>) -> Result<Vec<String>> {
    let layers: Vec<String> = ctx
        .source
        .layer_names()
        .into_iter()
        .filter(|l| l != INPUT_LAYER)
        .collect();
    if layers.is_empty() {
        return Err(Error::InsufficientData("MDSEns needs at least one feature layer".into()));
    }
    Ok(layers)
}

/// Per-layer Mahalanobis scores, optionally after an input perturbation
/// that moves each sample toward its closest class mean.
struct LayerScorer<'a> {
    layers: &'a [String],
    gaussians: &'a [Gaussian],
    noise: f64,
    adapter: Option<&'a dyn ModelAdapter>,
}

impl LayerScorer<'_> {
    fn scores(&self, ev: &Evidence) -> Result<Array2<f64>> {
        let views = self
            .layers
            .iter()
            .zip(self.gaussians)
            .map(|(l, g)| {
                let v = ev.layer(l)?;
                g.check_dim(v.ncols(), l)?;
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        let perturbed = if self.noise > 0.0 {
            let adapter = self
                .adapter
                .ok_or_else(|| Error::Capability("MDSEns with noise > 0 needs a model adapter".into()))?;
            adapter.require(Capability::InputGrad)?;
            adapter.require(Capability::Features)?;
            let x = ev
                .input()
                .ok_or_else(|| Error::Capability("MDSEns with noise > 0 needs recorded inputs".into()))?;
            let index: Vec<usize> = self
                .layers
                .iter()
                .map(|l| {
                    adapter
                        .layers()
                        .iter()
                        .position(|d| &d.name == l)
                        .ok_or_else(|| Error::Capability(format!("{} has no layer {l:?}", adapter.name())))
                })
                .collect::<Result<_>>()?;
            Some((adapter, x, index))
        } else {
            None
        };
        let n = ev.len();
        let l = self.layers.len();
        let cols: Vec<Vec<f64>> = (0..l)
            .map(|j| {
                per_sample(n, |i| match &perturbed {
                    None => Ok(self.gaussians[j].confidence(&views[j].row(i).to_vec()).0),
                    Some((adapter, x, index)) => {
                        let xi = x.row(i).to_vec();
                        let h = adapter.capture(&xi)?.features.swap_remove(index[j]);
                        let g = &self.gaussians[j];
                        let (_, c) = g.confidence(&h);
                        let centred: Array1<f64> = Array1::from(h) - g.means.row(c);
                        let cot = g.chol.solve_vec(centred.view()).mapv(|v| -2.0 * v);
                        let grad = adapter.feature_vjp(&xi, &self.layers[j], cot.as_slice().expect("contiguous"))?;
                        let shifted: Vec<f64> = xi.iter().zip(&grad).map(|(x, g)| x + self.noise * sign(*g)).collect();
                        let h2 = adapter.capture(&shifted)?.features.swap_remove(index[j]);
                        Ok(g.confidence(&h2).0)
                    }
                })
            })
            .collect::<Result<_>>()?;
        Ok(Array2::from_shape_fn((n, l), |(i, j)| cols[j][i]))
    }
}

fn fit_mdsens(p: DetectorParams, ctx: &FitContext<'_>) -> Result<DetectorState> {
    let layers = ensemble_layers(ctx)?;
    let noise = p.noise.unwrap_or(0.0);
    let mut needs = Needs::layers(layers.clone());
    needs.auxiliary = noise > 0.0;
    let train = ctx.evidence(ctx.id_train, &needs)?;
    let labels = require_labels(&train, ctx.id_train)?;
    let k = train.num_classes();
    let gaussians = layers
        .iter()
        .map(|l| Gaussian::fit(train.layer(l)?, labels, k).map_err(|e| e.context(format!("layer {l}"))))
        .collect::<Result<Vec<_>>>()?;
    let scorer = LayerScorer {
        layers: &layers,
        gaussians: &gaussians,
        noise,
        adapter: ctx.adapter,
    };
    let (id, ood) = ctx.validation(&needs)?;
    let x = ndarray::concatenate(Axis(0), &[scorer.scores(&id)?.view(), scorer.scores(&ood)?.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let y: Vec<bool> = (0..x.nrows()).map(|i| i < id.len()).collect();
    let model = logistic_fit(x.view(), &y, MDSENS_L2)?;
    let mut st = DetectorState::new(Method::MdsEns, p);
    st.layers = layers;
    for (j, g) in gaussians.into_iter().enumerate() {
        g.store(&mut st, &format!("layer{j}."));
    }
    st.put_vec("weights", model.weights);
    st.put_scalar("intercept", model.intercept);
    Ok(st)
}

pub(super) fn fit(method: Method, mut p: DetectorParams, ctx: &FitContext<'_>) -> Result<DetectorState> {
    if method == Method::MdsEns {
        return fit_mdsens(p, ctx);
    }
    let train = ctx.evidence(ctx.id_train, &Needs::default())?;
    let z = train.z();
    match method {
        Method::Mds | Method::Rmds => {
            let labels = require_labels(&train, ctx.id_train)?;
            let g = Gaussian::fit(z, labels, train.num_classes())?;
            let mut st = DetectorState::new(method, p);
            g.store(&mut st, "");
            if method == Method::Rmds {
                let cov = covariance(z, Centering::PooledMean)?;
                st.put_vec("mean0", column_mean(z));
                st.put_mat("chol0", RidgeCholesky::new(cov.view())?.lower().clone());
            }
            Ok(st)
        }
        Method::Knn => {
            let k = DetectorParams::req_usize(p.k, "k")?;
            if k > z.nrows() {
                return Err(Error::InvalidParam(format!("k = {k} exceeds the bank size {}", z.nrows())));
            }
            let mut st = DetectorState::new(method, p);
            st.put_mat("bank", normalized_rows(z));
            Ok(st)
        }
        Method::She => {
            let labels = require_labels(&train, ctx.id_train)?;
            let f = train.logits();
            let correct: Vec<usize> = (0..labels.len())
                .filter(|&i| argmax(&f.row(i).to_vec()) == labels[i])
                .collect();
            let rows = z.select(Axis(0), &correct);
            let lab: Vec<usize> = correct.iter().map(|&i| labels[i]).collect();
            let templates = class_means(rows.view(), &lab, train.num_classes(), 1, "correctly classified training")?;
            let mut st = DetectorState::new(method, p);
            st.put_mat("templates", templates);
            Ok(st)
        }
        Method::Residual => {
            let dim = resolve_dim(&mut p, z.ncols());
            let sub = Subspace::fit(z, dim)?;
            let mut st = DetectorState::new(method, p);
            sub.store(&mut st);
            Ok(st)
        }
        other => unreachable!("{other} is not a feature method"),
    }
}

fn check_width(expected: usize, ev: &Evidence) -> Result<()> {
    if ev.z().ncols() != expected {
        return Err(Error::Shape(format!(
            "features have width {}, state expects {expected}",
            ev.z().ncols()
        )));
    }
    Ok(())
}

/// Value of the `k`-th smallest entry (1-based).
pub(crate) fn kth_smallest(mut v: Vec<f64>, k: usize) -> f64 {
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

pub(super) fn score(st: &DetectorState, ev: &Evidence, adapter: Option<&dyn ModelAdapter>) -> Result<Vec<f64>> {
    let z = ev.z();
    let n = ev.len();
    let row = |i: usize| z.row(i).to_vec();
    match st.method {
        Method::Mds => {
            let g = Gaussian::from_state(st, "")?;
            g.check_dim(z.ncols(), "features")?;
            per_sample(n, |i| Ok(g.confidence(&row(i)).0))
        }
        Method::Rmds => {
            let g = Gaussian::from_state(st, "")?;
            g.check_dim(z.ncols(), "features")?;
            let mean0 = st.vec("mean0")?;
            let chol0 = RidgeCholesky::from_lower(st.mat("chol0")?.to_owned())?;
            per_sample(n, |i| {
                let zi = row(i);
                let v: Vec<f64> = zi.iter().zip(mean0).map(|(a, b)| a - b).collect();
                Ok(chol0.mahalanobis(&v) + g.confidence(&zi).0)
            })
        }
        Method::MdsEns => {
            let gaussians = (0..st.layers.len())
                .map(|j| Gaussian::from_state(st, &format!("layer{j}.")))
                .collect::<Result<Vec<_>>>()?;
            let w = st.vec("weights")?;
            let b = st.scalar("intercept")?;
            let scorer = LayerScorer {
                layers: &st.layers,
                gaussians: &gaussians,
                noise: st.params.noise.unwrap_or(0.0),
                adapter,
            };
            let s = scorer.scores(ev)?;
            Ok(s.rows().into_iter().map(|r| r.dot(&w) + b).collect())
        }
        Method::Knn => {
            let bank = st.mat("bank")?;
            check_width(bank.ncols(), ev)?;
            let k = DetectorParams::req_usize(st.params.k, "k")?;
            if k > bank.nrows() {
                return Err(Error::InvalidParam(format!("k = {k} exceeds the bank size {}", bank.nrows())));
            }
            per_sample(n, |i| {
                let q = l2_normalize(&row(i));
                let d: Vec<f64> = bank.rows().into_iter().map(|b| euclidean(&q, b.as_slice().expect("contiguous"))).collect();
                Ok(-kth_smallest(d, k))
            })
        }
        Method::She => {
            let t = st.mat("templates")?;
            check_width(t.ncols(), ev)?;
            let metric = st.params.metric.unwrap_or(Metric::Cosine);
            let f = ev.logits();
            per_sample(n, |i| {
                let zi = row(i);
                let s = t.row(argmax(&f.row(i).to_vec())).to_vec();
                Ok(match metric {
                    Metric::Inner => dot(&zi, &s),
                    Metric::Euclid => -euclidean(&zi, &s),
                    Metric::Cosine => dot(&zi, &s) / (norm(&zi).max(1e-12) * norm(&s).max(1e-12)),
                })
            })
        }
        Method::Residual => {
            let sub = Subspace::from_state(st)?;
            sub.check_dim(z.ncols())?;
            per_sample(n, |i| Ok(-sub.residual_norm(z.row(i))))
        }
        other => unreachable!("{other} is not a feature method"),
    }
}
