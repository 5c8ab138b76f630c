use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Classification,
    Feature,
    Hybrid,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Classification => "classification",
            Family::Feature => "feature",
            Family::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

macro_rules! methods {
    ($($variant:ident => $tag:literal, $display:literal, $family:ident, [$($field:ident),*];)*) => {
        /// The detectors, identified on the command line by their lowercase tags.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum Method {
            $($variant,)*
        }

        impl Method {
            pub const ALL: &'static [Method] = &[$(Method::$variant,)*];

            pub fn tag(self) -> &'static str {
                match self {
                    $(Method::$variant => $tag,)*
                }
            }

            /// Name used in result tables.
            pub fn display_name(self) -> &'static str {
                match self {
                    $(Method::$variant => $display,)*
                }
            }

            pub fn family(self) -> Family {
                match self {
                    $(Method::$variant => Family::$family,)*
                }
            }

            /// Parameter fields this method reads.
            pub fn fields(self) -> &'static [&'static str] {
                match self {
                    $(Method::$variant => &[$(stringify!($field)),*],)*
                }
            }
        }

        impl FromStr for Method {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($tag => Ok(Method::$variant),)*
                    other => Err(Error::InvalidParam(format!("unknown method {other:?}"))),
                }
            }
        }
    };
}

methods! {
    Msp => "msp", "MSP", Classification, [];
    Mls => "mls", "MLS", Classification, [];
    Ebo => "ebo", "EBO", Classification, [temperature];
    Gen => "gen", "GEN", Classification, [gamma, top_m];
    TempScale => "tempscale", "TempScale", Classification, [temperature];
    Klm => "klm", "KLM", Classification, [];
    Odin => "odin", "ODIN", Classification, [temperature, epsilon];
    OpenMax => "openmax", "OpenMax", Classification, [tail, sampling_ratio];
    Dropout => "dropout", "Dropout", Classification, [dropout_p, times, seed];
    Mds => "mds", "MDS", Feature, [];
    MdsEns => "mdsens", "MDSEns", Feature, [noise];
    Rmds => "rmds", "RMDS", Feature, [];
    Knn => "knn", "KNN", Feature, [k];
    She => "she", "SHE", Feature, [metric];
    Residual => "residual", "Residual", Feature, [dim];
    Vim => "vim", "ViM", Hybrid, [dim];
    React => "react", "ReAct", Hybrid, [percentile];
    Ash => "ash", "ASH", Hybrid, [percentile];
    Scale => "scale", "SCALE", Hybrid, [percentile];
    Dice => "dice", "DICE", Hybrid, [percentile];
    NnGuide => "nnguide", "NNGuide", Hybrid, [k, alpha_frac, seed];
    RankFeat => "rankfeat", "RankFeat", Hybrid, [acc, temperature, seed];
    Fdbd => "fdbd", "fDBD", Hybrid, [normalized];
    Relation => "relation", "Relation", Hybrid, [pow, alpha_frac, seed];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Similarity used by SHE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Inner,
    Euclid,
    Cosine,
}

/// Union of every tunable hyperparameter. Unset fields take the method's
/// default when the detector is fitted; the fitted state records the
/// resolved values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percentile: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pow: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_frac: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn bad(field: &str, value: impl fmt::Display, rule: &str) -> Error {
    Error::InvalidParam(format!("{field} = {value} must be {rule}"))
}

fn check_real(field: &str, v: Option<f64>, ok: impl Fn(f64) -> bool, rule: &str) -> Result<()> {
    match v {
        Some(x) if !x.is_finite() || !ok(x) => Err(bad(field, x, rule)),
        _ => Ok(()),
    }
}

fn check_count(field: &str, v: Option<usize>, min: usize) -> Result<()> {
    match v {
        Some(x) if x < min => Err(bad(field, x, &format!(">= {min}"))),
        _ => Ok(()),
    }
}

impl DetectorParams {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::InvalidParam(format!("parameters: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let p: Self = serde_json::from_value(value).map_err(|e| Error::InvalidParam(format!("parameters: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    /// Element-wise bounds, independent of the method.
    pub fn validate(&self) -> Result<()> {
        check_real("temperature", self.temperature, |x| x > 0.0, "> 0")?;
        check_real("gamma", self.gamma, |x| x > 0.0, "> 0")?;
        check_count("top_m", self.top_m, 1)?;
        check_real("percentile", self.percentile, |x| (0.0..=100.0).contains(&x), "in [0, 100]")?;
        check_count("k", self.k, 1)?;
        check_real("epsilon", self.epsilon, |x| x >= 0.0, ">= 0")?;
        check_real("pow", self.pow, |x| x >= 1.0, ">= 1")?;
        check_real("noise", self.noise, |x| x >= 0.0, ">= 0")?;
        check_count("times", self.times, 1)?;
        check_real("dropout_p", self.dropout_p, |x| (0.0..1.0).contains(&x), "in [0, 1)")?;
        check_real("alpha_frac", self.alpha_frac, |x| x > 0.0 && x <= 1.0, "in (0, 1]")?;
        check_count("tail", self.tail, 2)?;
        check_real("sampling_ratio", self.sampling_ratio, |x| x > 0.0 && x <= 1.0, "in (0, 1]")?;
        Ok(())
    }

    /// Names of the fields that are set.
    pub fn set_fields(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($f:ident),*) => { $(if self.$f.is_some() { out.push(stringify!($f)); })* };
        }
        push!(
            temperature, gamma, top_m, percentile, k, epsilon, pow, metric, noise, times, dropout_p, dim,
            alpha_frac, tail, sampling_ratio, acc, normalized, seed
        );
        out
    }

    /// Rejects fields the method does not read.
    pub fn check_method(&self, method: Method) -> Result<()> {
        self.validate()?;
        let allowed = method.fields();
        for f in self.set_fields() {
            if !allowed.contains(&f) {
                return Err(Error::InvalidParam(format!("{method} does not take parameter {f}")));
            }
        }
        Ok(())
    }

    /// Fills in the method defaults that do not depend on data.
    pub(crate) fn with_defaults(&self, method: Method) -> Result<Self> {
        self.check_method(method)?;
        let mut p = self.clone();
        match method {
            Method::Ebo => {
                p.temperature.get_or_insert(1.0);
            }
            Method::Gen => {
                p.gamma.get_or_insert(0.1);
            }
            Method::Odin => {
                p.temperature.get_or_insert(1000.0);
                p.epsilon.get_or_insert(0.0014);
            }
            Method::OpenMax => {
                p.tail.get_or_insert(9);
                p.sampling_ratio.get_or_insert(0.01);
            }
            Method::Dropout => {
                p.dropout_p.get_or_insert(crate::refmodel::DEFAULT_DROPOUT_P);
                p.times.get_or_insert(crate::refmodel::DEFAULT_DROPOUT_TIMES);
                p.seed.get_or_insert(0);
            }
            Method::MdsEns => {
                p.noise.get_or_insert(0.0);
            }
            Method::Knn => {
                p.k.get_or_insert(50);
            }
            Method::She => {
                p.metric.get_or_insert(Metric::Cosine);
            }
            Method::React => {
                p.percentile.get_or_insert(90.0);
            }
            Method::Ash => {
                p.percentile.get_or_insert(90.0);
            }
            Method::Scale => {
                p.percentile.get_or_insert(85.0);
            }
            Method::Dice => {
                p.percentile.get_or_insert(90.0);
            }
            Method::NnGuide => {
                p.k.get_or_insert(10);
                p.alpha_frac.get_or_insert(1.0);
                p.seed.get_or_insert(0);
            }
            Method::RankFeat => {
                p.acc.get_or_insert(false);
                p.temperature.get_or_insert(1.0);
                p.seed.get_or_insert(0);
            }
            Method::Fdbd => {
                p.normalized.get_or_insert(true);
            }
            Method::Relation => {
                p.pow.get_or_insert(8.0);
                p.alpha_frac.get_or_insert(1.0);
                p.seed.get_or_insert(0);
            }
            Method::Msp | Method::Mls | Method::TempScale | Method::Klm | Method::Mds | Method::Rmds => {}
            Method::Residual | Method::Vim => {}
        }
        Ok(p)
    }

    /// Compact `field=value` rendering, sorted by field name.
    pub fn describe(&self) -> String {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(map)) if !map.is_empty() => map
                .iter()
                .map(|(k, v)| format!("{k}={}", v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string())))
                .collect::<Vec<_>>()
                .join(" "),
            _ => "default".to_string(),
        }
    }

    pub(crate) fn req_f64(v: Option<f64>, name: &str) -> Result<f64> {
        v.ok_or_else(|| Error::InvalidParam(format!("{name} is not set")))
    }

    pub(crate) fn req_usize(v: Option<usize>, name: &str) -> Result<usize> {
        v.ok_or_else(|| Error::InvalidParam(format!("{name} is not set")))
    }
}
