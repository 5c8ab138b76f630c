use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by how a caller should react: validation problems
/// (bad files, bad parameters, bad data), capability gaps (a detector needs
/// model access the evidence cannot provide) and numerical breakdowns.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("classifier head does not reproduce recorded logits (max relative deviation {deviation:.3e})")]
    HeadMismatch { deviation: f64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("missing capability: {0}")]
    Capability(String),
    #[error("matrix is singular even after ridge regularization")]
    SingularMatrix,
    #[error("no convergence: {0}")]
    Convergence(String),
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("degenerate subspace: {0}")]
    DegenerateSubspace(String),
    #[error("degenerate activation: {0}")]
    DegenerateActivation(String),
    #[error("degenerate classifier head: {0}")]
    DegenerateHead(String),
    #[error("every activation was pruned")]
    AllPruned,
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a human-readable location such as `(knn, near_ood_test)`.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_capability(&self) -> bool {
        matches!(self.root(), Error::Capability(_))
    }

    /// Errors caused by malformed inputs, files or parameters rather than by
    /// the environment or a numerical breakdown.
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::Format(_)
                | Error::Schema(_)
                | Error::HeadMismatch { .. }
                | Error::Shape(_)
                | Error::InvalidInput(_)
                | Error::InvalidParam(_)
                | Error::InsufficientData(_)
                | Error::DegenerateLabels
                | Error::DegenerateSample(_)
                | Error::DegenerateSubspace(_)
                | Error::DegenerateActivation(_)
                | Error::DegenerateHead(_)
                | Error::AllPruned
        )
    }
}
