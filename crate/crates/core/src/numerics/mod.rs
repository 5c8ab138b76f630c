//! Deterministic numerical kernels shared by detectors and tuning.

pub mod eig;
pub mod linalg;
pub mod logistic;
pub mod stats;
pub mod svd;
pub mod weibull;

pub use eig::{jacobi_eig, sym_eig, tridiagonal_ql_eig, SymEigResult};
pub use linalg::{column_mean, covariance, ridge_solve, Centering, RidgeCholesky, RIDGE_EPS};
pub use logistic::{logistic_fit, logistic_loss, LogisticModel};
pub use stats::{log_sum_exp, percentile, softmax};
pub use svd::{top_singular, SingularTriple};
pub use weibull::{weibull_tail_fit, WeibullModel};
