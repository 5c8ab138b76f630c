//! Post-hoc out-of-distribution detection toolkit.

pub mod bundle;
pub mod detectors;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod refmodel;
pub mod rng;
pub mod runner;
pub mod tuner;

pub use error::{Error, Result};
