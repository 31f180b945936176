//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for simulation, graph, estimator and harness failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A physical state or input contains non-finite or otherwise invalid values.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// The communication or physical graph violates a connectivity/shape requirement.
    #[error("topology error: {0}")]
    Topology(String),

    /// A configuration value is inconsistent or references a nonexistent device.
    #[error("config error: {0}")]
    Config(String),

    /// The integrator produced a non-finite value.
    #[error("numerical divergence at t={t}s (state index {index})")]
    NumericalDivergence { t: f64, index: usize },

    /// Spanning-tree enumeration exceeded the configured cap.
    #[error("enumeration cap exceeded (cap = {cap})")]
    CapExceeded { cap: usize },

    /// Dataset-level failure (too few rows, bad shape, low yield).
    #[error("data error: {0}")]
    Data(String),

    /// Feature/parameter dimensions do not chain.
    #[error("shape error: {0}")]
    Shape(String),

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    /// Threshold calibration could not proceed.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Topology search found no conforming spanning tree.
    #[error("no conforming spanning tree: every candidate exceeds the detection threshold")]
    AllTreesCompromised,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
