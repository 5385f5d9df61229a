//! Sparse dictionary learning for activation vectors, with metrics that
//! measure how sparse the resulting decomposition is.

pub mod error;
pub mod experiments;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use model::{center, normalize_dictionary, objective, ActivationSet, CoefficientSet, Dictionary, FitResult, SolverConfig, StepRule};
