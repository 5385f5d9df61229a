//! Sparsity metrics for a fitted decomposition.
//!
//! All "average maximum coefficient" normalizations use the mean over
//! activations of the per-activation maximum coefficient
//! ([`CoefficientSet::mean_column_max`]).

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{objective, residual_norm_sq, ActivationSet, CoefficientSet, Dictionary};

/// Mean number of stored (nonzero) coefficients per activation.
pub fn metric_nonzero(coeffs: &CoefficientSet) -> f64 {
    if coeffs.n() == 0 {
        return 0.0;
    }
    coeffs.nnz() as f64 / coeffs.n() as f64
}

/// The objective at the final dictionary.
pub fn metric_final_loss(x: &ActivationSet, dict: &Dictionary, coeffs: &CoefficientSet, lambda: f64) -> Result<f64> {
    objective(x, dict, coeffs, lambda)
}

/// Average Lᵖ mass per activation over the average maximum coefficient to
/// the power `p`. `None` when every coefficient is zero.
pub fn metric_avg_coeff_norm(coeffs: &CoefficientSet, p: f64) -> Option<f64> {
    if !(p > 0.0) || coeffs.is_zero() {
        return None;
    }
    let n = coeffs.n() as f64;
    let mass: f64 = coeffs
        .columns()
        .map(|c| c.iter().map(|&(_, v)| v.powf(p)).sum::<f64>())
        .sum::<f64>()
        / n;
    Some(mass / coeffs.mean_column_max().powf(p))
}

/// Final loss over `λ ×` the average maximum coefficient. `None` when λ is
/// zero or every coefficient is zero.
pub fn metric_normalized_loss(
    x: &ActivationSet,
    dict: &Dictionary,
    coeffs: &CoefficientSet,
    lambda: f64,
) -> Result<Option<f64>> {
    let loss = objective(x, dict, coeffs, lambda)?;
    if !(lambda > 0.0) || coeffs.is_zero() {
        return Ok(None);
    }
    Ok(Some(loss / (lambda * coeffs.mean_column_max())))
}

/// `1 − ‖X − Φα‖²_F / ‖X‖²_F`. Expects centered data and warns otherwise.
pub fn variance_explained(x: &ActivationSet, dict: &Dictionary, coeffs: &CoefficientSet) -> Result<f64> {
    let total = x.frobenius_sq();
    if total == 0.0 {
        return Err(Error::DegenerateData("activations have zero Frobenius norm".into()));
    }
    // Sampling noise leaves small means on centered-then-noised data, so
    // only warn about offsets that are a visible fraction of the spread.
    let rms = (total / (x.n() * x.d()) as f64).sqrt();
    let worst_mean = x.column_means().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if worst_mean > 0.05 * rms {
        warn!("variance explained on uncentered data (largest column mean {worst_mean:e})");
    }
    Ok(1.0 - residual_norm_sq(x, dict, coeffs)? / total)
}

/// All metrics for one decomposition. Undefined values are `None` and
/// serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nonzero_entries: f64,
    pub final_loss: f64,
    pub avg_coeff_norm: Option<f64>,
    pub p: f64,
    pub normalized_loss: Option<f64>,
    pub variance_explained: f64,
    pub lambda_used: f64,
}

impl MetricReport {
    pub fn compute(x: &ActivationSet, dict: &Dictionary, coeffs: &CoefficientSet, lambda: f64, p: f64) -> Result<Self> {
        Ok(Self {
            nonzero_entries: metric_nonzero(coeffs),
            final_loss: metric_final_loss(x, dict, coeffs, lambda)?,
            avg_coeff_norm: metric_avg_coeff_norm(coeffs, p),
            p,
            normalized_loss: metric_normalized_loss(x, dict, coeffs, lambda)?,
            variance_explained: variance_explained(x, dict, coeffs)?,
            lambda_used: lambda,
        })
    }

    /// Name/value pairs in a fixed order, for tabular output.
    pub fn named_values(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("nonzero_entries", Some(self.nonzero_entries)),
            ("final_loss", Some(self.final_loss)),
            ("avg_coeff_norm", self.avg_coeff_norm),
            ("normalized_loss", self.normalized_loss),
        ]
    }
}
