//! Shared data model: activations, dictionaries, sparse coefficients, and the
//! sparse coding objective.
//!
//! Activations are stored row-major as an `n × d` matrix (one activation per
//! row). A dictionary is a `d × m` matrix whose columns are unit-norm feature
//! vectors. Coefficients are stored per activation as sparse `(feature,
//! value)` lists, so "column `j` of α" is `CoefficientSet::column(j)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the L² norm of dictionary columns.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Columns shorter than this cannot be normalized.
pub const MIN_COLUMN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    data: Array2<f64>,
    labels: Option<Vec<String>>,
}

impl ActivationSet {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        Self::build(data, None)
    }

    pub fn with_labels(data: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        Self::build(data, Some(labels))
    }

    fn build(data: Array2<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidActivations(format!(
                "need n >= 1 and d >= 1, got n = {n}, d = {d}"
            )));
        }
        if let Some((idx, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidActivations(format!(
                "non-finite value {v} at row {}, column {}",
                idx / d,
                idx % d
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::LabelCount {
                    labels: labels.len(),
                    rows: n,
                });
            }
        }
        Ok(Self { data, labels })
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, j: usize) -> ArrayView1<'_, f64> {
        self.data.row(j)
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Number of activations.
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    /// Embedding size.
    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn into_parts(self) -> (Array2<f64>, Option<Vec<String>>) {
        (self.data, self.labels)
    }

    /// Replaces the matrix, keeping labels. Shapes must agree.
    pub fn map_data(&self, data: Array2<f64>) -> Result<Self> {
        Self::build(data, self.labels.clone())
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.map_data(&self.data * factor)
    }

    /// Rows at `indices`, in that order, with their labels.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let data = self.data.select(Axis(0), indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i].clone()).collect());
        Self::build(data, labels)
    }

    /// Sum of squared entries, accumulated in f64.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn mean_row_norm(&self) -> f64 {
        self.data
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .sum::<f64>()
            / self.n() as f64
    }

    pub fn column_means(&self) -> Array1<f64> {
        self.data.mean_axis(Axis(0)).expect("n >= 1")
    }

    /// Largest absolute value, used as the scale for centering checks.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Subtracts the column mean from every row. Labels are preserved.
pub fn center(x: &ActivationSet) -> (ActivationSet, Array1<f64>) {
    let mean = x.column_means();
    let centered = &x.data - &mean.view().insert_axis(Axis(0));
    let out = ActivationSet {
        data: centered,
        labels: x.labels.clone(),
    };
    (out, mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    features: Array2<f64>,
}

impl Dictionary {
    /// Wraps a `d × m` matrix whose columns already have unit norm.
    pub fn new(features: Array2<f64>) -> Result<Self> {
        let (d, m) = features.dim();
        if d == 0 || m == 0 {
            return Err(Error::InvalidDictionary(format!(
                "need d >= 1 and m >= 1, got d = {d}, m = {m}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDictionary("non-finite entry".into()));
        }
        for (i, col) in features.columns().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidDictionary(format!(
                    "column {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self::from_normalized_unchecked(features))
    }

    /// Stores the matrix column-major so each feature is contiguous.
    pub(crate) fn from_normalized_unchecked(features: Array2<f64>) -> Self {
        if features.t().is_standard_layout() {
            return Self { features };
        }
        let rows = features.t().as_standard_layout().into_owned();
        Self {
            features: rows.reversed_axes(),
        }
    }

    /// Builds from an `m × d` matrix whose rows are unit-norm features.
    pub(crate) fn from_feature_rows_unchecked(rows: Array2<f64>) -> Self {
        Self::from_normalized_unchecked(rows.reversed_axes())
    }

    /// `m × d` view with one feature per row.
    pub fn feature_rows(&self) -> ArrayView2<'_, f64> {
        self.features.t()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn feature(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.column(i)
    }

    pub fn d(&self) -> usize {
        self.features.nrows()
    }

    /// Dictionary size.
    pub fn m(&self) -> usize {
        self.features.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.features
    }

    /// `ΦᵀΦ`, the `m × m` matrix of feature inner products.
    pub fn gram(&self) -> Array2<f64> {
        self.features.t().dot(&self.features)
    }

    /// Column `i` of the result is column `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.m())?;
        Ok(Self::from_normalized_unchecked(self.features.select(Axis(1), perm)))
    }
}

/// Scales every column of a candidate dictionary to unit L² norm.
pub fn normalize_dictionary(mut features: Array2<f64>) -> Result<Dictionary> {
    for (i, mut col) in features.columns_mut().into_iter().enumerate() {
        let norm = col.dot(&col).sqrt();
        if !norm.is_finite() || norm < MIN_COLUMN_NORM {
            return Err(Error::InvalidDictionary(format!(
                "column {i} has norm {norm} and cannot be normalized"
            )));
        }
        col /= norm;
    }
    Dictionary::new(features)
}

/// Nonnegative sparse coefficients, one sparse column per activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    m: usize,
    columns: Vec<Vec<(usize, f64)>>,
}

impl CoefficientSet {
    pub fn new(m: usize, columns: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut seen = vec![usize::MAX; m];
        for (j, col) in columns.iter().enumerate() {
            for &(i, v) in col {
                if i >= m {
                    return Err(Error::InvalidCoefficients(format!(
                        "column {j}: feature index {i} out of range 0..{m}"
                    )));
                }
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidCoefficients(format!(
                        "column {j}: stored value {v} for feature {i} is not positive and finite"
                    )));
                }
                if seen[i] == j {
                    return Err(Error::InvalidCoefficients(format!(
                        "column {j}: feature {i} stored twice"
                    )));
                }
                seen[i] = j;
            }
        }
        Ok(Self { m, columns })
    }

    pub(crate) fn from_columns_unchecked(m: usize, columns: Vec<Vec<(usize, f64)>>) -> Self {
        Self { m, columns }
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            m,
            columns: vec![Vec::new(); n],
        }
    }

    /// Builds from a dense `m × n` matrix, dropping entries that are not
    /// strictly positive.
    pub fn from_dense(dense: ArrayView2<'_, f64>) -> Result<Self> {
        if let Some(v) = dense.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidCoefficients(format!(
                "dense entry {v} is negative or non-finite"
            )));
        }
        let columns = dense
            .columns()
            .into_iter()
            .map(|col| {
                col.iter()
                    .enumerate()
                    .filter(|(_, v)| **v > 0.0)
                    .map(|(i, v)| (i, *v))
                    .collect()
            })
            .collect();
        Ok(Self {
            m: dense.nrows(),
            columns,
        })
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.m, self.n()));
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of activations (columns of α).
    pub fn n(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.columns[j]
    }

    pub fn columns(&self) -> impl ExactSizeIterator<Item = &[(usize, f64)]> {
        self.columns.iter().map(Vec::as_slice)
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    /// Entrywise L¹ norm.
    pub fn l1(&self) -> f64 {
        self.columns
            .iter()
            .flat_map(|c| c.iter().map(|&(_, v)| v))
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.columns.iter().all(Vec::is_empty)
    }

    /// Mean over columns of the per-column maximum coefficient; an all-zero
    /// column contributes 0. This is the "average maximum coefficient"
    /// `‖α‖∞` used by the λ update and by the normalized metrics.
    pub fn mean_column_max(&self) -> f64 {
        if self.columns.is_empty() {
            return 0.0;
        }
        self.columns
            .iter()
            .map(|c| c.iter().fold(0.0_f64, |m, &(_, v)| m.max(v)))
            .sum::<f64>()
            / self.n() as f64
    }

    /// Value of `α[i, j]` (zero when absent).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.columns[j]
            .iter()
            .find(|(k, _)| *k == i)
            .map_or(0.0, |&(_, v)| v)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidCoefficients(format!(
                "scale factor {factor} must be positive"
            )));
        }
        let columns = self
            .columns
            .iter()
            .map(|c| c.iter().map(|&(i, v)| (i, v * factor)).collect())
            .collect();
        Ok(Self { m: self.m, columns })
    }

    /// Matches `Dictionary::permuted(perm)`: feature `perm[i]` becomes `i`.
    pub fn permute_features(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.m)?;
        let mut inverse = vec![0; self.m];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let columns = self
            .columns
            .iter()
            .map(|c| c.iter().map(|&(i, v)| (inverse[i], v)).collect())
            .collect();
        Ok(Self { m: self.m, columns })
    }

    /// Columns at `indices`, in that order.
    pub fn select_columns(&self, indices: &[usize]) -> Self {
        Self {
            m: self.m,
            columns: indices.iter().map(|&j| self.columns[j].clone()).collect(),
        }
    }
}

fn check_permutation(perm: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    if perm.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "permutation of length {} for {m} features",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= m || std::mem::replace(&mut seen[p], true) {
            return Err(Error::ShapeMismatch(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

pub(crate) fn check_shapes(
    x: &ActivationSet,
    dict: &Dictionary,
    coeffs: &CoefficientSet,
) -> Result<()> {
    if x.d() != dict.d() {
        return Err(Error::ShapeMismatch(format!(
            "activations have d = {}, dictionary has d = {}",
            x.d(),
            dict.d()
        )));
    }
    if coeffs.m() != dict.m() {
        return Err(Error::ShapeMismatch(format!(
            "coefficients index {} features, dictionary has {}",
            coeffs.m(),
            dict.m()
        )));
    }
    if coeffs.n() != x.n() {
        return Err(Error::ShapeMismatch(format!(
            "coefficients cover {} activations, data has {}",
            coeffs.n(),
            x.n()
        )));
    }
    Ok(())
}

/// Writes `x_j − Φα_j` into `out`.
pub(crate) fn residual_into(
    x: ArrayView1<'_, f64>,
    dict: &Dictionary,
    column: &[(usize, f64)],
    out: &mut Array1<f64>,
) {
    out.assign(&x);
    for &(i, c) in column {
        out.scaled_add(-c, &dict.feature(i));
    }
}

/// `‖X − Φα‖²_F`.
pub fn residual_norm_sq(x: &ActivationSet, dict: &Dictionary, coeffs: &CoefficientSet) -> Result<f64> {
    check_shapes(x, dict, coeffs)?;
    let mut r = Array1::zeros(x.d());
    let mut total = 0.0;
    for (j, col) in coeffs.columns().enumerate() {
        residual_into(x.row(j), dict, col, &mut r);
        total += r.dot(&r);
    }
    Ok(total)
}

/// Reconstructed activations `Φα`, as an `n × d` matrix.
pub fn reconstruct(dict: &Dictionary, coeffs: &CoefficientSet) -> Result<Array2<f64>> {
    if coeffs.m() != dict.m() {
        return Err(Error::ShapeMismatch(format!(
            "coefficients index {} features, dictionary has {}",
            coeffs.m(),
            dict.m()
        )));
    }
    let mut out = Array2::zeros((coeffs.n(), dict.d()));
    for (j, col) in coeffs.columns().enumerate() {
        let mut row = out.row_mut(j);
        for &(i, c) in col {
            row.scaled_add(c, &dict.feature(i));
        }
    }
    Ok(out)
}

/// The sparse coding objective `(1/n)(‖X − Φα‖²_F + λ‖α‖₁)`.
pub fn objective(x: &ActivationSet, dict: &Dictionary, coeffs: &CoefficientSet, lambda: f64) -> Result<f64> {
    let residual = residual_norm_sq(x, dict, coeffs)?;
    Ok((residual + lambda * coeffs.l1()) / x.n() as f64)
}

/// How `step_size` turns into the Φ gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// The step is `step_size` itself.
    Fixed,
    /// The step is `step_size / L`, where `L` is the Lipschitz constant of
    /// the reconstruction gradient on the current batch.
    Lipschitz,
}

/// Knobs for the alternating solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// L¹ penalty weight. `None` means `0.1 ×` the mean row norm of the data.
    pub lambda: Option<f64>,
    /// Dictionary size as a multiple of the embedding size.
    pub dict_factor: usize,
    /// Gradient steps on Φ per alternation.
    pub phi_steps: usize,
    pub step_size: f64,
    pub step_rule: StepRule,
    /// Rows per gradient step; the full set is used when `n` is smaller.
    pub batch_size: usize,
    pub max_alternations: usize,
    /// Stop once the relative change of the objective falls below this.
    pub rel_tol: f64,
    pub adapt_lambda: bool,
    pub adapt_rounds: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            dict_factor: 8,
            phi_steps: 5,
            step_size: 1.0,
            step_rule: StepRule::Lipschitz,
            batch_size: 256,
            max_alternations: 200,
            rel_tol: 1e-4,
            adapt_lambda: false,
            adapt_rounds: 5,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda must be finite and >= 0, got {l}"));
            }
        }
        if self.dict_factor < 1 {
            return bad("dict_factor must be >= 1".into());
        }
        if self.phi_steps < 1 || self.batch_size < 1 || self.max_alternations < 1 || self.adapt_rounds < 1 {
            return bad("phi_steps, batch_size, max_alternations and adapt_rounds must be >= 1".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return bad(format!("rel_tol must lie in (0, 1), got {}", self.rel_tol));
        }
        Ok(())
    }

    pub fn dict_size(&self, d: usize) -> usize {
        self.dict_factor * d
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub dictionary: Dictionary,
    pub coefficients: CoefficientSet,
    pub final_lambda: f64,
    /// Objective after the initial coefficient step and after every alternation.
    pub objective_history: Vec<f64>,
    /// `Σ_j ‖x_j − Φα_j‖²` for the final dictionary and coefficients.
    pub residual_norm_sq: f64,
}
