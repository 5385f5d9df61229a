//! Alternating minimization of the sparse coding objective.
//!
//! The coefficient step is a greedy residual pursuit with an L¹ shift: for
//! each activation the feature with the largest dot product against the
//! current residual is taken with coefficient `r·f − λ/2`, until that value
//! is no longer positive. The dictionary step is a few gradient steps on the
//! reconstruction error followed by column renormalization.

use log::{debug, warn};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{
    check_shapes, objective, residual_into, residual_norm_sq, ActivationSet, CoefficientSet, Dictionary,
    FitResult, SolverConfig, StepRule, MIN_COLUMN_NORM,
};

/// Rows encoded per dense product in the coefficient step.
const ENCODE_CHUNK: usize = 512;

/// Fraction of the average maximum coefficient used as the next λ.
pub const LAMBDA_FRACTION: f64 = 0.1;

/// Relative λ change below which the adaptive loop stops.
pub const LAMBDA_REL_TOL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The best remaining candidate had a coefficient `<= 0`.
    NonpositiveCandidate,
    /// Every feature was selected.
    FeatureExhaustion,
}

/// Selection order of the greedy step for one activation.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaStepTrace {
    pub selections: Vec<(usize, f64)>,
    pub stop: StopReason,
}

const LANES: usize = 8;

/// Index and value of the largest entry; ties go to the lowest index.
fn reduce_lanes(best: &[f64; LANES], idx: &[usize; LANES], mut top: (usize, f64)) -> (usize, f64) {
    for k in 0..LANES {
        if best[k] > top.1 || (best[k] == top.1 && idx[k] < top.0) {
            top = (idx[k], best[k]);
        }
    }
    top
}

fn argmax(dots: &[f64]) -> (usize, f64) {
    let mut best = [f64::NEG_INFINITY; LANES];
    let mut idx = [usize::MAX; LANES];
    let chunks = dots.chunks_exact(LANES);
    let tail = chunks.remainder();
    for (c, chunk) in chunks.enumerate() {
        for k in 0..LANES {
            if chunk[k] > best[k] {
                best[k] = chunk[k];
                idx[k] = c * LANES + k;
            }
        }
    }
    let mut top = (usize::MAX, f64::NEG_INFINITY);
    let offset = dots.len() - tail.len();
    for (k, &v) in tail.iter().enumerate() {
        if v > top.1 {
            top = (offset + k, v);
        }
    }
    reduce_lanes(&best, &idx, top)
}

/// `dots -= coeff * g`, returning the argmax of the updated values.
fn update_argmax(dots: &mut [f64], g: &[f64], coeff: f64) -> (usize, f64) {
    let mut best = [f64::NEG_INFINITY; LANES];
    let mut idx = [usize::MAX; LANES];
    let len = dots.len();
    let mut chunks = dots.chunks_exact_mut(LANES);
    let mut gchunks = g.chunks_exact(LANES);
    for (c, (chunk, gc)) in (&mut chunks).zip(&mut gchunks).enumerate() {
        for k in 0..LANES {
            let v = chunk[k] - coeff * gc[k];
            chunk[k] = v;
            if v > best[k] {
                best[k] = v;
                idx[k] = c * LANES + k;
            }
        }
    }
    let offset = len - chunks.into_remainder().len();
    let mut top = (usize::MAX, f64::NEG_INFINITY);
    for k in offset..len {
        let v = dots[k] - coeff * g[k];
        dots[k] = v;
        if v > top.1 {
            top = (k, v);
        }
    }
    reduce_lanes(&best, &idx, top)
}

/// Greedy pursuit on precomputed dot products.
///
/// `dots[i]` must hold `x·f_i` on entry; it is destroyed. Selected features
/// are parked at −∞ so each is taken at most once.
fn pursue(dots: &mut [f64], gram: &Array2<f64>, half_lambda: f64) -> AlphaStepTrace {
    let m = dots.len();
    let mut selections = Vec::new();
    let (mut best, mut best_dot) = argmax(dots);
    loop {
        if selections.len() == m {
            return AlphaStepTrace {
                selections,
                stop: StopReason::FeatureExhaustion,
            };
        }
        let coeff = best_dot - half_lambda;
        if best == usize::MAX || !(coeff > 0.0) {
            return AlphaStepTrace {
                selections,
                stop: StopReason::NonpositiveCandidate,
            };
        }
        selections.push((best, coeff));
        dots[best] = f64::NEG_INFINITY;
        // r ← r − c·f_best, so f_k·r drops by c·(f_k·f_best).
        let g = gram.row(best);
        (best, best_dot) = update_argmax(dots, g.as_slice().expect("standard layout"), coeff);
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

fn encode(x: &ActivationSet, dict: &Dictionary, lambda: f64, keep_trace: bool) -> Result<(CoefficientSet, Vec<AlphaStepTrace>)> {
    check_lambda(lambda)?;
    if x.d() != dict.d() {
        return Err(Error::ShapeMismatch(format!(
            "activations have d = {}, dictionary has d = {}",
            x.d(),
            dict.d()
        )));
    }
    let (n, m) = (x.n(), dict.m());
    let gram = dict.gram();
    let half_lambda = lambda / 2.0;
    let mut columns = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(if keep_trace { n } else { 0 });
    let mut dots = Array2::zeros((ENCODE_CHUNK.min(n), m));
    let data = x.data();
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let end = (start + ENCODE_CHUNK).min(n);
        let mut block = dots.slice_mut(s![..end - start, ..]);
        general_mat_mul(1.0, &data.slice(s![start..end, ..]), &dict.features(), 0.0, &mut block);
        for mut row in block.rows_mut() {
            let trace = pursue(row.as_slice_mut().expect("standard layout"), &gram, half_lambda);
            columns.push(trace.selections.clone());
            if keep_trace {
                traces.push(trace);
            }
        }
    }
    Ok((CoefficientSet::from_columns_unchecked(m, columns), traces))
}

/// Greedy L¹-shifted pursuit of every activation against a fixed dictionary.
pub fn alpha_step(x: &ActivationSet, dict: &Dictionary, lambda: f64) -> Result<CoefficientSet> {
    encode(x, dict, lambda, false).map(|(c, _)| c)
}

/// `alpha_step` plus the per-activation selection order and stop reason.
pub fn alpha_step_traced(
    x: &ActivationSet,
    dict: &Dictionary,
    lambda: f64,
) -> Result<(CoefficientSet, Vec<AlphaStepTrace>)> {
    encode(x, dict, lambda, true)
}

/// Approximates the optimal coefficients `α(Φ)` for a frozen dictionary.
pub fn infer_coefficients(x: &ActivationSet, dict: &Dictionary, lambda: f64) -> Result<CoefficientSet> {
    alpha_step(x, dict, lambda)
}

pub(crate) fn random_unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > MIN_COLUMN_NORM {
            return v / norm;
        }
    }
}

/// Largest eigenvalue of `ααᵀ` restricted to `batch`, by power iteration.
fn coefficient_spectral_norm(coeffs: &CoefficientSet, batch: &[usize]) -> f64 {
    let m = coeffs.m();
    let mut v = Array1::from_elem(m, 1.0 / (m as f64).sqrt());
    let mut w = Array1::zeros(m);
    let mut estimate = 0.0;
    for _ in 0..50 {
        w.fill(0.0);
        for &j in batch {
            let col = coeffs.column(j);
            let u: f64 = col.iter().map(|&(i, c)| c * v[i]).sum();
            for &(i, c) in col {
                w[i] += c * u;
            }
        }
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - estimate).abs() <= 1e-6 * norm;
        estimate = norm;
        v.assign(&w);
        v /= norm;
        if converged {
            break;
        }
    }
    estimate
}

/// Gradient steps on the reconstruction error with α held fixed, each
/// followed by renormalizing every column to unit length.
pub fn phi_step<R: Rng + ?Sized>(
    x: &ActivationSet,
    dict: &Dictionary,
    coeffs: &CoefficientSet,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<Dictionary> {
    check_shapes(x, dict, coeffs)?;
    let (n, d, m) = (x.n(), x.d(), dict.m());
    let batch_size = cfg.batch_size.min(n);
    let full: Vec<usize> = (0..n).collect();
    let mut current = dict.clone();
    let mut grad = Array2::<f64>::zeros((m, d));
    let mut r = Array1::zeros(d);
    for _ in 0..cfg.phi_steps {
        let sampled;
        let batch: &[usize] = if batch_size == n {
            &full
        } else {
            sampled = index::sample(rng, n, batch_size).into_vec();
            &sampled
        };

        // grad row i accumulates Σ_j α_ij (x_j − Φα_j); the gradient of the
        // batch-mean reconstruction error is −(2/B) times that.
        grad.fill(0.0);
        for &j in batch {
            let col = coeffs.column(j);
            if col.is_empty() {
                continue;
            }
            residual_into(x.row(j), &current, col, &mut r);
            for &(i, c) in col {
                grad.row_mut(i).scaled_add(c, &r);
            }
        }
        let scale = 2.0 / batch.len() as f64;
        let step = match cfg.step_rule {
            StepRule::Fixed => cfg.step_size,
            StepRule::Lipschitz => {
                let lipschitz = scale * coefficient_spectral_norm(coeffs, batch);
                if lipschitz > 0.0 {
                    cfg.step_size / lipschitz
                } else {
                    0.0
                }
            }
        };

        let mut rows = current.feature_rows().to_owned();
        rows.scaled_add(step * scale, &grad);
        for (i, mut row) in rows.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFiniteObjective { alternation: 0 });
            }
            if norm < MIN_COLUMN_NORM {
                warn!("dictionary column {i} collapsed (norm {norm:e}); re-initializing");
                row.assign(&random_unit_vector(d, rng));
            } else {
                row /= norm;
            }
        }
        current = Dictionary::from_feature_rows_unchecked(rows);
    }
    Ok(current)
}

/// Something that yields fresh batches of activations.
pub trait ActivationSampler {
    fn d(&self) -> usize;
    fn sample(&mut self) -> Result<ActivationSet>;
}

/// Where `fit` gets its activations from.
pub enum Source<'a> {
    /// A fixed matrix, reused every alternation.
    Matrix(&'a ActivationSet),
    /// A distribution, resampled every alternation.
    Sampler(&'a mut dyn ActivationSampler),
}

impl Source<'_> {
    fn next_batch(&mut self) -> Result<ActivationSet> {
        match self {
            Source::Matrix(x) => Ok((*x).clone()),
            Source::Sampler(s) => {
                let batch = s.sample()?;
                if batch.d() != s.d() {
                    return Err(Error::ShapeMismatch(format!(
                        "sampler declared d = {} but produced d = {}",
                        s.d(),
                        batch.d()
                    )));
                }
                Ok(batch)
            }
        }
    }

    fn is_matrix(&self) -> bool {
        matches!(self, Source::Matrix(_))
    }
}

/// Warm start: `m` distinct rows of `x` when there are enough, otherwise
/// random unit vectors. Rows are drawn from a content-sorted order, so the
/// result does not depend on the order of the rows in `x`.
pub fn initial_dictionary<R: Rng + ?Sized>(x: &ActivationSet, m: usize, rng: &mut R) -> Dictionary {
    let d = x.d();
    let mut rows = Array2::zeros((m, d));
    if x.n() >= m {
        let mut order: Vec<usize> = (0..x.n()).collect();
        order.sort_by(|&a, &b| {
            x.row(a)
                .iter()
                .zip(x.row(b).iter())
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let picks = index::sample(rng, x.n(), m);
        for (i, j) in picks.into_iter().map(|k| order[k]).enumerate() {
            let src = x.row(j);
            let norm = src.dot(&src).sqrt();
            if norm < MIN_COLUMN_NORM {
                rows.row_mut(i).assign(&random_unit_vector(d, rng));
            } else {
                rows.row_mut(i).assign(&(&src / norm));
            }
        }
    } else {
        for mut row in rows.rows_mut() {
            row.assign(&random_unit_vector(d, rng));
        }
    }
    Dictionary::from_feature_rows_unchecked(rows)
}

/// λ used when the configuration leaves it open.
pub fn default_lambda(x: &ActivationSet) -> f64 {
    LAMBDA_FRACTION * x.mean_row_norm()
}

fn relative_change(prev: f64, next: f64) -> f64 {
    if prev == 0.0 {
        return if next == 0.0 { 0.0 } else { f64::INFINITY };
    }
    ((prev - next) / prev).abs()
}

/// One alternating run at a fixed λ, optionally warm-started.
pub fn fit_fixed_lambda(
    source: &mut Source<'_>,
    cfg: &SolverConfig,
    lambda: f64,
    init: Option<Dictionary>,
) -> Result<FitResult> {
    cfg.validate()?;
    check_lambda(lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = source.next_batch()?;
    let m = cfg.dict_size(x.d());
    let mut dict = match init {
        Some(d) if d.d() == x.d() => d,
        Some(d) => {
            return Err(Error::ShapeMismatch(format!(
                "initial dictionary has d = {}, data has d = {}",
                d.d(),
                x.d()
            )))
        }
        None => initial_dictionary(&x, m, &mut rng),
    };
    let mut coeffs = alpha_step(&x, &dict, lambda)?;
    let first = objective(&x, &dict, &coeffs, lambda)?;
    if !first.is_finite() {
        return Err(Error::NonFiniteObjective { alternation: 0 });
    }
    let mut history = vec![first];
    // Renormalization and the greedy re-encode can both nudge the objective
    // up. With full batches there is nothing stochastic to wait out, so such
    // an alternation is rejected and the fit stops where it was.
    let full_batch = source.is_matrix() && cfg.batch_size >= x.n();
    for t in 1..=cfg.max_alternations {
        if !source.is_matrix() {
            x = source.next_batch()?;
            coeffs = alpha_step(&x, &dict, lambda)?;
        }
        let next_dict = phi_step(&x, &dict, &coeffs, cfg, &mut rng).map_err(|e| match e {
            Error::NonFiniteObjective { .. } => Error::NonFiniteObjective { alternation: t },
            other => other,
        })?;
        let next_coeffs = alpha_step(&x, &next_dict, lambda)?;
        let value = objective(&x, &next_dict, &next_coeffs, lambda)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteObjective { alternation: t });
        }
        let prev = *history.last().expect("non-empty");
        if full_batch && value > prev {
            debug!("alternation {t} raised the objective ({prev:.6e} -> {value:.6e}); stopping");
            break;
        }
        dict = next_dict;
        coeffs = next_coeffs;
        history.push(value);
        if relative_change(prev, value) < cfg.rel_tol {
            debug!("converged after {t} alternations (objective {value:.6e})");
            break;
        }
    }
    let residual = residual_norm_sq(&x, &dict, &coeffs)?;
    Ok(FitResult {
        dictionary: dict,
        coefficients: coeffs,
        final_lambda: lambda,
        objective_history: history,
        residual_norm_sq: residual,
    })
}

/// Adaptive λ: fit, set `λ ← 0.1 × (average maximum coefficient)`, and
/// repeat until λ moves by less than 10% or `rounds` fits have run.
///
/// `fit_once(λ, previous)` runs one full fit; `previous` is the result of the
/// prior round, if any. Returns the last fit, whose `final_lambda` is the λ
/// it was computed with.
pub fn adapt_lambda<F>(mut fit_once: F, lambda0: f64, rounds: usize) -> Result<FitResult>
where
    F: FnMut(f64, Option<&FitResult>) -> Result<FitResult>,
{
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(Error::InvalidConfig(format!("initial lambda must be positive, got {lambda0}")));
    }
    let mut lambda = lambda0;
    let mut previous: Option<FitResult> = None;
    for round in 1..=rounds.max(1) {
        let mut result = fit_once(lambda, previous.as_ref())?;
        result.final_lambda = lambda;
        let avg_max = result.coefficients.mean_column_max();
        if avg_max <= 0.0 {
            return Err(Error::LambdaTooLarge { round, lambda });
        }
        let next = LAMBDA_FRACTION * avg_max;
        debug!("adaptive lambda round {round}: lambda {lambda:.6e} -> {next:.6e}");
        if ((next - lambda) / lambda).abs() < LAMBDA_REL_TOL || round == rounds {
            return Ok(result);
        }
        lambda = next;
        previous = Some(result);
    }
    unreachable!("the final round always returns")
}

/// Fits a dictionary to `source`, wrapping the alternating loop in the
/// adaptive-λ scheme when `cfg.adapt_lambda` is set. Later λ rounds start
/// from the previous round's dictionary.
pub fn fit(mut source: Source<'_>, cfg: &SolverConfig) -> Result<FitResult> {
    cfg.validate()?;
    if let Source::Matrix(x) = &source {
        if x.n() == 0 {
            return Err(Error::EmptySource);
        }
    }
    if !cfg.adapt_lambda {
        let lambda = match (cfg.lambda, &source) {
            (Some(l), _) => l,
            (None, Source::Matrix(x)) => default_lambda(x),
            (None, Source::Sampler(_)) => {
                let probe = source.next_batch()?;
                default_lambda(&probe)
            }
        };
        return fit_fixed_lambda(&mut source, cfg, lambda, None);
    }
    let lambda0 = match (cfg.lambda, &source) {
        (Some(l), _) if l > 0.0 => l,
        (_, Source::Matrix(x)) => default_lambda(x),
        (_, Source::Sampler(_)) => {
            let probe = source.next_batch()?;
            default_lambda(&probe)
        }
    };
    adapt_lambda(
        |lambda, previous| fit_fixed_lambda(&mut source, cfg, lambda, previous.map(|p| p.dictionary.clone())),
        lambda0,
        cfg.adapt_rounds,
    )
}

/// Convenience wrapper for a fixed matrix.
pub fn fit_matrix(x: &ActivationSet, cfg: &SolverConfig) -> Result<FitResult> {
    fit(Source::Matrix(x), cfg)
}

/// Per-sample objective change from taking feature `f` with coefficient
/// `r·f − λ/2` on residual `r`: `‖r − c f‖² + λc − ‖r‖²`.
pub fn greedy_inclusion_delta(r: ArrayView1<'_, f64>, f: ArrayView1<'_, f64>, lambda: f64) -> (f64, f64) {
    let c = r.dot(&f) - lambda / 2.0;
    let after = &r - &(&f * c);
    (c, after.dot(&after) + lambda * c - r.dot(&r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn identity2() -> Dictionary {
        Dictionary::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn alpha_step_hand_execution() {
        let x = ActivationSet::new(array![[1.0, 0.4]]).unwrap();
        let (alpha, traces) = alpha_step_traced(&x, &identity2(), 0.2).unwrap();
        assert_eq!(traces[0].selections.len(), 2);
        assert_eq!(traces[0].selections[0].0, 0);
        assert_abs_diff_eq!(alpha.get(0, 0), 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(alpha.get(1, 0), 0.3, epsilon = 1e-12);
        assert_eq!(traces[0].stop, StopReason::FeatureExhaustion);
    }

    #[test]
    fn alpha_step_small_dots_give_empty_column() {
        let x = ActivationSet::new(array![[0.05, -0.3]]).unwrap();
        let (alpha, traces) = alpha_step_traced(&x, &identity2(), 0.2).unwrap();
        assert!(alpha.column(0).is_empty());
        assert_eq!(traces[0].stop, StopReason::NonpositiveCandidate);
    }

    #[test]
    fn alpha_step_exact_atom() {
        let x = ActivationSet::new(array![[1.0, 0.0]]).unwrap();
        let dict = identity2();
        let alpha = alpha_step(&x, &dict, 0.0).unwrap();
        assert_eq!(alpha.column(0), &[(0, 1.0)]);
        assert_eq!(residual_norm_sq(&x, &dict, &alpha).unwrap(), 0.0);
        assert_eq!(infer_coefficients(&x, &dict, 0.0).unwrap(), alpha);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let x = ActivationSet::new(array![[1.0, 1.0]]).unwrap();
        let (_, traces) = alpha_step_traced(&x, &identity2(), 0.0).unwrap();
        assert_eq!(traces[0].selections[0].0, 0);
    }

    #[test]
    fn alpha_step_rejects_negative_lambda() {
        let x = ActivationSet::new(array![[1.0, 1.0]]).unwrap();
        assert!(alpha_step(&x, &identity2(), -1.0).is_err());
    }

    #[test]
    fn phi_step_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SolverConfig {
            phi_steps: 3,
            ..Default::default()
        };
        let dict = identity2();
        let x = ActivationSet::new(array![[1.0, 0.0], [0.3, 0.7]]).unwrap();
        let zero = CoefficientSet::zeros(2, 2);
        assert_eq!(phi_step(&x, &dict, &zero, &cfg, &mut rng).unwrap(), dict);

        let x = ActivationSet::new(array![[1.0, 0.0]]).unwrap();
        let exact = CoefficientSet::new(2, vec![vec![(0, 1.0)]]).unwrap();
        assert_eq!(phi_step(&x, &dict, &exact, &cfg, &mut rng).unwrap(), dict);
    }

    #[test]
    fn phi_step_single_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SolverConfig {
            phi_steps: 1,
            step_size: 0.05,
            step_rule: StepRule::Fixed,
            ..Default::default()
        };
        let dict = Dictionary::new(array![[0.0], [1.0]]).unwrap();
        let x = ActivationSet::new(array![[1.0, 0.0]]).unwrap();
        let alpha = CoefficientSet::new(1, vec![vec![(0, 1.0)]]).unwrap();
        let out = phi_step(&x, &dict, &alpha, &cfg, &mut rng).unwrap();
        // (0.1, 0.9) renormalized.
        let norm = (0.01f64 + 0.81).sqrt();
        assert_abs_diff_eq!(out.feature(0), array![0.1 / norm, 0.9 / norm], epsilon = 1e-12);
        assert_abs_diff_eq!(out.feature(0)[0], 0.1104, epsilon = 1e-4);
        assert_abs_diff_eq!(out.feature(0)[1], 0.9939, epsilon = 1e-4);
    }

    #[test]
    fn collapsed_column_is_reinitialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Gradient step of exactly −f: x = 0, α = 1, η = 1/2 ⇒ f − (1/2)(2)(f) = 0.
        let cfg = SolverConfig {
            phi_steps: 1,
            step_size: 0.5,
            ..Default::default()
        };
        let dict = Dictionary::new(array![[1.0], [0.0]]).unwrap();
        let x = ActivationSet::new(array![[0.0, 0.0]]).unwrap();
        let alpha = CoefficientSet::new(1, vec![vec![(0, 1.0)]]).unwrap();
        let out = phi_step(&x, &dict, &alpha, &cfg, &mut rng).unwrap();
        let f = out.feature(0);
        assert_abs_diff_eq!(f.dot(&f), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn adapt_lambda_fixed_point_stops_immediately() {
        let mut calls = 0;
        let result = adapt_lambda(
            |lambda, _| {
                calls += 1;
                Ok(FitResult {
                    dictionary: identity2(),
                    coefficients: CoefficientSet::new(2, vec![vec![(0, 10.0 * lambda)]]).unwrap(),
                    final_lambda: lambda,
                    objective_history: vec![0.0],
                    residual_norm_sq: 0.0,
                })
            },
            0.3,
            5,
        )
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(result.final_lambda, 0.3);
    }

    #[test]
    fn adapt_lambda_zero_alpha_is_an_error() {
        let err = adapt_lambda(
            |lambda, _| {
                Ok(FitResult {
                    dictionary: identity2(),
                    coefficients: CoefficientSet::zeros(2, 3),
                    final_lambda: lambda,
                    objective_history: vec![0.0],
                    residual_norm_sq: 0.0,
                })
            },
            1.0,
            5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::LambdaTooLarge { round: 1, .. }));
        assert!(err.to_string().contains("lambda too large"));
    }

    #[test]
    fn adapt_lambda_respects_round_budget() {
        let mut calls = 0;
        adapt_lambda(
            |lambda, _| {
                calls += 1;
                // Average max is always 100λ, so λ grows tenfold every round.
                Ok(FitResult {
                    dictionary: identity2(),
                    coefficients: CoefficientSet::new(2, vec![vec![(1, 100.0 * lambda)]]).unwrap(),
                    final_lambda: lambda,
                    objective_history: vec![0.0],
                    residual_norm_sq: 0.0,
                })
            },
            1.0,
            3,
        )
        .unwrap();
        assert_eq!(calls, 3);
    }

    #[test]
    fn single_activation_fit_terminates() {
        let x = ActivationSet::new(array![[0.3, -1.2, 0.5]]).unwrap();
        let cfg = SolverConfig {
            dict_factor: 1,
            max_alternations: 20,
            ..Default::default()
        };
        let result = fit_matrix(&x, &cfg).unwrap();
        assert!(result.objective_history.len() <= 21);
        assert!(result.residual_norm_sq <= x.frobenius_sq());
    }
}
