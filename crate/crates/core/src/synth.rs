//! Synthetic activations with known sparse structure, plus the non-sparse
//! control distributions they are compared against.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{center, ActivationSet, CoefficientSet, Dictionary};
use crate::solver::ActivationSampler;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    /// Number of ground-truth features.
    pub m_true: usize,
    /// Expected number of active features per activation.
    pub a: f64,
    /// Noise scale; per-coordinate noise variance is `a σ² / d`.
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Ground-truth feature count defaults to `4d`.
    pub fn new(d: usize, a: f64, sigma: f64, n: usize, seed: u64) -> Self {
        Self {
            d,
            m_true: 4 * d,
            a,
            sigma,
            n,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.m_true == 0 {
            return Err(Error::InvalidConfig("d, n and m_true must be >= 1".into()));
        }
        if !(self.a > 0.0) {
            return Err(Error::InvalidConfig(format!("a must be positive, got {}", self.a)));
        }
        if self.a > self.m_true as f64 {
            return Err(Error::InvalidConfig(format!(
                "a = {} exceeds the number of ground-truth features {}",
                self.a, self.m_true
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    fn activation_probability(&self) -> f64 {
        self.a / self.m_true as f64
    }

    fn noise_std(&self) -> f64 {
        (self.a * self.sigma * self.sigma / self.d as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub features: Dictionary,
    pub coefficients: CoefficientSet,
    /// `a / 2`: the expected sum of coefficients per activation.
    pub true_weighted_sparsity: f64,
    /// Mean of the proto-activations that was subtracted before adding noise.
    pub proto_mean: Array1<f64>,
}

fn unit_sphere_features<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Dictionary {
    let mut rows = Array2::zeros((m, d));
    for mut row in rows.rows_mut() {
        row.assign(&crate::solver::random_unit_vector(d, rng));
    }
    Dictionary::from_feature_rows_unchecked(rows)
}

fn sample_coefficients<R: Rng + ?Sized>(m: usize, n: usize, p: f64, rng: &mut R) -> CoefficientSet {
    let columns = (0..n)
        .map(|_| {
            let mut col = Vec::new();
            for i in 0..m {
                if rng.random::<f64>() < p {
                    let v: f64 = rng.random();
                    // Uniform(0, 1) can return exactly 0; such an entry is absent.
                    if v > 0.0 {
                        col.push((i, v));
                    }
                }
            }
            col
        })
        .collect();
    CoefficientSet::from_columns_unchecked(m, columns)
}

fn proto_activations(features: &Dictionary, coeffs: &CoefficientSet) -> Array2<f64> {
    crate::model::reconstruct(features, coeffs).expect("shapes agree by construction")
}

/// Sparse linear activations: each of `m_true` unit-sphere features is
/// active with probability `a / m_true` with a Uniform(0, 1) coefficient;
/// the proto-activations are centered and Gaussian noise of variance
/// `a σ² / d` per coordinate is added.
pub fn gen_sparse_linear(cfg: &SynthConfig) -> Result<(ActivationSet, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let features = unit_sphere_features(cfg.d, cfg.m_true, &mut rng);
    let coefficients = sample_coefficients(cfg.m_true, cfg.n, cfg.activation_probability(), &mut rng);
    let proto = ActivationSet::new(proto_activations(&features, &coefficients))?;
    let (centered, proto_mean) = center(&proto);
    let (mut data, _) = centered.into_parts();
    let std = cfg.noise_std();
    if std > 0.0 {
        let noise = Normal::new(0.0, std).expect("finite std");
        data.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    let truth = GroundTruth {
        features,
        coefficients,
        true_weighted_sparsity: cfg.a / 2.0,
        proto_mean,
    };
    Ok((ActivationSet::new(data)?, truth))
}

/// Streams fresh sparse linear batches over one fixed set of features.
/// Each batch is centered on its own empirical mean.
pub struct SparseLinearSampler {
    cfg: SynthConfig,
    features: Dictionary,
    rng: ChaCha8Rng,
}

impl SparseLinearSampler {
    /// Batches have `cfg.n` rows.
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let features = unit_sphere_features(cfg.d, cfg.m_true, &mut rng);
        Ok(Self { cfg, features, rng })
    }

    pub fn features(&self) -> &Dictionary {
        &self.features
    }
}

impl ActivationSampler for SparseLinearSampler {
    fn d(&self) -> usize {
        self.cfg.d
    }

    fn sample(&mut self) -> Result<ActivationSet> {
        let p = self.cfg.activation_probability();
        let coeffs = sample_coefficients(self.cfg.m_true, self.cfg.n, p, &mut self.rng);
        let proto = ActivationSet::new(proto_activations(&self.features, &coeffs))?;
        let (centered, _) = center(&proto);
        let (mut data, _) = centered.into_parts();
        let std = self.cfg.noise_std();
        if std > 0.0 {
            let noise = Normal::new(0.0, std).expect("finite std");
            data.mapv_inplace(|v| v + noise.sample(&mut self.rng));
        }
        ActivationSet::new(data)
    }
}

fn check_dims(d: usize, n: usize) -> Result<()> {
    if d == 0 || n == 0 {
        return Err(Error::InvalidConfig(format!("need d >= 1 and n >= 1, got d = {d}, n = {n}")));
    }
    Ok(())
}

/// I.i.d. standard normal entries.
pub fn gen_gaussian(d: usize, n: usize, seed: u64) -> Result<ActivationSet> {
    check_dims(d, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    ActivationSet::new(data)
}

/// I.i.d. ±1 entries with equal probability.
pub fn gen_rademacher(d: usize, n: usize, seed: u64) -> Result<ActivationSet> {
    check_dims(d, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_simple_fn((n, d), || if rng.random::<bool>() { 1.0 } else { -1.0 });
    ActivationSet::new(data)
}

/// Isotropic directions with |Cauchy| radii, before whitening.
pub fn gen_heavy_tailed_raw(d: usize, n: usize, seed: u64) -> Result<ActivationSet> {
    check_dims(d, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cauchy: Cauchy<f64> = Cauchy::new(0.0, 1.0).expect("valid scale");
    let mut data = Array2::zeros((n, d));
    for mut row in data.rows_mut() {
        let dir = crate::solver::random_unit_vector(d, &mut rng);
        let radius = cauchy.sample(&mut rng).abs();
        row.assign(&(dir * radius));
    }
    ActivationSet::new(data)
}

/// Heavy-tailed isotropic control, whitened to identity sample covariance.
pub fn gen_heavy_tailed(d: usize, n: usize, seed: u64) -> Result<ActivationSet> {
    whiten(&gen_heavy_tailed_raw(d, n, seed)?)
}

/// Subtracts the sample mean and applies the inverse square root of the
/// sample covariance, so the result has identity sample covariance.
pub fn whiten(x: &ActivationSet) -> Result<ActivationSet> {
    let (centered, _) = center(x);
    let data = centered.data();
    let (n, d) = data.dim();
    let cov = data.t().dot(&data) / n as f64;
    let cov = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eigen = SymmetricEigen::new(cov);
    let max_eig = eigen.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if let Some(min) = eigen.eigenvalues.iter().cloned().reduce(f64::min) {
        if !(min > 1e-12 * max_eig.max(f64::MIN_POSITIVE)) {
            return Err(Error::DegenerateData(format!(
                "sample covariance is singular (smallest eigenvalue {min:e}); need n > d"
            )));
        }
    }
    let inv_sqrt = DMatrix::from_diagonal(&eigen.eigenvalues.map(|v| 1.0 / v.sqrt()));
    let transform = &eigen.eigenvectors * inv_sqrt * eigen.eigenvectors.transpose();
    let transform = Array2::from_shape_fn((d, d), |(i, j)| transform[(i, j)]);
    centered.map_data(data.dot(&transform))
}

/// Centers, then scales every row by one shared factor so the mean row
/// norm is 1.
pub fn normalize_for_loss(x: &ActivationSet) -> Result<ActivationSet> {
    let (centered, _) = center(x);
    let mean_norm = centered.mean_row_norm();
    if !(mean_norm > 0.0) {
        return Err(Error::DegenerateData("data is constant; cannot normalize".into()));
    }
    centered.scaled(1.0 / mean_norm)
}

/// Sample covariance `(1/n) Σ (x − μ)(x − μ)ᵀ`.
pub fn sample_covariance(x: &ActivationSet) -> Array2<f64> {
    let (centered, _) = center(x);
    let data = centered.data();
    data.t().dot(&data) / x.n() as f64
}

/// Empirical mean of every coordinate (all rows, all columns).
pub fn entry_mean(x: &ActivationSet) -> f64 {
    x.data().mean().unwrap_or(0.0)
}
