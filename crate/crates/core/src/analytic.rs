//! Closed-form Gaussian conditionals, Bayes predictors for the wave outcome
//! under M(C)AR and Gaussian self-masking, and the conditional and
//! probabilistic oracles.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::datagen::{GaussianParams, OutcomeParams};
use crate::diffcore::{dot, Cholesky, DenseMatrix};
use crate::error::{Error, Result};
use crate::missingness::{MaskedDataset, MechanismSpec, SelfMaskColumn};
use crate::scalar::{normal_cdf, Scalar};
use crate::Matrix;

/// `X_mis | X_obs` for one pattern and row.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGaussian<T> {
    pub missing: Vec<usize>,
    pub mean: Vec<T>,
    pub cov: DenseMatrix<T>,
}

/// Per-pattern quantities that do not depend on the row's values.
#[derive(Clone, Debug)]
pub struct PatternFactor<T> {
    pub observed: Vec<usize>,
    pub missing: Vec<usize>,
    /// `Σ_mis,obs Σ_obs⁻¹`, shape `|mis| × |obs|`.
    pub gain: DenseMatrix<T>,
    /// `Σ_mis − Σ_mis,obs Σ_obs⁻¹ Σ_obs,mis`.
    pub cov: DenseMatrix<T>,
}

impl<T: Scalar> PatternFactor<T> {
    pub fn new(sigma: &DenseMatrix<T>, mask: &[bool]) -> Result<Self> {
        let d = sigma.rows();
        if mask.len() != d || sigma.cols() != d {
            return Err(Error::shape("conditional_gaussian", format!("mask {} vs Σ {:?}", mask.len(), sigma.shape())));
        }
        let observed: Vec<usize> = (0..d).filter(|&j| !mask[j]).collect();
        let missing: Vec<usize> = (0..d).filter(|&j| mask[j]).collect();
        let s_mm = sigma.select(&missing, &missing);
        if observed.is_empty() || missing.is_empty() {
            return Ok(Self {
                gain: DenseMatrix::zeros(missing.len(), observed.len()),
                cov: s_mm,
                observed,
                missing,
            });
        }
        let s_oo = sigma.select(&observed, &observed);
        let s_om = sigma.select(&observed, &missing);
        let solved = Cholesky::factor(&s_oo)?.solve(&s_om)?;
        let gain = solved.transpose();
        let mut cov = s_mm.sub(&s_om.t_matmul(&solved)?)?;
        cov.symmetrize();
        for k in 0..cov.rows() {
            if cov[(k, k)] < T::zero() {
                cov[(k, k)] = T::zero();
            }
        }
        Ok(Self {
            observed,
            missing,
            gain,
            cov,
        })
    }

    /// Conditional mean for a row whose observed entries are read from
    /// `row` (missing entries of `row` are ignored).
    pub fn mean(&self, mu: &[T], row: &[T]) -> Vec<T> {
        let centred: Vec<T> = self.observed.iter().map(|&o| row[o] - mu[o]).collect();
        self.missing
            .iter()
            .enumerate()
            .map(|(k, &m)| mu[m] + dot(self.gain.row(k), &centred))
            .collect()
    }
}

/// Conditional law of the missing block given the observed entries of
/// `row`, via Cholesky solves on `Σ_obs`.
pub fn conditional_gaussian<T: Scalar>(
    mu: &[T],
    sigma: &DenseMatrix<T>,
    mask: &[bool],
    row: &[T],
) -> Result<ConditionalGaussian<T>> {
    let f = PatternFactor::new(sigma, mask)?;
    Ok(ConditionalGaussian {
        mean: f.mean(mu, row),
        missing: f.missing,
        cov: f.cov,
    })
}

/// Factorisations keyed by mask pattern, shared across rows and threads.
#[derive(Debug, Default)]
pub struct PatternCache {
    map: Mutex<HashMap<Vec<bool>, Arc<PatternFactor<f64>>>>,
}

impl PatternCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, sigma: &Matrix, mask: &[bool]) -> Result<Arc<PatternFactor<f64>>> {
        if let Some(f) = self.map.lock().expect("cache lock").get(mask) {
            return Ok(f.clone());
        }
        // Factor outside the lock; a racing thread computes the same value.
        let f = Arc::new(PatternFactor::new(sigma, mask)?);
        Ok(self
            .map
            .lock()
            .expect("cache lock")
            .entry(mask.to_vec())
            .or_insert(f)
            .clone())
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `E[h(Z)]` for an index `Z ~ N(m, s²)`, using
/// `E[Φ(γ(Z+b))] = Φ(γ(m+b)/√(1+γ²s²))`.
pub fn wave_expectation(op: &OutcomeParams, m: f64, s2: f64) -> f64 {
    let g = op.gamma;
    let shrink = (1.0 + g * g * s2.max(0.0)).sqrt();
    let waves: f64 = op.waves.iter().map(|&(a, b)| a * normal_cdf(g * (m + b) / shrink)).sum();
    (m - 1.0) + waves
}

/// Mask from `NaN` positions.
pub fn nan_mask(row: &[f64]) -> Vec<bool> {
    row.iter().map(|v| v.is_nan()).collect()
}

/// Analytic predictors and oracles for one generating model. With
/// `selfmask` set, the posterior over missing entries accounts for Gaussian
/// self-masking; otherwise it is the M(C)AR conditional.
#[derive(Debug)]
pub struct AnalyticModel {
    pub gp: GaussianParams,
    pub op: OutcomeParams,
    pub selfmask: Option<Vec<SelfMaskColumn>>,
    cache: PatternCache,
}

impl Clone for AnalyticModel {
    fn clone(&self) -> Self {
        Self::new(self.gp.clone(), self.op.clone(), self.selfmask.clone())
    }
}

impl AnalyticModel {
    pub fn new(gp: GaussianParams, op: OutcomeParams, selfmask: Option<Vec<SelfMaskColumn>>) -> Self {
        Self {
            gp,
            op,
            selfmask,
            cache: PatternCache::new(),
        }
    }

    pub fn mar(gp: GaussianParams, op: OutcomeParams) -> Self {
        Self::new(gp, op, None)
    }

    /// Picks the posterior matching `spec`: self-masking parameters are
    /// used only for self-masking specs.
    pub fn for_spec(gp: GaussianParams, op: OutcomeParams, spec: &MechanismSpec) -> Self {
        match spec {
            MechanismSpec::Selfmask { columns, .. } => Self::new(gp, op, Some(columns.clone())),
            _ => Self::mar(gp, op),
        }
    }

    pub fn cache(&self) -> &PatternCache {
        &self.cache
    }

    /// Posterior over the missing entries of `row` given its observed ones
    /// (and, for self-masking, the fact that they went missing).
    pub fn posterior(&self, row: &[f64], mask: &[bool]) -> Result<ConditionalGaussian<f64>> {
        let f = self.cache.get(&self.gp.sigma, mask)?;
        let a = f.mean(&self.gp.mu, row);
        let Some(cols) = &self.selfmask else {
            return Ok(ConditionalGaussian {
                missing: f.missing.clone(),
                mean: a,
                cov: f.cov.clone(),
            });
        };
        if f.missing.is_empty() {
            return Ok(ConditionalGaussian {
                missing: Vec::new(),
                mean: a,
                cov: f.cov.clone(),
            });
        }
        // Product of N(A, C) with N(μ̃, D): mean A + C(C+D)⁻¹(μ̃ − A),
        // covariance C − C(C+D)⁻¹C. C+D is well conditioned even when C is not.
        let c = &f.cov;
        let mut cd = c.clone();
        let mut resid = Vec::with_capacity(a.len());
        for (k, &j) in f.missing.iter().enumerate() {
            let st = cols[j].sigma_tilde;
            cd[(k, k)] += st * st;
            resid.push(cols[j].mu_tilde - a[k]);
        }
        let chol = Cholesky::factor(&cd)?;
        let w = chol.solve_vec(&resid);
        let mean: Vec<f64> = a.iter().zip(c.mat_vec(&w)?).map(|(ak, cw)| ak + cw).collect();
        let mut cov = c.sub(&c.t_matmul(&chol.solve(c)?)?)?;
        cov.symmetrize();
        Ok(ConditionalGaussian {
            missing: f.missing.clone(),
            mean,
            cov,
        })
    }

    /// Conditional mean and variance of the index `Xβ + β₀`.
    pub fn index_moments(&self, row: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
        let post = self.posterior(row, mask)?;
        let beta = &self.op.beta;
        let mut m = self.op.beta0;
        for (j, &x) in row.iter().enumerate() {
            if !mask[j] {
                m += beta[j] * x;
            }
        }
        let bm: Vec<f64> = post.missing.iter().map(|&j| beta[j]).collect();
        m += dot(&bm, &post.mean);
        let s2 = if bm.is_empty() { 0.0 } else { dot(&bm, &post.cov.mat_vec(&bm)?) };
        Ok((m, s2.max(0.0)))
    }

    pub fn bayes(&self, row: &[f64], mask: &[bool]) -> Result<f64> {
        let (m, s2) = self.index_moments(row, mask)?;
        Ok(wave_expectation(&self.op, m, s2))
    }

    /// `h` at the row completed with the posterior mean.
    pub fn oracle_cond(&self, row: &[f64], mask: &[bool]) -> Result<f64> {
        let post = self.posterior(row, mask)?;
        let mut full = row.to_vec();
        for (k, &j) in post.missing.iter().enumerate() {
            full[j] = post.mean[k];
        }
        Ok(self.op.h(&full))
    }

    /// Average of `h` over `n_draws` completions drawn from the posterior.
    pub fn oracle_prob<R: Rng + ?Sized>(&self, row: &[f64], mask: &[bool], n_draws: usize, rng: &mut R) -> Result<f64> {
        if n_draws == 0 {
            return Err(Error::Config("n_draws must be at least 1".into()));
        }
        let post = self.posterior(row, mask)?;
        if post.missing.is_empty() {
            return Ok(self.op.h(row));
        }
        let l = psd_cholesky(&post.cov)?;
        let mut full = row.to_vec();
        let mut z = vec![0.0; post.missing.len()];
        let mut acc = 0.0;
        for _ in 0..n_draws {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let lz = l.lower_mul(&z);
            for (k, &j) in post.missing.iter().enumerate() {
                full[j] = post.mean[k] + lz[k];
            }
            acc += self.op.h(&full);
        }
        Ok(acc / n_draws as f64)
    }

    /// Bayes predictions for every row, in parallel.
    pub fn bayes_all(&self, md: &MaskedDataset) -> Result<Vec<f64>> {
        (0..md.n())
            .into_par_iter()
            .map(|i| self.bayes(md.row(i), md.row_mask(i)))
            .collect()
    }

    pub fn oracle_cond_all(&self, md: &MaskedDataset) -> Result<Vec<f64>> {
        (0..md.n())
            .into_par_iter()
            .map(|i| self.oracle_cond(md.row(i), md.row_mask(i)))
            .collect()
    }

    /// Probabilistic oracle for every row; row `i` draws from its own
    /// stream so results do not depend on thread scheduling.
    pub fn oracle_prob_all(&self, md: &MaskedDataset, n_draws: usize, seed: u64) -> Result<Vec<f64>> {
        (0..md.n())
            .into_par_iter()
            .map(|i| {
                let mut rng = crate::rng::rng_from(crate::rng::derive_indexed(seed, "oracle-prob", i as u64));
                self.oracle_prob(md.row(i), md.row_mask(i), n_draws, &mut rng)
            })
            .collect()
    }
}

/// Lower Cholesky factor of a PSD matrix, adding the smallest diagonal
/// jitter (relative to the largest diagonal entry) that makes it factor.
pub fn psd_cholesky(a: &Matrix) -> Result<Cholesky<f64>> {
    if a.rows() == 0 {
        return Cholesky::factor(a);
    }
    let scale = (0..a.rows()).map(|i| a[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    let mut m = a.clone();
    for attempt in 0..12 {
        match Cholesky::factor(&m) {
            Ok(c) => return Ok(c),
            Err(e) if attempt == 11 => return Err(e),
            Err(_) => {
                let next = if jitter == 0.0 { 1e-14 * scale } else { jitter * 10.0 };
                for i in 0..m.rows() {
                    m[(i, i)] += next - jitter;
                }
                jitter = next;
            }
        }
    }
    unreachable!()
}

/// M(C)AR Bayes predictor for one observed row (`NaN` = missing).
pub fn bayes_predict_mar(xtilde: &[f64], gp: &GaussianParams, op: &OutcomeParams) -> Result<f64> {
    AnalyticModel::mar(gp.clone(), op.clone()).bayes(xtilde, &nan_mask(xtilde))
}

/// Bayes predictor under Gaussian self-masking with parameters `spec`.
pub fn bayes_predict_selfmask(
    xtilde: &[f64],
    gp: &GaussianParams,
    op: &OutcomeParams,
    spec: &[SelfMaskColumn],
) -> Result<f64> {
    AnalyticModel::new(gp.clone(), op.clone(), Some(spec.to_vec())).bayes(xtilde, &nan_mask(xtilde))
}

pub fn oracle_cond_predict(xtilde: &[f64], gp: &GaussianParams, op: &OutcomeParams) -> Result<f64> {
    AnalyticModel::mar(gp.clone(), op.clone()).oracle_cond(xtilde, &nan_mask(xtilde))
}

pub fn oracle_prob_predict<R: Rng + ?Sized>(
    xtilde: &[f64],
    gp: &GaussianParams,
    op: &OutcomeParams,
    n_draws: usize,
    rng: &mut R,
) -> Result<f64> {
    AnalyticModel::mar(gp.clone(), op.clone()).oracle_prob(xtilde, &nan_mask(xtilde), n_draws, rng)
}

/// `(1/N) Σ (yᵢ − f̂ᵢ)²`.
pub fn empirical_bayes_risk(predictions: &[f64], y: &[f64]) -> Result<f64> {
    mse(predictions, y)
}

pub fn mse(predictions: &[f64], y: &[f64]) -> Result<f64> {
    if predictions.len() != y.len() {
        return Err(Error::shape("mse", format!("{} predictions for {} outcomes", predictions.len(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::Contract("mean squared error of an empty sample".into()));
    }
    Ok(predictions.iter().zip(y).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / y.len() as f64)
}
