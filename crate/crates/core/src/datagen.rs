//! Synthetic Gaussian covariates, the wave outcome, and ingestion of
//! external complete-case tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::diffcore::{dot, Cholesky};
use crate::error::{Error, Result};
use crate::scalar::normal_cdf;
use crate::Matrix;

/// Curvature of the wave outcome, `20·√(π/8)`.
pub fn wave_gamma() -> f64 {
    20.0 * (std::f64::consts::PI / 8.0).sqrt()
}

/// Amplitude/location pairs of the wave outcome.
pub const WAVES: [(f64, f64); 3] = [(2.0, -0.8), (-4.0, -1.0), (2.0, -1.2)];

pub const SIGNAL_TO_NOISE: f64 = 10.0;
pub const NOISE_CALIBRATION_SAMPLES: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub d: usize,
    pub lambda: f64,
    pub mu: Vec<f64>,
    /// `B Bᵀ + jitter·I`, the covariance every sampler and closed form uses.
    pub sigma: Matrix,
    /// `B`, of shape `d × ⌈λd⌉`.
    pub factor: Matrix,
    pub jitter: f64,
}

impl GaussianParams {
    /// Wraps a known mean and covariance (no factor, no jitter).
    pub fn from_moments(mu: Vec<f64>, sigma: Matrix) -> Result<Self> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(Error::shape("gaussian_params", format!("mu {d}, sigma {:?}", sigma.shape())));
        }
        Ok(Self {
            d,
            lambda: 1.0,
            mu,
            factor: sigma.clone(),
            sigma,
            jitter: 0.0,
        })
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64>> {
        Cholesky::factor(&self.sigma)
    }

    pub fn marginal_sd(&self, j: usize) -> f64 {
        self.sigma[(j, j)].sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeParams {
    pub beta: Vec<f64>,
    pub beta0: f64,
    pub gamma: f64,
    pub waves: Vec<(f64, f64)>,
    pub sigma_eps: f64,
}

impl OutcomeParams {
    /// Wave outcome with the default curvature and wave set; noise is
    /// filled in by calibration.
    pub fn wave(beta: Vec<f64>, beta0: f64) -> Self {
        Self {
            beta,
            beta0,
            gamma: wave_gamma(),
            waves: WAVES.to_vec(),
            sigma_eps: 0.0,
        }
    }

    /// `β = 1/√(1ᵀΣ1)` so that `var(Xβ) = 1`, and `β₀ = −βᵀμ`.
    pub fn for_gaussian(gp: &GaussianParams) -> Result<Self> {
        let beta = unit_variance_beta(&gp.sigma)?;
        let beta0 = -dot(&beta, &gp.mu);
        Ok(Self::wave(beta, beta0))
    }

    #[inline]
    pub fn index(&self, row: &[f64]) -> f64 {
        dot(row, &self.beta) + self.beta0
    }

    /// Noiseless outcome as a function of the index `z = xβ + β₀`.
    #[inline]
    pub fn h_of_index(&self, z: f64) -> f64 {
        let waves: f64 = self
            .waves
            .iter()
            .map(|&(a, b)| a * normal_cdf(self.gamma * (z + b)))
            .sum();
        (z - 1.0) + waves
    }

    #[inline]
    pub fn h(&self, row: &[f64]) -> f64 {
        self.h_of_index(self.index(row))
    }
}

/// Ones rescaled so that `βᵀΣβ = 1`.
pub fn unit_variance_beta(sigma: &Matrix) -> Result<Vec<f64>> {
    let d = sigma.rows();
    let ones = vec![1.0; d];
    let q = dot(&ones, &sigma.mat_vec(&ones)?);
    if !(q > 0.0) {
        return Err(Error::Contract(format!("1ᵀΣ1 = {q} is not positive")));
    }
    let s = q.sqrt();
    Ok(ones.into_iter().map(|v| v / s).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub gparams: Option<GaussianParams>,
    pub oparams: OutcomeParams,
    pub seed: Option<u64>,
    pub columns: Option<Vec<String>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// Row subset, sharing generating parameters.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            gparams: self.gparams.clone(),
            oparams: self.oparams.clone(),
            seed: self.seed,
            columns: self.columns.clone(),
        }
    }

    /// Noiseless outcome `h(x)` per row.
    pub fn signal(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.oparams.h(self.x.row(i))).collect()
    }

    /// Per-column mean and standard deviation: model moments for simulated
    /// data, sample moments otherwise.
    pub fn marginal_moments(&self) -> (Vec<f64>, Vec<f64>) {
        if let Some(gp) = &self.gparams {
            return (gp.mu.clone(), (0..gp.d).map(|j| gp.marginal_sd(j)).collect());
        }
        column_moments(&self.x)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = DatasetMeta::from(self);
        let mut c = Container::new("dataset", &meta)?;
        c.push("x", self.x.clone());
        c.push_vec("y", &self.y);
        c.push_vec("beta", &self.oparams.beta);
        if let Some(gp) = &self.gparams {
            c.push_vec("mu", &gp.mu);
            c.push("sigma", gp.sigma.clone());
            c.push("factor", gp.factor.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("dataset")?;
        let meta: DatasetMeta = c.meta()?;
        let x = c.get("x")?.clone();
        let y = c.get_vec("y")?;
        if y.len() != x.rows() {
            return Err(Error::Format(format!("{} outcomes for {} rows", y.len(), x.rows())));
        }
        let gparams = if c.has("sigma") {
            Some(GaussianParams {
                d: x.cols(),
                lambda: meta.lambda.unwrap_or(1.0),
                mu: c.get_vec("mu")?,
                sigma: c.get("sigma")?.clone(),
                factor: c.get("factor")?.clone(),
                jitter: meta.jitter,
            })
        } else {
            None
        };
        Ok(Self {
            x,
            y,
            gparams,
            oparams: OutcomeParams {
                beta: c.get_vec("beta")?,
                beta0: meta.beta0,
                gamma: meta.gamma,
                waves: meta.waves,
                sigma_eps: meta.sigma_eps,
            },
            seed: meta.seed,
            columns: meta.columns,
        })
    }

    /// Writes the binary container to `path` and the metadata sidecar next
    /// to it (`<path>.toml`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_container()?.write(path)?;
        let meta = DatasetMeta::from(self);
        let text = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

/// Human-readable metadata persisted beside every dataset container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub n: usize,
    pub d: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub jitter: f64,
    pub beta0: f64,
    pub gamma: f64,
    pub waves: Vec<(f64, f64)>,
    pub sigma_eps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
}

impl From<&Dataset> for DatasetMeta {
    fn from(ds: &Dataset) -> Self {
        Self {
            format_version: crate::container::FORMAT_VERSION,
            n: ds.n(),
            d: ds.d(),
            seed: ds.seed,
            lambda: ds.gparams.as_ref().map(|g| g.lambda),
            jitter: ds.gparams.as_ref().map_or(0.0, |g| g.jitter),
            beta0: ds.oparams.beta0,
            gamma: ds.oparams.gamma,
            waves: ds.oparams.waves.clone(),
            sigma_eps: ds.oparams.sigma_eps,
            columns: ds.columns.clone(),
        }
    }
}

fn std_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Draws `μ ~ N(0, I)` and `Σ = B Bᵀ` with `B` of i.i.d. standard normals,
/// plus a diagonal jitter of `1e-6·tr(Σ)/d`.
pub fn make_gaussian_params<R: Rng + ?Sized>(d: usize, lambda: f64, rng: &mut R) -> Result<GaussianParams> {
    if d == 0 {
        return Err(Error::Config("dimension must be at least 1".into()));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    let rank = ((lambda * d as f64) - 1e-12).ceil().max(1.0) as usize;
    let mu: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let factor = std_normal_matrix(d, rank, rng);
    let mut sigma = factor.matmul_t(&factor)?;
    sigma.symmetrize();
    let jitter = 1e-6 * sigma.trace() / d as f64;
    for i in 0..d {
        sigma[(i, i)] += jitter;
    }
    Ok(GaussianParams {
        d,
        lambda,
        mu,
        sigma,
        factor,
        jitter,
    })
}

/// Rows i.i.d. `N(μ, Σ)` via `μ + L z`.
pub fn sample_covariates<R: Rng + ?Sized>(gp: &GaussianParams, n: usize, rng: &mut R) -> Result<Matrix> {
    let chol = gp.cholesky()?;
    let d = gp.d;
    let mut x = Matrix::zeros(n, d);
    let mut z = vec![0.0; d];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let lz = chol.lower_mul(&z);
        for (j, o) in x.row_mut(i).iter_mut().enumerate() {
            *o = gp.mu[j] + lz[j];
        }
    }
    Ok(x)
}

/// `y = h(x) + ε`, `ε ~ N(0, σ_ε²)`.
pub fn wave_outcome<R: Rng + ?Sized>(x: &Matrix, op: &OutcomeParams, rng: &mut R) -> Vec<f64> {
    (0..x.rows())
        .map(|i| {
            let e: f64 = if op.sigma_eps > 0.0 {
                op.sigma_eps * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            op.h(x.row(i)) + e
        })
        .collect()
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0)
}

fn noise_for_variance(var_h: f64) -> Result<f64> {
    if !(var_h > 1e-14) || !var_h.is_finite() {
        return Err(Error::Calibration(format!(
            "signal variance {var_h:e} leaves the signal-to-noise ratio undefined"
        )));
    }
    Ok((var_h / SIGNAL_TO_NOISE).sqrt())
}

/// `σ_ε = √(var̂(h)/10)` from a fresh Monte-Carlo sample.
pub fn calibrate_noise<R: Rng + ?Sized>(gp: &GaussianParams, op: &OutcomeParams, rng: &mut R) -> Result<f64> {
    let x = sample_covariates(gp, NOISE_CALIBRATION_SAMPLES, rng)?;
    let h: Vec<f64> = (0..x.rows()).map(|i| op.h(x.row(i))).collect();
    noise_for_variance(sample_variance(&h))
}

/// Generating model plus a dataset of `n` rows, all streams derived from
/// `seed`.
pub fn simulate(d: usize, lambda: f64, n: usize, seed: u64) -> Result<Dataset> {
    use crate::rng::{derive, rng_from};
    let gp = make_gaussian_params(d, lambda, &mut rng_from(derive(seed, "gaussian-params")))?;
    let mut op = OutcomeParams::for_gaussian(&gp)?;
    op.sigma_eps = calibrate_noise(&gp, &op, &mut rng_from(derive(seed, "noise-calibration")))?;
    let x = sample_covariates(&gp, n, &mut rng_from(derive(seed, "covariates")))?;
    let y = wave_outcome(&x, &op, &mut rng_from(derive(seed, "outcome-noise")));
    Ok(Dataset {
        x,
        y,
        gparams: Some(gp),
        oparams: op,
        seed: Some(seed),
        columns: None,
    })
}

pub(crate) fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for j in 0..d {
        let col = x.column(j);
        let m = col.iter().sum::<f64>() / n as f64;
        mean[j] = m;
        sd[j] = if n > 1 { sample_variance(&col).sqrt() } else { 0.0 };
    }
    (mean, sd)
}

/// Sample covariance (denominator `n − 1`).
pub fn empirical_covariance(x: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let (mean, _) = column_moments(x);
    let mut c = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            c[(i, j)] = x[(i, j)] - mean[j];
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let mut cov = c.t_matmul(&c).expect("shapes agree").scale(1.0 / denom);
    cov.symmetrize();
    cov
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Binary,
}

/// Column name → kind. Columns are read in file-header order.
pub type TableSchema = BTreeMap<String, ColumnKind>;

#[derive(Clone, Debug, PartialEq)]
pub struct IngestReport {
    pub rows_read: usize,
    /// Zero-based data-row indices (header excluded) that were dropped.
    pub dropped_rows: Vec<usize>,
}

impl IngestReport {
    pub fn dropped_fraction(&self) -> f64 {
        if self.rows_read == 0 {
            0.0
        } else {
            self.dropped_rows.len() as f64 / self.rows_read as f64
        }
    }
}

fn parse_cell(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if s.is_empty() || s == "NA" {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a comma-delimited table with a header row, keeps the complete
/// cases over the schema's columns, z-scores continuous columns and
/// attaches a wave outcome.
pub fn ingest_table(path: impl AsRef<Path>, schema: &TableSchema, seed: u64) -> Result<(Dataset, IngestReport)> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    if schema.is_empty() {
        return Err(Error::Ingest("schema selects no columns".into()));
    }
    for name in schema.keys() {
        if !headers.iter().any(|h| h.trim() == name) {
            return Err(Error::Ingest(format!("unknown column '{name}' (not in header)")));
        }
    }
    let selected: Vec<(usize, String, ColumnKind)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| schema.get(h.trim()).map(|k| (i, h.trim().to_string(), *k)))
        .collect();

    let d = selected.len();
    let mut data = Vec::new();
    let mut dropped = Vec::new();
    let mut rows_read = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ingest(format!("row {}: {e}", r + 1)))?;
        rows_read += 1;
        let mut row = Vec::with_capacity(d);
        for (ci, name, kind) in &selected {
            let raw = rec.get(*ci).unwrap_or("");
            match parse_cell(raw) {
                None => break,
                Some(v) => {
                    if *kind == ColumnKind::Binary && v != 0.0 && v != 1.0 {
                        return Err(Error::Ingest(format!(
                            "row {}, column '{name}': binary value {raw:?} outside {{0, 1}}",
                            r + 1
                        )));
                    }
                    row.push(v);
                }
            }
        }
        if row.len() == d {
            data.extend(row);
        } else {
            dropped.push(r);
        }
    }
    let n = rows_read - dropped.len();
    if n == 0 {
        return Err(Error::Ingest(format!(
            "no complete rows among {rows_read} data rows"
        )));
    }
    let mut x = Matrix::from_vec(n, d, data)?;
    let (mean, sd) = column_moments(&x);
    for (j, (_, _, kind)) in selected.iter().enumerate() {
        if *kind == ColumnKind::Continuous {
            let s = if sd[j] > 0.0 { sd[j] } else { 1.0 };
            for i in 0..n {
                x[(i, j)] = (x[(i, j)] - mean[j]) / s;
            }
        }
    }

    let oparams = empirical_outcome(&x)?;
    let y = wave_outcome(&x, &oparams, &mut crate::rng::rng_from(crate::rng::derive(seed, "outcome-noise")));
    let ds = Dataset {
        x,
        y,
        gparams: None,
        oparams,
        seed: Some(seed),
        columns: Some(selected.into_iter().map(|(_, n, _)| n).collect()),
    };
    Ok((
        ds,
        IngestReport {
            rows_read,
            dropped_rows: dropped,
        },
    ))
}

/// Wave outcome for covariates without a generating model: `β` rescaled by
/// the sample covariance, `β₀` centring the index, and `σ_ε` from the
/// sample variance of `h`. Degenerate tables (a single row, or no
/// variation along the ones direction) keep `β = 1/√d` and unit signal
/// variance for the noise level.
pub fn empirical_outcome(x: &Matrix) -> Result<OutcomeParams> {
    let (n, d) = x.shape();
    let cov = empirical_covariance(x);
    let beta = match unit_variance_beta(&cov) {
        Ok(b) if n > 1 => b,
        _ => vec![1.0 / (d as f64).sqrt(); d],
    };
    let idx_mean = (0..n).map(|i| dot(x.row(i), &beta)).sum::<f64>() / n as f64;
    let mut op = OutcomeParams::wave(beta, -idx_mean);
    let h: Vec<f64> = (0..n).map(|i| op.h(x.row(i))).collect();
    op.sigma_eps = if n > 1 {
        noise_for_variance(sample_variance(&h)).unwrap_or_else(|_| (1.0 / SIGNAL_TO_NOISE).sqrt())
    } else {
        (1.0 / SIGNAL_TO_NOISE).sqrt()
    };
    Ok(op)
}
