//! Missingness mechanisms: MCAR, non-monotone logistic MAR, Gaussian
//! self-masking (MNAR) and outcome-driven MAR-Y. Each mechanism is first
//! instantiated into a [`MechanismSpec`] holding every drawn and calibrated
//! parameter, then applied to draw masks; a `MechanismSpec` alone is enough to
//! re-create an environment.

use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::datagen::{column_moments, empirical_covariance, Dataset};
use crate::diffcore::dot;
use crate::error::{Error, Result};
use crate::scalar::sigmoid;
use crate::Matrix;

/// Bracket searched for logistic intercepts.
pub const INTERCEPT_BRACKET: (f64, f64) = (-30.0, 30.0);
pub const CALIBRATION_TOL: f64 = 1e-3;
const BISECTION_ITERS: usize = 100;
/// Intercept whose sigmoid underflows to exactly zero (finite, so specs
/// stay serialisable).
const NEVER: f64 = -1e3;

/// Fraction of columns masked completely at random under logistic MAR.
pub const MAR_MCAR_FRACTION: f64 = 0.3;
pub const DEFAULT_TILT: f64 = 2.0;
/// Width of the self-masking bump relative to the column's marginal sd.
pub const SELFMASK_WIDTH: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    Mcar,
    MarLogistic,
    Selfmask,
    MarY,
}

impl MechanismKind {
    /// Whether the mechanism is ignorable, so that the M(C)AR Bayes
    /// predictor applies.
    pub fn is_ignorable(self) -> bool {
        matches!(self, Self::Mcar | Self::MarLogistic)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mcar => "mcar",
            Self::MarLogistic => "mar-logistic",
            Self::Selfmask => "selfmask",
            Self::MarY => "mar-y",
        }
    }
}

impl std::str::FromStr for MechanismKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcar" => Ok(Self::Mcar),
            "mar-logistic" | "mar" => Ok(Self::MarLogistic),
            "selfmask" | "mnar" => Ok(Self::Selfmask),
            "mar-y" => Ok(Self::MarY),
            other => Err(Error::Config(format!(
                "unknown mechanism '{other}' (expected mcar, mar-logistic, selfmask or mar-y)"
            ))),
        }
    }
}

/// What to instantiate: the mechanism family, its target rate and the
/// family's free knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub kind: MechanismKind,
    pub rate: f64,
    /// Self-masking tilt `k`.
    #[serde(default = "default_tilt")]
    pub tilt: f64,
    /// Multiplier on the MAR-Y slope magnitude `1/σ_Y`.
    #[serde(default = "default_strength")]
    pub y_strength: f64,
}

fn default_tilt() -> f64 {
    DEFAULT_TILT
}

fn default_strength() -> f64 {
    1.0
}

impl MechanismConfig {
    pub fn new(kind: MechanismKind, rate: f64) -> Self {
        Self {
            kind,
            rate,
            tilt: DEFAULT_TILT,
            y_strength: 1.0,
        }
    }

    pub fn with_rate(self, rate: f64) -> Self {
        Self { rate, ..self }
    }

    /// Draws the mechanism's random parameters and calibrates its
    /// intercepts against `ds`.
    pub fn instantiate<R: Rng + ?Sized>(&self, ds: &Dataset, rng: &mut R) -> Result<MechanismSpec> {
        let p = self.rate;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("missing rate must lie in [0, 1), got {p}")));
        }
        match self.kind {
            MechanismKind::Mcar => Ok(MechanismSpec::Mcar { rate: p }),
            MechanismKind::MarLogistic => instantiate_mar_logistic(ds, p, rng),
            MechanismKind::Selfmask => instantiate_selfmask(ds, p, self.tilt),
            MechanismKind::MarY => instantiate_mar_y(ds, p, self.y_strength, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticColumn {
    pub column: usize,
    /// Raw direction over the MCAR columns.
    pub delta: Vec<f64>,
    pub s: f64,
    pub v: f64,
    /// `δ / (s·v)`.
    pub slopes: Vec<f64>,
    pub intercept: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfMaskColumn {
    /// Peak masking probability `K ∈ (0, 1]`.
    pub peak: f64,
    pub mu_tilde: f64,
    pub sigma_tilde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarYColumn {
    pub slope: f64,
    pub intercept: f64,
}

/// A fully instantiated mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MechanismSpec {
    Mcar {
        rate: f64,
    },
    MarLogistic {
        rate: f64,
        /// Sorted indices of the MCAR columns `J`.
        mcar_columns: Vec<usize>,
        /// Centres subtracted from the `J` columns inside the logistic index.
        center: Vec<f64>,
        columns: Vec<LogisticColumn>,
    },
    Selfmask {
        rate: f64,
        tilt: f64,
        columns: Vec<SelfMaskColumn>,
    },
    MarY {
        rate: f64,
        columns: Vec<MarYColumn>,
    },
}

impl MechanismSpec {
    pub fn kind(&self) -> MechanismKind {
        match self {
            Self::Mcar { .. } => MechanismKind::Mcar,
            Self::MarLogistic { .. } => MechanismKind::MarLogistic,
            Self::Selfmask { .. } => MechanismKind::Selfmask,
            Self::MarY { .. } => MechanismKind::MarY,
        }
    }

    pub fn rate(&self) -> f64 {
        match *self {
            Self::Mcar { rate }
            | Self::MarLogistic { rate, .. }
            | Self::Selfmask { rate, .. }
            | Self::MarY { rate, .. } => rate,
        }
    }

    /// Probability that cell `(·, j)` of a row is masked. `mcar_mask` is
    /// the row's mask over `J` for logistic MAR and is ignored otherwise.
    pub fn mask_probability(&self, j: usize, x: &[f64], y: f64, j_mask: &[bool]) -> f64 {
        match self {
            Self::Mcar { rate } => *rate,
            Self::MarLogistic {
                rate,
                mcar_columns,
                center,
                columns,
            } => match mcar_columns.binary_search(&j) {
                Ok(_) => *rate,
                Err(_) => {
                    let lc = columns.iter().find(|c| c.column == j).expect("every non-J column has a logistic model");
                    let mut z = lc.intercept;
                    for (k, &jj) in mcar_columns.iter().enumerate() {
                        if !j_mask[k] {
                            z += lc.slopes[k] * (x[jj] - center[k]);
                        }
                    }
                    sigmoid(z)
                }
            },
            Self::Selfmask { columns, .. } => {
                let c = &columns[j];
                c.peak * bump(x[j], c.mu_tilde, c.sigma_tilde)
            }
            Self::MarY { columns, .. } => {
                let c = &columns[j];
                sigmoid(c.slope * y + c.intercept)
            }
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        let got = match self {
            Self::Mcar { .. } => return Ok(()),
            Self::MarLogistic { mcar_columns, columns, .. } => {
                if mcar_columns.iter().any(|&j| j >= d) || columns.iter().any(|c| c.column >= d) {
                    return Err(Error::shape("apply_spec", format!("column index beyond d = {d}")));
                }
                mcar_columns.len() + columns.len()
            }
            Self::Selfmask { columns, .. } => columns.len(),
            Self::MarY { columns, .. } => columns.len(),
        };
        if got != d {
            return Err(Error::shape("apply_spec", format!("mechanism covers {got} columns, data has {d}")));
        }
        Ok(())
    }
}

#[inline]
fn bump(x: f64, mu_tilde: f64, sigma_tilde: f64) -> f64 {
    let u = (x - mu_tilde) / sigma_tilde;
    (-0.5 * u * u).exp()
}

/// Bisection on `γ₀` so that `mean_rate(γ₀) = p`, assuming `mean_rate`
/// is increasing.
pub fn calibrate_intercept<F: Fn(f64) -> f64>(mean_rate: F, p: f64) -> Result<f64> {
    let (mut lo, mut hi) = INTERCEPT_BRACKET;
    let (flo, fhi) = (mean_rate(lo), mean_rate(hi));
    if !(flo - CALIBRATION_TOL <= p && p <= fhi + CALIBRATION_TOL) {
        return Err(Error::Calibration(format!(
            "rate {p} outside the reachable range [{flo:.4}, {fhi:.4}] for intercepts in [{lo}, {hi}]"
        )));
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let g0 = 0.5 * (lo + hi);
    let achieved = mean_rate(g0);
    if (achieved - p).abs() > CALIBRATION_TOL {
        return Err(Error::Calibration(format!(
            "bisection reached rate {achieved:.5} for target {p}"
        )));
    }
    Ok(g0)
}

/// Intercept for `sigmoid(index + γ₀)` averaged over the given indices.
pub fn calibrate_logistic(index: &[f64], p: f64) -> Result<f64> {
    if index.is_empty() {
        return Err(Error::Calibration("empty calibration sample".into()));
    }
    let n = index.len() as f64;
    calibrate_intercept(|g0| index.iter().map(|&z| sigmoid(z + g0)).sum::<f64>() / n, p)
}

fn instantiate_mar_logistic<R: Rng + ?Sized>(ds: &Dataset, p: f64, rng: &mut R) -> Result<MechanismSpec> {
    let (n, d) = (ds.n(), ds.d());
    if d < 2 {
        return Err(Error::Config("logistic MAR needs at least two columns".into()));
    }
    let nj = ((MAR_MCAR_FRACTION * d as f64).floor() as usize).max(1);
    let mut mcar_columns = sample_indices(rng, d, nj).into_vec();
    mcar_columns.sort_unstable();
    if p == 0.0 {
        return Ok(zero_rate_logistic(mcar_columns, d));
    }
    let (mean, _) = ds.marginal_moments();
    let center: Vec<f64> = mcar_columns.iter().map(|&j| mean[j]).collect();
    let sigma_j = match &ds.gparams {
        Some(gp) => gp.sigma.select(&mcar_columns, &mcar_columns),
        None => empirical_covariance(&ds.x.select_cols(&mcar_columns)),
    };

    // One realisation of the J-stage mask and the centred, zero-filled J
    // values, shared by every column's calibration.
    let mut zfill = Matrix::zeros(n, nj);
    for i in 0..n {
        for (k, &j) in mcar_columns.iter().enumerate() {
            if rng.random::<f64>() >= p {
                zfill[(i, k)] = ds.x[(i, j)] - center[k];
            }
        }
    }

    let mut columns = Vec::with_capacity(d - nj);
    for l in (0..d).filter(|l| mcar_columns.binary_search(l).is_err()) {
        let (delta, v) = loop {
            let delta: Vec<f64> = (0..nj).map(|_| rng.sample(StandardNormal)).collect();
            if delta.iter().map(|a| a * a).sum::<f64>().sqrt() < 1e-8 {
                continue;
            }
            let v = dot(&delta, &sigma_j.mat_vec(&delta)?).sqrt();
            if v > 0.0 && v.is_finite() {
                break (delta, v);
            }
        };
        let s: f64 = rng.random_range(0.1..0.5);
        let slopes: Vec<f64> = delta.iter().map(|a| a / (s * v)).collect();
        let index: Vec<f64> = (0..n).map(|i| dot(zfill.row(i), &slopes)).collect();
        let intercept = calibrate_logistic(&index, p)?;
        columns.push(LogisticColumn {
            column: l,
            delta,
            s,
            v,
            slopes,
            intercept,
        });
    }
    Ok(MechanismSpec::MarLogistic {
        rate: p,
        mcar_columns,
        center,
        columns,
    })
}

fn zero_rate_logistic(mcar_columns: Vec<usize>, d: usize) -> MechanismSpec {
    let nj = mcar_columns.len();
    let columns = (0..d)
        .filter(|l| mcar_columns.binary_search(l).is_err())
        .map(|l| LogisticColumn {
            column: l,
            delta: vec![0.0; nj],
            s: 1.0,
            v: 1.0,
            slopes: vec![0.0; nj],
            intercept: NEVER,
        })
        .collect();
    MechanismSpec::MarLogistic {
        rate: 0.0,
        center: vec![0.0; nj],
        mcar_columns,
        columns,
    }
}

/// Marginal masking rate of a self-masking column under `N(μ, σ²)`:
/// `K·σ̃/√(σ̃²+σ²)·exp(−½(μ̃−μ)²/(σ̃²+σ²))`.
pub fn selfmask_marginal_rate(col: &SelfMaskColumn, mu: f64, sigma: f64) -> f64 {
    let s2 = col.sigma_tilde * col.sigma_tilde + sigma * sigma;
    let dm = col.mu_tilde - mu;
    col.peak * col.sigma_tilde / s2.sqrt() * (-0.5 * dm * dm / s2).exp()
}

fn instantiate_selfmask(ds: &Dataset, p: f64, tilt: f64) -> Result<MechanismSpec> {
    let (mean, sd) = ds.marginal_moments();
    let mut columns = Vec::with_capacity(ds.d());
    for (j, (&mu, &sigma)) in mean.iter().zip(&sd).enumerate() {
        if !(sigma > 0.0) {
            return Err(Error::Calibration(format!("column {j} has zero variance; self-masking is undefined")));
        }
        let mut col = SelfMaskColumn {
            peak: 1.0,
            mu_tilde: mu + tilt * sigma,
            sigma_tilde: SELFMASK_WIDTH * sigma,
        };
        // The rate is linear in K, so the bisection target has a closed form.
        let max_rate = selfmask_marginal_rate(&col, mu, sigma);
        if p > max_rate {
            return Err(Error::Calibration(format!(
                "self-masking rate {p} unreachable for column {j}: K = 1 gives {max_rate:.4} at tilt {tilt}"
            )));
        }
        col.peak = p / max_rate;
        columns.push(col);
    }
    Ok(MechanismSpec::Selfmask { rate: p, tilt, columns })
}

fn instantiate_mar_y<R: Rng + ?Sized>(ds: &Dataset, p: f64, strength: f64, rng: &mut R) -> Result<MechanismSpec> {
    if ds.y.len() != ds.n() || ds.n() < 2 {
        return Err(Error::Config("MAR-Y masking needs an outcome for every row".into()));
    }
    let ym = Matrix::column_vector(ds.y.clone());
    let (_, sd) = column_moments(&ym);
    let sd_y = sd[0];
    if !(sd_y > 0.0) {
        return Err(Error::Calibration("outcome has zero variance".into()));
    }
    let mut columns = Vec::with_capacity(ds.d());
    for _ in 0..ds.d() {
        let delta: f64 = rng.sample(StandardNormal);
        let slope = strength * delta.signum() / sd_y;
        let intercept = if p == 0.0 {
            NEVER
        } else {
            let index: Vec<f64> = ds.y.iter().map(|y| slope * y).collect();
            calibrate_logistic(&index, p)?
        };
        columns.push(MarYColumn { slope, intercept });
    }
    Ok(MechanismSpec::MarY { rate: p, columns })
}

/// Observed covariates with `NaN` at masked cells, plus the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDataset {
    pub source: Arc<Dataset>,
    pub xtilde: Matrix,
    /// Row-major, `true` = missing.
    pub mask: Vec<bool>,
    pub spec: MechanismSpec,
}

impl MaskedDataset {
    pub fn from_mask(source: Arc<Dataset>, mask: Vec<bool>, spec: MechanismSpec) -> Result<Self> {
        let (n, d) = source.x.shape();
        if mask.len() != n * d {
            return Err(Error::shape("masked_dataset", format!("{} mask bits for {n}×{d}", mask.len())));
        }
        let mut xtilde = source.x.clone();
        for (v, &m) in xtilde.data_mut().iter_mut().zip(&mask) {
            if m {
                *v = f64::NAN;
            }
        }
        Ok(Self {
            source,
            xtilde,
            mask,
            spec,
        })
    }

    pub fn n(&self) -> usize {
        self.xtilde.rows()
    }

    pub fn d(&self) -> usize {
        self.xtilde.cols()
    }

    pub fn y(&self) -> &[f64] {
        &self.source.y
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.xtilde.row(i)
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        let d = self.d();
        &self.mask[i * d..(i + 1) * d]
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.d() + j]
    }

    /// Mask as a 0/1 matrix.
    pub fn mask_matrix(&self) -> Matrix {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Matrix::from_vec(self.n(), self.d(), data).expect("sized")
    }

    pub fn missing_rate(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn column_rates(&self) -> Vec<f64> {
        let (n, d) = (self.n(), self.d());
        (0..d)
            .map(|j| (0..n).filter(|&i| self.mask[i * d + j]).count() as f64 / n.max(1) as f64)
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let d = self.d();
        let mask = rows.iter().flat_map(|&i| self.mask[i * d..(i + 1) * d].iter().copied()).collect();
        Self {
            source: Arc::new(self.source.subset(rows)),
            xtilde: self.xtilde.select_rows(rows),
            mask,
            spec: self.spec.clone(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("masked-dataset", &self.spec)?;
        let inner = self.source.to_container()?;
        c.meta = serde_json::json!({ "spec": self.spec, "source": inner.meta });
        for name in inner.names() {
            c.push(format!("source/{name}"), inner.get(name)?.clone());
        }
        c.push("mask", self.mask_matrix());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("masked-dataset")?;
        let spec: MechanismSpec = serde_json::from_value(c.meta["spec"].clone())?;
        let mut inner = Container::new("dataset", &())?;
        inner.meta = c.meta["source"].clone();
        for name in c.names() {
            if let Some(rest) = name.strip_prefix("source/") {
                inner.push(rest, c.get(name)?.clone());
            }
        }
        let source = Arc::new(Dataset::from_container(&inner)?);
        let mask = c.get("mask")?.data().iter().map(|&v| v != 0.0).collect();
        Self::from_mask(source, mask, spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Draws masks from an instantiated mechanism.
pub fn apply_spec<R: Rng + ?Sized>(ds: Arc<Dataset>, spec: &MechanismSpec, rng: &mut R) -> Result<MaskedDataset> {
    let (n, d) = ds.x.shape();
    spec.check_dim(d)?;
    let mut mask = vec![false; n * d];
    match spec {
        MechanismSpec::MarLogistic { mcar_columns, .. } => {
            let mut jm = vec![false; mcar_columns.len()];
            for i in 0..n {
                for (k, &j) in mcar_columns.iter().enumerate() {
                    jm[k] = rng.random::<f64>() < spec.rate();
                    mask[i * d + j] = jm[k];
                }
                let x = ds.x.row(i);
                for j in 0..d {
                    if mcar_columns.binary_search(&j).is_err() {
                        mask[i * d + j] = rng.random::<f64>() < spec.mask_probability(j, x, 0.0, &jm);
                    }
                }
            }
        }
        _ => {
            for i in 0..n {
                let x = ds.x.row(i);
                let y = ds.y[i];
                for j in 0..d {
                    mask[i * d + j] = rng.random::<f64>() < spec.mask_probability(j, x, y, &[]);
                }
            }
        }
    }
    MaskedDataset::from_mask(ds, mask, spec.clone())
}

/// Instantiates `cfg` on `ds` and draws masks, all from `rng`.
pub fn apply_mechanism<R: Rng + ?Sized>(ds: Arc<Dataset>, cfg: &MechanismConfig, rng: &mut R) -> Result<MaskedDataset> {
    let spec = cfg.instantiate(&ds, rng)?;
    apply_spec(ds, &spec, rng)
}

pub fn apply_mcar<R: Rng + ?Sized>(ds: Arc<Dataset>, p: f64, rng: &mut R) -> Result<MaskedDataset> {
    apply_mechanism(ds, &MechanismConfig::new(MechanismKind::Mcar, p), rng)
}

pub fn apply_mar_logistic<R: Rng + ?Sized>(ds: Arc<Dataset>, p: f64, rng: &mut R) -> Result<MaskedDataset> {
    apply_mechanism(ds, &MechanismConfig::new(MechanismKind::MarLogistic, p), rng)
}

pub fn apply_selfmask<R: Rng + ?Sized>(ds: Arc<Dataset>, p: f64, k: f64, rng: &mut R) -> Result<MaskedDataset> {
    let cfg = MechanismConfig {
        tilt: k,
        ..MechanismConfig::new(MechanismKind::Selfmask, p)
    };
    apply_mechanism(ds, &cfg, rng)
}

pub fn apply_mar_y<R: Rng + ?Sized>(ds: Arc<Dataset>, p: f64, rng: &mut R) -> Result<MaskedDataset> {
    apply_mechanism(ds, &MechanismConfig::new(MechanismKind::MarY, p), rng)
}

/// No missing cells, for complete-data arms.
pub fn complete(ds: Arc<Dataset>) -> MaskedDataset {
    let len = ds.n() * ds.d();
    MaskedDataset::from_mask(ds, vec![false; len], MechanismSpec::Mcar { rate: 0.0 }).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::simulate;
    use crate::rng::rng_from;

    fn sim(d: usize, n: usize, seed: u64) -> Arc<Dataset> {
        Arc::new(simulate(d, 0.7, n, seed).unwrap())
    }

    #[test]
    fn zero_rate_masks_nothing() {
        let ds = sim(4, 200, 1);
        for kind in [MechanismKind::Mcar, MechanismKind::MarLogistic, MechanismKind::Selfmask, MechanismKind::MarY] {
            let m = apply_mechanism(ds.clone(), &MechanismConfig::new(kind, 0.0), &mut rng_from(2)).unwrap();
            assert!(m.mask.iter().all(|&b| !b), "{kind:?}");
            assert_eq!(m.xtilde, ds.x);
        }
    }

    #[test]
    fn nan_exactly_where_masked() {
        let ds = sim(5, 500, 3);
        let m = apply_mar_logistic(ds.clone(), 0.4, &mut rng_from(4)).unwrap();
        for i in 0..m.n() {
            for j in 0..m.d() {
                assert_eq!(m.xtilde[(i, j)].is_nan(), m.is_missing(i, j));
                if !m.is_missing(i, j) {
                    assert_eq!(m.xtilde[(i, j)], ds.x[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn logistic_intercept_closed_forms() {
        let g = calibrate_logistic(&[0.0; 10], 0.3).unwrap();
        assert!((g - crate::scalar::logit(0.3)).abs() < 1e-3);
        let sym: Vec<f64> = (-50..=50).map(|i| 0.37 * i as f64).collect();
        assert!(calibrate_logistic(&sym, 0.5).unwrap().abs() < 1e-6);
        assert!(matches!(calibrate_intercept(|_| 0.2, 0.5), Err(Error::Calibration(_))));
    }

    #[test]
    fn calibrated_intercept_holds_on_fresh_sample() {
        let mut rng = rng_from(11);
        let slopes = [1.7, -0.4, 2.5];
        let draw = |rng: &mut crate::rng::SimRng, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| slopes.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).sum())
                .collect()
        };
        let cal = draw(&mut rng, 50_000);
        let g0 = calibrate_logistic(&cal, 0.25).unwrap();
        let fresh = draw(&mut rng, 50_000);
        let rate = fresh.iter().map(|z| sigmoid(z + g0)).sum::<f64>() / fresh.len() as f64;
        // Fresh-sample rate agrees up to calibration tolerance plus Monte-Carlo error.
        assert!((rate - 0.25).abs() < 1e-3 + 4.0 * 0.3 / (50_000f64).sqrt(), "{rate}");
    }

    #[test]
    fn mar_logistic_structure() {
        let ds = sim(10, 1000, 5);
        let spec = MechanismConfig::new(MechanismKind::MarLogistic, 0.5).instantiate(&ds, &mut rng_from(6)).unwrap();
        let MechanismSpec::MarLogistic { mcar_columns, columns, .. } = &spec else { panic!() };
        assert_eq!(mcar_columns.len(), 3);
        assert_eq!(columns.len(), 7);
        for c in columns {
            assert!((0.1..0.5).contains(&c.s));
            for (g, dl) in c.slopes.iter().zip(&c.delta) {
                assert!((g - dl / (c.s * c.v)).abs() < 1e-12);
            }
        }
        let other = MechanismConfig::new(MechanismKind::MarLogistic, 0.5).instantiate(&ds, &mut rng_from(7)).unwrap();
        assert_ne!(spec, other);
    }

    #[test]
    fn selfmask_flat_limit_is_mcar() {
        let col = SelfMaskColumn {
            peak: 0.3,
            mu_tilde: 0.0,
            sigma_tilde: 1e12,
        };
        assert!((selfmask_marginal_rate(&col, 1.0, 2.0) - 0.3).abs() < 1e-9);
        let spec = MechanismSpec::Selfmask { rate: 0.3, tilt: 0.0, columns: vec![col] };
        assert!((spec.mask_probability(0, &[5.0], 0.0, &[]) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn selfmask_rate_matches_quadrature() {
        let col = SelfMaskColumn {
            peak: 0.8,
            mu_tilde: 1.9,
            sigma_tilde: 1.3,
        };
        let (mu, sigma) = (0.4, 0.7);
        // Trapezoid rule over ±12σ.
        let steps = 200_000;
        let (a, b) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
        let h = (b - a) / steps as f64;
        let f = |x: f64| {
            let z = (x - mu) / sigma;
            col.peak * bump(x, col.mu_tilde, col.sigma_tilde) * (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let integral = h * ((1..steps).map(|i| f(a + i as f64 * h)).sum::<f64>() + 0.5 * (f(a) + f(b)));
        assert!((integral - selfmask_marginal_rate(&col, mu, sigma)).abs() < 1e-10);
    }

    #[test]
    fn selfmask_unreachable_rate_errors() {
        let ds = sim(3, 100, 8);
        let r = MechanismConfig::new(MechanismKind::Selfmask, 0.9).instantiate(&ds, &mut rng_from(0));
        assert!(matches!(r, Err(Error::Calibration(_))));
    }

    #[test]
    fn mar_y_without_slope_is_mcar() {
        let spec = MechanismSpec::MarY {
            rate: 0.3,
            columns: vec![MarYColumn { slope: 0.0, intercept: crate::scalar::logit(0.3) }],
        };
        assert!((spec.mask_probability(0, &[1.0], 123.0, &[]) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mar_y_slopes_have_unit_over_sd_magnitude() {
        let ds = sim(6, 2000, 9);
        let spec = MechanismConfig::new(MechanismKind::MarY, 0.5).instantiate(&ds, &mut rng_from(1)).unwrap();
        let MechanismSpec::MarY { columns, .. } = spec else { panic!() };
        let (_, sd) = column_moments(&Matrix::column_vector(ds.y.clone()));
        for c in &columns {
            assert!((c.slope.abs() - 1.0 / sd[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_dimension_is_checked() {
        let ds = sim(3, 10, 1);
        let spec = MechanismSpec::MarY { rate: 0.1, columns: vec![MarYColumn { slope: 0.0, intercept: 0.0 }] };
        assert!(matches!(apply_spec(ds, &spec, &mut rng_from(0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn masking_is_deterministic_and_persists() {
        let ds = sim(4, 300, 12);
        let a = apply_selfmask(ds.clone(), 0.25, 2.0, &mut rng_from(3)).unwrap();
        let b = apply_selfmask(ds.clone(), 0.25, 2.0, &mut rng_from(3)).unwrap();
        assert_eq!(a.mask, b.mask);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        a.save(&p).unwrap();
        let back = MaskedDataset::load(&p).unwrap();
        assert_eq!(back.mask, a.mask);
        assert_eq!(back.spec, a.spec);
        assert_eq!(*back.source, *a.source);
    }

    #[test]
    fn spec_serializes_to_toml() {
        let ds = sim(4, 300, 12);
        let spec = MechanismConfig::new(MechanismKind::MarLogistic, 0.25).instantiate(&ds, &mut rng_from(1)).unwrap();
        let text = toml::to_string(&spec).unwrap();
        let back: MechanismSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
