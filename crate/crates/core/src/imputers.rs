//! Chained-equation imputers (ICE and its probabilistic MICE variant) with
//! Bayesian ridge conditionals, plus the two-stage pipeline that uses the
//! outcome during training-time imputation only.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::psd_cholesky;
use crate::container::Container;
use crate::diffcore::dot;
use crate::error::{Error, Result};
use crate::missingness::MaskedDataset;
use crate::rng::{derive_indexed, rng_from};
use crate::Matrix;

pub const DEFAULT_ALPHA: f64 = 1e-6;
pub const NOISE_FLOOR: f64 = 1e-10;
pub const DEFAULT_N_ITER: usize = 10;
pub const DEFAULT_N_IMP: usize = 5;
const ROW_BLOCK: usize = 512;

/// Gaussian posterior of a linear model on centred inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgePosterior {
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
    pub coef: Vec<f64>,
    /// `F` with coefficient covariance `F Fᵀ`.
    pub cov_factor: Matrix,
    pub noise_var: f64,
    pub alpha: f64,
}

impl RidgePosterior {
    pub fn dim(&self) -> usize {
        self.coef.len()
    }

    pub fn covariance(&self) -> Matrix {
        self.cov_factor.matmul_t(&self.cov_factor).expect("square factor")
    }

    fn centred(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.x_mean).map(|(a, m)| a - m).collect()
    }

    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        self.y_mean + x.iter().zip(&self.x_mean).zip(&self.coef).map(|((a, m), c)| (a - m) * c).sum::<f64>()
    }

    /// `σ̂² + x̃ᵀ C x̃` for centred `x̃`.
    pub fn predictive_variance(&self, x: &[f64]) -> f64 {
        let xc = self.centred(x);
        let ftx = self.cov_factor.t_matmul(&Matrix::column_vector(xc)).expect("shapes agree");
        self.noise_var + ftx.data().iter().map(|v| v * v).sum::<f64>()
    }

    /// One posterior-predictive draw: coefficients from their posterior,
    /// then observation noise.
    pub fn draw<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> f64 {
        let p = self.dim();
        let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let dc = self.cov_factor.mat_vec(&z).expect("square factor");
        let mut v = self.y_mean;
        for k in 0..p {
            v += (x[k] - self.x_mean[k]) * (self.coef[k] + dc[k]);
        }
        let e: f64 = rng.sample(StandardNormal);
        v + self.noise_var.sqrt() * e
    }

    fn pack(&self) -> Vec<f64> {
        let mut v = vec![self.y_mean, self.noise_var, self.alpha];
        v.extend(&self.x_mean);
        v.extend(&self.coef);
        v
    }

    fn unpack(packed: &[f64], cov_factor: Matrix) -> Result<Self> {
        let p = cov_factor.rows();
        if packed.len() != 3 + 2 * p || cov_factor.cols() != p {
            return Err(Error::Format(format!("ridge posterior payload of {} values for dimension {p}", packed.len())));
        }
        Ok(Self {
            y_mean: packed[0],
            noise_var: packed[1],
            alpha: packed[2],
            x_mean: packed[3..3 + p].to_vec(),
            coef: packed[3 + p..].to_vec(),
            cov_factor,
        })
    }
}

/// Bayesian ridge fit in two passes: a ridge point fit gives the residual
/// variance `σ̂²`, then the coefficient posterior is
/// `N(A⁻¹Xᵀy/σ̂², A⁻¹)` with `A = αI + XᵀX/σ̂²` (inputs and target centred).
pub fn fit_ridge_posterior(design: &Matrix, target: &[f64], alpha: f64) -> Result<RidgePosterior> {
    let (n, p) = design.shape();
    if p == 0 {
        return Err(Error::Contract("ridge design has no columns".into()));
    }
    if n < 2 {
        return Err(Error::Contract(format!("ridge fit needs at least two rows, got {n}")));
    }
    if target.len() != n {
        return Err(Error::shape("fit_ridge_posterior", format!("{n} rows, {} targets", target.len())));
    }
    let x_mean: Vec<f64> = (0..p).map(|j| design.column(j).iter().sum::<f64>() / n as f64).collect();
    let y_mean = target.iter().sum::<f64>() / n as f64;
    let mut xc = design.clone();
    for i in 0..n {
        for (v, m) in xc.row_mut(i).iter_mut().zip(&x_mean) {
            *v -= m;
        }
    }
    let yc: Vec<f64> = target.iter().map(|t| t - y_mean).collect();
    let gram = xc.t_matmul(&xc)?;
    let xty = xc.t_matmul(&Matrix::column_vector(yc.clone()))?.into_data();

    let mut ridge = gram.clone();
    for k in 0..p {
        ridge[(k, k)] += alpha;
    }
    let point = psd_cholesky(&ridge)?.solve_vec(&xty);
    let rss: f64 = (0..n)
        .map(|i| {
            let r = yc[i] - dot(xc.row(i), &point);
            r * r
        })
        .sum();
    let dof = if n > p + 1 { n - p - 1 } else { n };
    let noise_var = (rss / dof as f64).max(NOISE_FLOOR);

    let mut precision = gram.scale(1.0 / noise_var);
    for k in 0..p {
        precision[(k, k)] += alpha;
    }
    let chol = psd_cholesky(&precision)?;
    let coef = chol.solve_vec(&xty.iter().map(|v| v / noise_var).collect::<Vec<_>>());
    // F = L⁻ᵀ so that F Fᵀ = (L Lᵀ)⁻¹.
    let mut cov_factor = Matrix::zeros(p, p);
    let mut e = vec![0.0; p];
    for j in 0..p {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        chol.backward_in_place(&mut e);
        for i in 0..p {
            cov_factor[(i, j)] = e[i];
        }
    }
    Ok(RidgePosterior {
        x_mean,
        y_mean,
        coef,
        cov_factor,
        noise_var,
        alpha,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IceConfig {
    pub n_iter: usize,
    pub alpha: f64,
    /// Append the 0/1 mask to every completed matrix.
    pub use_mask: bool,
    /// Use the outcome as an extra predictor (training-time only).
    pub use_y: bool,
    /// Draw fills from the posterior predictive (MICE) instead of using
    /// conditional means.
    pub probabilistic: bool,
    pub n_imp: usize,
    /// Fit a conditional for every column, not only those with missing
    /// cells at fit time.
    pub all_columns: bool,
}

impl Default for IceConfig {
    fn default() -> Self {
        Self {
            n_iter: DEFAULT_N_ITER,
            alpha: DEFAULT_ALPHA,
            use_mask: false,
            use_y: false,
            probabilistic: false,
            n_imp: 1,
            all_columns: false,
        }
    }
}

impl IceConfig {
    pub fn mice() -> Self {
        Self {
            probabilistic: true,
            n_imp: DEFAULT_N_IMP,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::Config("n_iter must be at least 1".into()));
        }
        if self.n_imp == 0 || (!self.probabilistic && self.n_imp != 1) {
            return Err(Error::Config(format!(
                "n_imp = {} (deterministic imputation uses exactly one completion)",
                self.n_imp
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("ridge prior precision must be positive".into()));
        }
        Ok(())
    }
}

/// A fitted chained-equation imputer. `sweeps[s][j]` is column `j`'s
/// conditional after sweep `s`; transforms replay the sweeps in order.
#[derive(Clone, Debug, PartialEq)]
pub struct IceModel {
    pub config: IceConfig,
    pub means: Vec<f64>,
    pub sweeps: Vec<Vec<Option<RidgePosterior>>>,
}

fn column_observed_means(x: &Matrix) -> Result<Vec<f64>> {
    (0..x.cols())
        .map(|j| {
            let obs: Vec<f64> = x.column(j).into_iter().filter(|v| !v.is_nan()).collect();
            if obs.len() < 2 {
                return Err(Error::Contract(format!(
                    "column {j} has {} observed values; at least two are needed",
                    obs.len()
                )));
            }
            Ok(obs.iter().sum::<f64>() / obs.len() as f64)
        })
        .collect()
}

/// Predictor vector for column `j`: every other column, then `y`.
fn features(row: &[f64], j: usize, y: Option<f64>, out: &mut Vec<f64>) {
    out.clear();
    out.extend(row.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, &v)| v));
    if let Some(y) = y {
        out.push(y);
    }
}

impl IceModel {
    pub fn d(&self) -> usize {
        self.means.len()
    }

    /// Columns that receive a conditional model.
    pub fn modelled_columns(&self) -> Vec<usize> {
        self.sweeps
            .first()
            .map(|s| s.iter().enumerate().filter_map(|(j, p)| p.as_ref().map(|_| j)).collect())
            .unwrap_or_default()
    }

    /// Fits on a matrix with `NaN` at missing cells.
    pub fn fit(x: &Matrix, y: Option<&[f64]>, config: IceConfig) -> Result<Self> {
        config.validate()?;
        let (n, d) = x.shape();
        let y = if config.use_y {
            let y = y.ok_or_else(|| Error::Contract("outcome-conditional imputer needs the outcome".into()))?;
            if y.len() != n {
                return Err(Error::shape("ice_fit", format!("{n} rows, {} outcomes", y.len())));
            }
            Some(y)
        } else {
            None
        };
        let means = column_observed_means(x)?;
        let missing: Vec<bool> = x.data().iter().map(|v| v.is_nan()).collect();
        let targets: Vec<usize> = (0..d)
            .filter(|&j| config.all_columns || (0..n).any(|i| missing[i * d + j]))
            .collect();
        let mut work = x.clone();
        for i in 0..n {
            for j in 0..d {
                if missing[i * d + j] {
                    work[(i, j)] = means[j];
                }
            }
        }
        let mut sweeps = Vec::new();
        if targets.is_empty() || (d < 2 && !config.use_y) {
            return Ok(Self { config, means, sweeps });
        }
        let any_missing = missing.iter().any(|&m| m);
        let width = d - 1 + usize::from(config.use_y);
        let mut buf = Vec::with_capacity(width);
        for _ in 0..config.n_iter {
            let mut sweep: Vec<Option<RidgePosterior>> = vec![None; d];
            for &j in &targets {
                let rows: Vec<usize> = (0..n).filter(|&i| !missing[i * d + j]).collect();
                let mut design = Matrix::zeros(rows.len(), width);
                let mut target = Vec::with_capacity(rows.len());
                for (r, &i) in rows.iter().enumerate() {
                    features(work.row(i), j, y.map(|y| y[i]), &mut buf);
                    design.row_mut(r).copy_from_slice(&buf);
                    target.push(work[(i, j)]);
                }
                let post = fit_ridge_posterior(&design, &target, config.alpha)?;
                for i in (0..n).filter(|&i| missing[i * d + j]) {
                    features(work.row(i), j, y.map(|y| y[i]), &mut buf);
                    work[(i, j)] = post.predict_mean(&buf);
                }
                sweep[j] = Some(post);
            }
            sweeps.push(sweep);
            if !any_missing {
                // Every further sweep would refit the same conditionals.
                break;
            }
        }
        Ok(Self { config, means, sweeps })
    }

    fn complete_row<R: Rng + ?Sized>(&self, row: &mut [f64], y: Option<f64>, rng: &mut R) {
        let miss: Vec<usize> = (0..row.len()).filter(|&j| row[j].is_nan()).collect();
        if miss.is_empty() {
            return;
        }
        for &j in &miss {
            row[j] = self.means[j];
        }
        if self.sweeps.is_empty() {
            return;
        }
        let mut buf = Vec::with_capacity(row.len());
        for s in 0..self.config.n_iter {
            let sweep = &self.sweeps[s.min(self.sweeps.len() - 1)];
            for &j in &miss {
                if let Some(post) = &sweep[j] {
                    features(row, j, y, &mut buf);
                    row[j] = if self.config.probabilistic {
                        post.draw(&buf, rng)
                    } else {
                        post.predict_mean(&buf)
                    };
                }
            }
        }
    }

    /// `n_imp` completed copies of `x` (`NaN` = missing); observed cells are
    /// copied through untouched. With `use_mask` each copy carries the mask
    /// as `d` extra columns.
    pub fn transform(&self, x: &Matrix, y: Option<&[f64]>, seed: u64) -> Result<Vec<Matrix>> {
        let (n, d) = x.shape();
        if d != self.d() {
            return Err(Error::shape("ice_transform", format!("model has {} columns, data {d}", self.d())));
        }
        let y = if self.config.use_y {
            let y = y.ok_or_else(|| Error::Contract("outcome-conditional imputer needs the outcome".into()))?;
            if y.len() != n {
                return Err(Error::shape("ice_transform", format!("{n} rows, {} outcomes", y.len())));
            }
            Some(y)
        } else {
            None
        };
        let mask = if self.config.use_mask {
            Some(Matrix::from_vec(n, d, x.data().iter().map(|v| if v.is_nan() { 1.0 } else { 0.0 }).collect())?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(self.config.n_imp);
        for k in 0..self.config.n_imp {
            let mut filled = x.clone();
            filled
                .data_mut()
                .par_chunks_mut(ROW_BLOCK * d.max(1))
                .enumerate()
                .for_each(|(b, block)| {
                    let mut rng = rng_from(derive_indexed(seed, "ice-transform", (k as u64) << 32 | b as u64));
                    for (r, row) in block.chunks_mut(d.max(1)).enumerate() {
                        let i = b * ROW_BLOCK + r;
                        self.complete_row(row, y.map(|y| y[i]), &mut rng);
                    }
                });
            out.push(match &mask {
                Some(m) => filled.hcat(m)?,
                None => filled,
            });
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("ice-model", &serde_json::json!({ "config": self.config, "sweeps": self.sweeps.len() }))?;
        c.push_vec("means", &self.means);
        for (s, sweep) in self.sweeps.iter().enumerate() {
            for (j, post) in sweep.iter().enumerate() {
                if let Some(p) = post {
                    c.push_vec(format!("sweep{s}/col{j}/packed"), &p.pack());
                    c.push(format!("sweep{s}/col{j}/factor"), p.cov_factor.clone());
                }
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("ice-model")?;
        let config: IceConfig = serde_json::from_value(c.meta["config"].clone())?;
        let n_sweeps = c.meta["sweeps"]
            .as_u64()
            .ok_or_else(|| Error::Format("ice-model metadata lacks a sweep count".into()))? as usize;
        let means = c.get_vec("means")?;
        let d = means.len();
        let mut sweeps = Vec::with_capacity(n_sweeps);
        for s in 0..n_sweeps {
            let mut sweep = Vec::with_capacity(d);
            for j in 0..d {
                let key = format!("sweep{s}/col{j}/packed");
                sweep.push(if c.has(&key) {
                    Some(RidgePosterior::unpack(
                        &c.get_vec(&key)?,
                        c.get(&format!("sweep{s}/col{j}/factor"))?.clone(),
                    )?)
                } else {
                    None
                });
            }
            sweeps.push(sweep);
        }
        Ok(Self { config, means, sweeps })
    }
}

pub fn ice_fit(md: &MaskedDataset, config: IceConfig) -> Result<IceModel> {
    IceModel::fit(&md.xtilde, Some(md.y()), config)
}

pub fn ice_transform(model: &IceModel, md: &MaskedDataset, seed: u64) -> Result<Vec<Matrix>> {
    model.transform(&md.xtilde, Some(md.y()), seed)
}

/// Output of the outcome-conditional two-stage strategy.
#[derive(Clone, Debug)]
pub struct YPipeline {
    /// Completed training design (stacked over imputations), without `y`.
    pub design: Matrix,
    pub targets: Vec<f64>,
    /// Outcome-free imputer fitted on the completed design, for transforms
    /// of any later environment.
    pub imputer: IceModel,
}

/// (1) fit an imputer that uses `y` on the source data; (2) complete the
/// source data with it; (3) fit an outcome-free imputer on the completion.
/// The predictor is trained on `design`/`targets` by the caller.
pub fn y_conditional_pipeline(md: &MaskedDataset, base: IceConfig, seed: u64) -> Result<YPipeline> {
    let stage1_cfg = IceConfig {
        use_y: true,
        use_mask: false,
        all_columns: false,
        ..base
    };
    let y = md.y();
    let stage1 = IceModel::fit(&md.xtilde, Some(y), stage1_cfg)?;
    let completions = if md.mask.iter().any(|&m| m) {
        stage1.transform(&md.xtilde, Some(y), crate::rng::derive(seed, "y-pipeline-stage1"))?
    } else {
        vec![md.xtilde.clone()]
    };
    let mut design = completions[0].clone();
    let mut targets = y.to_vec();
    for c in &completions[1..] {
        design = design.vcat(c)?;
        targets.extend_from_slice(y);
    }
    let stage2_cfg = IceConfig {
        use_y: false,
        use_mask: false,
        all_columns: true,
        ..base
    };
    let imputer = IceModel::fit(&design, None, stage2_cfg)?;
    Ok(YPipeline {
        design,
        targets,
        imputer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::simulate;
    use crate::missingness::apply_mcar;
    use std::sync::Arc;

    #[test]
    fn noiseless_linear_map_is_recovered() {
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, -1.0],
            vec![0.5, 3.0],
            vec![-1.0, 2.0],
        ]);
        let y: Vec<f64> = (0..5).map(|i| 0.7 + 2.0 * x[(i, 0)] - 3.0 * x[(i, 1)]).collect();
        let p = fit_ridge_posterior(&x, &y, 1e-12).unwrap();
        assert!((p.coef[0] - 2.0).abs() < 1e-8 && (p.coef[1] + 3.0).abs() < 1e-8);
        assert!((p.predict_mean(&[0.0, 0.0]) - 0.7).abs() < 1e-8);
        assert_eq!(p.noise_var, NOISE_FLOOR);
    }

    #[test]
    fn orthonormal_design_shrinkage() {
        // Centred orthonormal columns: XᵀX = I, so the mean is Xᵀy/(σ̂² + α σ̂²) at α = 1.
        let s = 0.5;
        let x = Matrix::from_rows(&[vec![s, s], vec![s, -s], vec![-s, s], vec![-s, -s]]);
        let y = vec![1.0, 0.2, -0.4, 0.3];
        let p = fit_ridge_posterior(&x, &y, 1.0).unwrap();
        let ym = y.iter().sum::<f64>() / 4.0;
        let yc: Vec<f64> = y.iter().map(|v| v - ym).collect();
        // Point fit (XᵀX + I)b = Xᵀy → b = Xᵀy/2; residual dof = 1.
        let xty = [dot(&x.column(0), &yc), dot(&x.column(1), &yc)];
        let rss: f64 = (0..4)
            .map(|i| {
                let r = yc[i] - (x[(i, 0)] * xty[0] + x[(i, 1)] * xty[1]) / 2.0;
                r * r
            })
            .sum();
        let s2 = rss / 1.0;
        assert!((p.noise_var - s2).abs() < 1e-12);
        for k in 0..2 {
            assert!((p.coef[k] - xty[k] / (1.0 + s2)).abs() < 1e-12);
            assert!((p.covariance()[(k, k)] - s2 / (1.0 + s2)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_target_has_zero_coefficients() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.0, 0.5]]);
        let p = fit_ridge_posterior(&x, &[4.0; 3], DEFAULT_ALPHA).unwrap();
        assert!(p.coef.iter().all(|c| c.abs() < 1e-12));
        assert_eq!(p.noise_var, NOISE_FLOOR);
        assert!(fit_ridge_posterior(&Matrix::zeros(3, 0), &[1.0; 3], 1.0).is_err());
        assert!(fit_ridge_posterior(&Matrix::zeros(1, 2), &[1.0], 1.0).is_err());
    }

    fn masked(n: usize, d: usize, p: f64, seed: u64) -> MaskedDataset {
        let ds = Arc::new(simulate(d, 0.7, n, seed).unwrap());
        apply_mcar(ds, p, &mut rng_from(seed + 1)).unwrap()
    }

    #[test]
    fn complete_data_means_no_conditionals_and_identity_transform() {
        let md = masked(50, 3, 0.0, 1);
        let m = ice_fit(&md, IceConfig::default()).unwrap();
        assert!(m.sweeps.is_empty());
        assert_eq!(m.transform(&md.xtilde, None, 0).unwrap(), vec![md.xtilde.clone()]);
    }

    #[test]
    fn all_missing_column_is_an_error() {
        let mut x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 1.0]]);
        for i in 0..3 {
            x[(i, 1)] = f64::NAN;
        }
        assert!(IceModel::fit(&x, None, IceConfig::default()).is_err());
    }

    #[test]
    fn observed_cells_survive_and_transform_is_idempotent() {
        let md = masked(400, 4, 0.3, 3);
        for cfg in [IceConfig::default(), IceConfig::mice(), IceConfig { use_mask: true, ..IceConfig::default() }] {
            let model = ice_fit(&md, cfg).unwrap();
            let outs = model.transform(&md.xtilde, None, 9).unwrap();
            assert_eq!(outs.len(), cfg.n_imp);
            for out in &outs {
                assert_eq!(out.cols(), if cfg.use_mask { 8 } else { 4 });
                for i in 0..md.n() {
                    for j in 0..4 {
                        if md.is_missing(i, j) {
                            assert!(out[(i, j)].is_finite());
                        } else {
                            assert_eq!(out[(i, j)], md.xtilde[(i, j)]);
                        }
                    }
                    if cfg.use_mask {
                        for j in 0..4 {
                            assert_eq!(out[(i, 4 + j)], if md.is_missing(i, j) { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            if !cfg.probabilistic && !cfg.use_mask {
                assert_eq!(model.transform(&outs[0], None, 1).unwrap()[0], outs[0]);
            }
        }
    }

    #[test]
    fn mice_fills_vary_and_deterministic_fills_do_not() {
        let md = masked(300, 3, 0.3, 5);
        let mice = ice_fit(&md, IceConfig::mice()).unwrap();
        let outs = mice.transform(&md.xtilde, None, 4).unwrap();
        let (i, j) = (0..md.n()).flat_map(|i| (0..3).map(move |j| (i, j))).find(|&(i, j)| md.is_missing(i, j)).unwrap();
        assert_ne!(outs[0][(i, j)], outs[1][(i, j)]);
        assert_eq!(outs, mice.transform(&md.xtilde, None, 4).unwrap());
    }

    #[test]
    fn degenerate_posterior_draws_equal_the_mean() {
        let p = RidgePosterior {
            x_mean: vec![0.0, 1.0],
            y_mean: 0.5,
            coef: vec![2.0, -1.0],
            cov_factor: Matrix::zeros(2, 2),
            noise_var: 0.0,
            alpha: 1.0,
        };
        let x = [0.3, 4.0];
        assert_eq!(p.draw(&x, &mut rng_from(1)), p.predict_mean(&x));
    }

    #[test]
    fn draw_variance_matches_posterior_predictive() {
        // One incomplete column and one sweep: draws are single posterior-predictive samples.
        let mut rng = rng_from(12);
        let n = 60;
        let mut x = Matrix::zeros(n, 3);
        for i in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            x[(i, 0)] = a;
            x[(i, 1)] = b;
            x[(i, 2)] = 0.5 * a - b + 0.8 * e;
        }
        x[(0, 2)] = f64::NAN;
        let cfg = IceConfig { n_iter: 1, ..IceConfig::mice() };
        let model = IceModel::fit(&x, None, IceConfig { n_imp: 1, ..cfg }).unwrap();
        let post = model.sweeps[0][2].as_ref().unwrap();
        let expected = post.predictive_variance(&[x[(0, 0)], x[(0, 1)]]);
        let draws: Vec<f64> = (0..1000)
            .map(|s| model.transform(&x, None, s).unwrap()[0][(0, 2)])
            .collect();
        let m = draws.iter().sum::<f64>() / 1000.0;
        let v = draws.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / 999.0;
        assert!(((v - expected) / expected).abs() < 0.15, "{v} vs {expected}");
        assert!(v > 0.0);
    }

    #[test]
    fn outcome_is_required_when_configured() {
        let md = masked(100, 3, 0.2, 7);
        let cfg = IceConfig { use_y: true, ..IceConfig::default() };
        assert!(IceModel::fit(&md.xtilde, None, cfg).is_err());
        let model = ice_fit(&md, cfg).unwrap();
        assert!(model.transform(&md.xtilde, None, 0).is_err());
        assert_eq!(model.transform(&md.xtilde, Some(md.y()), 0).unwrap()[0].cols(), 3);
    }

    #[test]
    fn y_pipeline_without_missingness_is_identity() {
        let md = masked(80, 3, 0.0, 8);
        let out = y_conditional_pipeline(&md, IceConfig::mice(), 1).unwrap();
        assert_eq!(out.design, md.source.x);
        assert_eq!(out.targets, md.source.y);
        assert_eq!(out.imputer.modelled_columns(), vec![0, 1, 2]);
        assert_eq!(out.imputer.transform(&md.xtilde, None, 0).unwrap()[0], md.source.x);
    }

    #[test]
    fn y_pipeline_stacks_imputations() {
        let md = masked(100, 3, 0.3, 9);
        let out = y_conditional_pipeline(&md, IceConfig::mice(), 2).unwrap();
        assert_eq!(out.design.rows(), 500);
        assert!(out.design.is_finite());
        assert!(!out.imputer.config.use_y);
    }

    #[test]
    fn container_roundtrip() {
        let md = masked(200, 4, 0.3, 10);
        let m = ice_fit(&md, IceConfig::mice()).unwrap();
        let back = IceModel::from_container(&Container::from_bytes(&m.to_container().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
