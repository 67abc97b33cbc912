//! Named estimators: fitted on a masked source sample, applied to any
//! environment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic::AnalyticModel;
use crate::container::Container;
use crate::datagen::{GaussianParams, OutcomeParams};
use crate::error::{Error, Result};
use crate::imputers::{y_conditional_pipeline, IceConfig, IceModel, DEFAULT_ALPHA, DEFAULT_N_IMP, DEFAULT_N_ITER};
use crate::missingness::{MaskedDataset, MechanismKind, MechanismSpec};
use crate::neural::{
    grid_search, train, Architecture, EmbeddingKind, EmbeddingSpec, GridResult, GridSpace, NetInput, Network,
    TrainConfig, TrainData, TrainReport, DEFAULT_N_BLOCKS,
};
use crate::rng::{derive, derive_indexed, rng_from};
use crate::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Bayes,
    OracleCond,
    OracleProb,
    Mean,
    Ice,
    IceMask,
    Mice,
    MiceMask,
    IceY,
    MiceY,
    Neumiss,
    Neumise,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 12] = [
        Self::Bayes,
        Self::OracleCond,
        Self::OracleProb,
        Self::Mean,
        Self::Ice,
        Self::IceMask,
        Self::Mice,
        Self::MiceMask,
        Self::IceY,
        Self::MiceY,
        Self::Neumiss,
        Self::Neumise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bayes => "bayes",
            Self::OracleCond => "oracle-cond",
            Self::OracleProb => "oracle-prob",
            Self::Mean => "mean",
            Self::Ice => "ice",
            Self::IceMask => "ice-mask",
            Self::Mice => "mice",
            Self::MiceMask => "mice-mask",
            Self::IceY => "ice-y",
            Self::MiceY => "mice-y",
            Self::Neumiss => "neumiss",
            Self::Neumise => "neumise",
        }
    }

    /// Closed-form predictors that need the generating parameters.
    pub fn is_analytic(self) -> bool {
        matches!(self, Self::Bayes | Self::OracleCond | Self::OracleProb)
    }

    /// Estimators that train a network.
    pub fn is_learned(self) -> bool {
        !self.is_analytic() && self != Self::Mean
    }

    fn imputer_config(self, s: &FitSettings) -> Option<IceConfig> {
        let ice = IceConfig {
            n_iter: s.n_iter,
            alpha: s.alpha,
            ..IceConfig::default()
        };
        let mice = IceConfig {
            probabilistic: true,
            n_imp: s.n_imp,
            ..ice
        };
        match self {
            Self::Ice | Self::IceY => Some(ice),
            Self::IceMask => Some(IceConfig { use_mask: true, ..ice }),
            Self::Mice | Self::MiceY => Some(mice),
            Self::MiceMask => Some(IceConfig { use_mask: true, ..mice }),
            _ => None,
        }
    }

    fn embedding(self) -> Option<EmbeddingKind> {
        match self {
            Self::Neumiss => Some(EmbeddingKind::Neumiss),
            Self::Neumise => Some(EmbeddingKind::Neumise),
            _ => None,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown estimator {s:?}; known: {}", known.join(", ")))
            })
    }
}

/// Everything fitting needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    /// Optimiser settings; with a grid, `lr` and `weight_decay` come from
    /// the selected point instead.
    pub train: TrainConfig,
    pub width: usize,
    pub depth: usize,
    pub n_blocks: usize,
    pub n_iter: usize,
    pub n_imp: usize,
    pub alpha: f64,
    /// Draws per row for the probabilistic oracle.
    pub n_draws: usize,
    pub grid: Option<GridSpace>,
    pub grid_reps: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            width: 50,
            depth: 1,
            n_blocks: DEFAULT_N_BLOCKS,
            n_iter: DEFAULT_N_ITER,
            n_imp: DEFAULT_N_IMP,
            alpha: DEFAULT_ALPHA,
            n_draws: 5,
            grid: None,
            grid_reps: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub enum EstimatorModel {
    Analytic {
        kind: EstimatorKind,
        model: AnalyticModel,
        spec: MechanismSpec,
        n_draws: usize,
        seed: u64,
    },
    Mean {
        value: f64,
    },
    /// Impute, then regress; for the outcome-conditional variants the
    /// imputer is the outcome-free second stage.
    Imputed {
        kind: EstimatorKind,
        imputer: IceModel,
        net: Network<f64>,
        seed: u64,
    },
    Neural {
        kind: EstimatorKind,
        net: Network<f64>,
    },
}

/// A fitted model with whatever diagnostics fitting produced.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: EstimatorModel,
    pub report: Option<TrainReport>,
    pub grid: Option<GridResult>,
}

fn stack(completions: &[Matrix], y: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    let mut design = completions[0].clone();
    let mut targets = y.to_vec();
    for c in &completions[1..] {
        design = design.vcat(c)?;
        targets.extend_from_slice(y);
    }
    Ok((design, targets))
}

fn train_network(
    arch_for: &(dyn Fn(usize, usize) -> Architecture + Sync),
    tr: &TrainData<f64>,
    va: &TrainData<f64>,
    s: &FitSettings,
    seed: u64,
) -> Result<(Network<f64>, TrainReport, Option<GridResult>)> {
    let fit_one = |lr: f64, weight_decay: f64, width: usize, depth: usize, rep: usize| {
        let arch = arch_for(width, depth);
        let mut net = Network::init(arch, &tr.input, &mut rng_from(derive_indexed(seed, "init", rep as u64)))?;
        let cfg = TrainConfig {
            lr,
            weight_decay,
            seed: derive_indexed(seed, "shuffle", rep as u64),
            ..s.train
        };
        let report = train(&mut net, tr, va, &cfg)?;
        Ok::<_, Error>((net, report))
    };
    match &s.grid {
        None => {
            let (net, report) = fit_one(s.train.lr, s.train.weight_decay, s.width, s.depth, 0)?;
            Ok((net, report, None))
        }
        Some(space) => {
            let result = grid_search(space, s.grid_reps.max(1), |p, rep| {
                fit_one(p.lr, p.weight_decay, p.width, p.depth, rep).map(|(_, r)| r.best_val_mse)
            })?;
            let b = result.best;
            let (net, report) = fit_one(b.lr, b.weight_decay, b.width, b.depth, 0)?;
            Ok((net, report, Some(result)))
        }
    }
}

/// Fits estimator `kind` on `train`, using `val` for early stopping and
/// model selection.
pub fn fit_estimator(
    kind: EstimatorKind,
    train_md: &MaskedDataset,
    val_md: &MaskedDataset,
    s: &FitSettings,
    seed: u64,
) -> Result<Fitted> {
    if train_md.d() != val_md.d() {
        return Err(Error::shape("fit_estimator", format!("train d = {}, val d = {}", train_md.d(), val_md.d())));
    }
    let d = train_md.d();
    if kind.is_analytic() {
        let gp = train_md.source.gparams.clone().ok_or_else(|| {
            Error::Contract(format!("{kind} needs the generating Gaussian parameters; this dataset has none"))
        })?;
        if train_md.spec.kind() == MechanismKind::MarY {
            return Err(Error::Contract(format!("{kind} has no closed form under outcome-dependent masking")));
        }
        let model = AnalyticModel::for_spec(gp, train_md.source.oparams.clone(), &train_md.spec);
        return Ok(Fitted {
            model: EstimatorModel::Analytic {
                kind,
                model,
                spec: train_md.spec.clone(),
                n_draws: s.n_draws,
                seed: derive(seed, "oracle-draws"),
            },
            report: None,
            grid: None,
        });
    }
    if kind == EstimatorKind::Mean {
        let y = train_md.y();
        if y.is_empty() {
            return Err(Error::Contract("mean predictor needs at least one training row".into()));
        }
        return Ok(Fitted {
            model: EstimatorModel::Mean {
                value: y.iter().sum::<f64>() / y.len() as f64,
            },
            report: None,
            grid: None,
        });
    }
    if let Some(ek) = kind.embedding() {
        let tr = TrainData::new(NetInput::from_masked(&train_md.xtilde), train_md.y().to_vec())?;
        let va = TrainData::new(NetInput::from_masked(&val_md.xtilde), val_md.y().to_vec())?;
        let spec = EmbeddingSpec::new(ek, s.n_blocks);
        let (net, report, grid) = train_network(&|w, dp| Architecture::embedded(d, spec, w, dp), &tr, &va, s, seed)?;
        return Ok(Fitted {
            model: EstimatorModel::Neural { kind, net },
            report: Some(report),
            grid,
        });
    }
    let cfg = kind.imputer_config(s).expect("imputation estimator");
    let (imputer, design, targets) = if matches!(kind, EstimatorKind::IceY | EstimatorKind::MiceY) {
        let p = y_conditional_pipeline(train_md, cfg, derive(seed, "y-pipeline"))?;
        (p.imputer, p.design, p.targets)
    } else {
        let imputer = IceModel::fit(&train_md.xtilde, None, cfg)?;
        let comps = imputer.transform(&train_md.xtilde, None, derive(seed, "impute-train"))?;
        let (design, targets) = stack(&comps, train_md.y())?;
        (imputer, design, targets)
    };
    let val_comps = imputer.transform(&val_md.xtilde, None, derive(seed, "impute-val"))?;
    let (val_design, val_targets) = stack(&val_comps, val_md.y())?;
    let tr = TrainData::new(NetInput::dense(&design), targets)?;
    let va = TrainData::new(NetInput::dense(&val_design), val_targets)?;
    let input_dim = design.cols();
    let (net, report, grid) = train_network(&|w, dp| Architecture::mlp(input_dim, w, dp), &tr, &va, s, seed)?;
    Ok(Fitted {
        model: EstimatorModel::Imputed {
            kind,
            imputer,
            net,
            seed: derive(seed, "impute-predict"),
        },
        report: Some(report),
        grid,
    })
}

#[derive(Serialize, Deserialize)]
struct EstimatorMeta {
    estimator: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arch: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    imputer: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<MechanismSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outcome: Option<OutcomeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaussian: Option<(f64, f64)>,
    n_draws: usize,
    seed: u64,
}

impl EstimatorModel {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            Self::Analytic { kind, .. } | Self::Imputed { kind, .. } | Self::Neural { kind, .. } => *kind,
            Self::Mean { .. } => EstimatorKind::Mean,
        }
    }

    pub fn predict(&self, md: &MaskedDataset) -> Result<Vec<f64>> {
        match self {
            Self::Analytic {
                kind,
                model,
                n_draws,
                seed,
                ..
            } => match kind {
                EstimatorKind::Bayes => model.bayes_all(md),
                EstimatorKind::OracleCond => model.oracle_cond_all(md),
                _ => model.oracle_prob_all(md, *n_draws, *seed),
            },
            Self::Mean { value } => Ok(vec![*value; md.n()]),
            Self::Imputed { imputer, net, seed, .. } => {
                let comps = imputer.transform(&md.xtilde, None, *seed)?;
                let mut acc = vec![0.0; md.n()];
                for c in &comps {
                    for (a, p) in acc.iter_mut().zip(net.predict(&NetInput::dense(c))?) {
                        *a += p;
                    }
                }
                let k = comps.len() as f64;
                Ok(acc.into_iter().map(|a| a / k).collect())
            }
            Self::Neural { net, .. } => net.predict(&NetInput::from_masked(&md.xtilde)),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut meta = EstimatorMeta {
            estimator: self.kind(),
            arch: None,
            imputer: None,
            spec: None,
            outcome: None,
            gaussian: None,
            n_draws: 0,
            seed: 0,
        };
        let mut arrays: Vec<(String, Matrix)> = Vec::new();
        match self {
            Self::Analytic {
                model, spec, n_draws, seed, ..
            } => {
                meta.spec = Some(spec.clone());
                meta.outcome = Some(model.op.clone());
                meta.gaussian = Some((model.gp.lambda, model.gp.jitter));
                meta.n_draws = *n_draws;
                meta.seed = *seed;
                arrays.push(("mu".into(), Matrix::column_vector(model.gp.mu.clone())));
                arrays.push(("sigma".into(), model.gp.sigma.clone()));
                arrays.push(("factor".into(), model.gp.factor.clone()));
            }
            Self::Mean { value } => arrays.push(("mean".into(), Matrix::column_vector(vec![*value]))),
            Self::Imputed { imputer, net, seed, .. } => {
                let ic = imputer.to_container()?;
                meta.imputer = Some(ic.meta.clone());
                meta.arch = Some(net.arch);
                meta.seed = *seed;
                for name in ic.names() {
                    arrays.push((format!("imputer/{name}"), ic.get(name)?.clone()));
                }
            }
            Self::Neural { net, .. } => meta.arch = Some(net.arch),
        }
        let mut c = Container::new("estimator", &meta)?;
        for (name, m) in arrays {
            c.push(name, m);
        }
        if let Self::Imputed { net, .. } | Self::Neural { net, .. } = self {
            net.write_into(&mut c, "net/");
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("estimator")?;
        let meta: EstimatorMeta = c.meta()?;
        let kind = meta.estimator;
        let missing = |what: &str| Error::Format(format!("{kind} payload lacks {what}"));
        if kind.is_analytic() {
            let spec = meta.spec.ok_or_else(|| missing("a mechanism"))?;
            let op = meta.outcome.ok_or_else(|| missing("outcome parameters"))?;
            let (lambda, jitter) = meta.gaussian.ok_or_else(|| missing("Gaussian metadata"))?;
            let mu = c.get_vec("mu")?;
            let gp = GaussianParams {
                d: mu.len(),
                lambda,
                mu,
                sigma: c.get("sigma")?.clone(),
                factor: c.get("factor")?.clone(),
                jitter,
            };
            return Ok(Self::Analytic {
                kind,
                model: AnalyticModel::for_spec(gp, op, &spec),
                spec,
                n_draws: meta.n_draws,
                seed: meta.seed,
            });
        }
        if kind == EstimatorKind::Mean {
            let v = c.get_vec("mean")?;
            return v.first().map(|&value| Self::Mean { value }).ok_or_else(|| missing("the mean"));
        }
        let arch = meta.arch.ok_or_else(|| missing("an architecture"))?;
        let net = Network::read_from(c, "net/", arch)?;
        if kind.embedding().is_some() {
            return Ok(Self::Neural { kind, net });
        }
        let mut ic = Container::new("ice-model", &())?;
        ic.meta = meta.imputer.ok_or_else(|| missing("imputer metadata"))?;
        for name in c.names() {
            if let Some(rest) = name.strip_prefix("imputer/") {
                ic.push(rest, c.get(name)?.clone());
            }
        }
        Ok(Self::Imputed {
            kind,
            imputer: IceModel::from_container(&ic)?,
            net,
            seed: meta.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// SHA-256 of the serialised model, as lowercase hex. Any change to a
    /// weight, statistic or setting changes it.
    pub fn fingerprint(&self) -> Result<String> {
        let bytes = self.to_container()?.to_bytes()?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::simulate;
    use crate::missingness::{apply_mar_y, apply_mcar};
    use std::sync::Arc;

    fn quick() -> FitSettings {
        FitSettings {
            train: TrainConfig {
                max_epochs: 4,
                lr: 1e-2,
                ..TrainConfig::default()
            },
            width: 8,
            n_blocks: 2,
            n_iter: 2,
            n_imp: 2,
            n_draws: 2,
            ..FitSettings::default()
        }
    }

    fn split(seed: u64) -> (MaskedDataset, MaskedDataset) {
        let ds = Arc::new(simulate(4, 0.7, 400, seed).unwrap());
        let md = apply_mcar(ds, 0.3, &mut rng_from(seed + 1)).unwrap();
        let tr: Vec<usize> = (0..300).collect();
        let va: Vec<usize> = (300..400).collect();
        (md.subset(&tr), md.subset(&va))
    }

    #[test]
    fn names_roundtrip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!(matches!("lasso".parse::<EstimatorKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn every_estimator_fits_predicts_and_roundtrips() {
        let (tr, va) = split(11);
        for k in EstimatorKind::ALL {
            let f = fit_estimator(k, &tr, &va, &quick(), 5).unwrap();
            let p = f.model.predict(&va).unwrap();
            assert_eq!(p.len(), va.n());
            assert!(p.iter().all(|v| v.is_finite()), "{k}");
            let back = EstimatorModel::from_container(&f.model.to_container().unwrap()).unwrap();
            assert_eq!(back.predict(&va).unwrap(), p, "{k}");
            assert_eq!(back.fingerprint().unwrap(), f.model.fingerprint().unwrap());
            assert_eq!(k.is_learned(), f.report.is_some());
        }
    }

    #[test]
    fn fitting_is_seed_deterministic() {
        let (tr, va) = split(12);
        for k in [EstimatorKind::Mice, EstimatorKind::Neumise, EstimatorKind::MiceY] {
            let a = fit_estimator(k, &tr, &va, &quick(), 9).unwrap().model;
            let b = fit_estimator(k, &tr, &va, &quick(), 9).unwrap().model;
            assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
            let c = fit_estimator(k, &tr, &va, &quick(), 10).unwrap().model;
            assert_ne!(a.fingerprint().unwrap(), c.fingerprint().unwrap());
        }
    }

    #[test]
    fn analytic_estimators_refuse_outcome_dependent_masking() {
        let ds = Arc::new(simulate(3, 0.7, 200, 3).unwrap());
        let md = apply_mar_y(ds, 0.3, &mut rng_from(4)).unwrap();
        let r = fit_estimator(EstimatorKind::Bayes, &md, &md, &quick(), 0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn grid_selection_refits_the_chosen_point() {
        let (tr, va) = split(13);
        let s = FitSettings {
            grid: Some(GridSpace {
                lr: vec![1e-2, 1e-3],
                weight_decay: vec![1e-4],
                width: vec![4, 8],
                depth: vec![1],
            }),
            ..quick()
        };
        let f = fit_estimator(EstimatorKind::Neumiss, &tr, &va, &s, 1).unwrap();
        let g = f.grid.unwrap();
        assert_eq!(g.scores.len(), 4);
        let chosen = g.scores.iter().find(|(p, _)| *p == g.best).unwrap().1;
        assert_eq!(f.report.unwrap().best_val_mse, chosen);
    }
}
