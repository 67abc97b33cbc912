//! Per-repetition data: one complete sample, masked once for the source
//! and once per target rate with freshly instantiated mechanism parameters.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::datagen::{ingest_table, simulate, Dataset};
use crate::error::{Error, Result};
use crate::harness::config::{DatasetConfig, ExperimentConfig};
use crate::missingness::{apply_spec, complete, MaskedDataset};
use crate::rng::{derive, derive_indexed, rng_from};

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: MaskedDataset,
    pub val: MaskedDataset,
    pub test: MaskedDataset,
}

impl Splits {
    fn of(md: &MaskedDataset, sizes: &crate::harness::config::Sizes) -> Self {
        let a = sizes.train;
        let b = a + sizes.val;
        let idx = |r: std::ops::Range<usize>| r.collect::<Vec<_>>();
        Self {
            train: md.subset(&idx(0..a)),
            val: md.subset(&idx(a..b)),
            test: md.subset(&idx(b..b + sizes.test)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TargetArm {
    pub rate: f64,
    pub splits: Splits,
}

impl TargetArm {
    /// A zero target rate evaluates on complete data.
    pub fn is_complete(&self) -> bool {
        self.rate == 0.0
    }
}

#[derive(Clone, Debug)]
pub struct RepData {
    pub rep: usize,
    pub seed: u64,
    pub data: Arc<Dataset>,
    pub source: Splits,
    pub targets: Vec<TargetArm>,
}

/// Loads an ingested table once; simulated configs return `None`.
pub fn load_base(cfg: &ExperimentConfig) -> Result<Option<Arc<Dataset>>> {
    match &cfg.dataset {
        DatasetConfig::Simulated { .. } => Ok(None),
        DatasetConfig::Ingested { path, schema } => {
            let (ds, _) = ingest_table(path, schema, derive(cfg.seed, "ingest-outcome"))?;
            if ds.n() < cfg.sizes.total() {
                return Err(Error::Config(format!(
                    "{} has {} complete rows; the configured splits need {}",
                    path.display(),
                    ds.n(),
                    cfg.sizes.total()
                )));
            }
            Ok(Some(Arc::new(ds)))
        }
    }
}

pub fn rep_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    derive_indexed(cfg.seed, "rep", rep as u64)
}

fn mask(ds: &Arc<Dataset>, cfg: &ExperimentConfig, rate: f64, seed: u64) -> Result<MaskedDataset> {
    if rate == 0.0 {
        return Ok(complete(ds.clone()));
    }
    let spec = cfg.mechanism.at_rate(rate).instantiate(ds, &mut rng_from(derive(seed, "parameters")))?;
    apply_spec(ds.clone(), &spec, &mut rng_from(derive(seed, "masks")))
}

/// Builds repetition `rep`. Simulated data is drawn afresh per repetition;
/// an ingested table is reshuffled.
pub fn build_rep(cfg: &ExperimentConfig, base: Option<&Arc<Dataset>>, rep: usize) -> Result<RepData> {
    let seed = rep_seed(cfg, rep);
    let n = cfg.sizes.total();
    let data = match (&cfg.dataset, base) {
        (DatasetConfig::Simulated { d, lambda }, _) => Arc::new(simulate(*d, *lambda, n, derive(seed, "dataset"))?),
        (DatasetConfig::Ingested { .. }, Some(base)) => {
            let mut rows: Vec<usize> = (0..base.n()).collect();
            rows.shuffle(&mut rng_from(derive(seed, "row-order")));
            rows.truncate(n);
            Arc::new(base.subset(&rows))
        }
        (DatasetConfig::Ingested { .. }, None) => {
            return Err(Error::Contract("ingested dataset was not loaded".into()));
        }
    };
    let source = Splits::of(&mask(&data, cfg, cfg.mechanism.source_rate, derive(seed, "source"))?, &cfg.sizes);
    let targets = cfg
        .mechanism
        .target_rates
        .iter()
        .enumerate()
        .map(|(k, &rate)| {
            let md = mask(&data, cfg, rate, derive_indexed(seed, "target", k as u64))?;
            Ok(TargetArm {
                rate,
                splits: Splits::of(&md, &cfg.sizes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RepData {
        rep,
        seed,
        data,
        source,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::missingness::MechanismSpec;

    fn cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml_str(crate::harness::config::tests::EXAMPLE).unwrap();
        c.mechanism.kind = crate::missingness::MechanismKind::MarLogistic;
        c
    }

    #[test]
    fn source_and_target_share_data_but_not_parameters() {
        let c = cfg();
        let r = build_rep(&c, None, 0).unwrap();
        assert_eq!(r.source.train.n(), 100);
        assert_eq!(r.source.test.n(), 50);
        assert_eq!(r.source.test.source.x, r.targets[0].splits.test.source.x);
        let (MechanismSpec::MarLogistic { columns: a, .. }, MechanismSpec::MarLogistic { columns: b, .. }) =
            (&r.source.train.spec, &r.targets[0].splits.train.spec)
        else {
            panic!("expected logistic specs");
        };
        assert_ne!(a, b);
        assert!(r.targets[1].is_complete());
        assert_eq!(r.targets[1].splits.test.missing_rate(), 0.0);
    }

    #[test]
    fn reps_differ_and_rebuild_identically() {
        let c = cfg();
        let a = build_rep(&c, None, 0).unwrap();
        let b = build_rep(&c, None, 1).unwrap();
        assert_ne!(a.data.x, b.data.x);
        let again = build_rep(&c, None, 1).unwrap();
        assert_eq!(b.data.x, again.data.x);
        assert_eq!(b.source.train.mask, again.source.train.mask);
    }
}
