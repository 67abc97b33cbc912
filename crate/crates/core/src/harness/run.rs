//! Runs every (repetition, estimator) job and records one row per
//! scenario, environment and repetition.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{mse, AnalyticModel};
use crate::error::{Error, Result};
use crate::estimator::{fit_estimator, EstimatorKind, EstimatorModel};
use crate::harness::config::ExperimentConfig;
use crate::harness::scenario::{build_rep, load_base, RepData};
use crate::missingness::{MaskedDataset, MechanismKind};
use crate::rng::derive;

pub const WORKERS_ENV: &str = "MSHIFT_WORKERS";
pub const OUTPUT_ROOT_ENV: &str = "MSHIFT_OUTPUT_ROOT";
pub const RESULTS_FILE: &str = "results.csv";
pub const STATUS_OK: &str = "ok";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Environment {
    Source,
    TargetShifted,
    TargetNoshift,
    /// Source-trained model on a complete test sample.
    Complete,
}

impl Environment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Source => "source",
            Self::TargetShifted => "target-shifted",
            Self::TargetNoshift => "target-noshift",
            Self::Complete => "complete",
        }
    }
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub environment: Environment,
    pub rep: usize,
    pub mse: f64,
    /// Test MSE of the environment's own Bayes predictor, `NaN` when no
    /// closed form exists.
    pub bayes_mse: f64,
    pub delta: f64,
    pub seed: u64,
    pub wall_ms: u64,
    pub status: String,
}

impl ResultRecord {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

pub fn scenario_id(cfg: &ExperimentConfig, target_rate: f64) -> String {
    format!(
        "{}:{}:{}->{}",
        cfg.name,
        cfg.mechanism.kind.name(),
        cfg.mechanism.source_rate,
        target_rate
    )
}

/// `MSHIFT_OUTPUT_ROOT/<name>` when set, else the configured directory,
/// else `results/<name>`.
pub fn resolve_output_dir(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(&cfg.name),
        _ => cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("results").join(&cfg.name)),
    }
}

/// `MSHIFT_WORKERS` when set, else the configured count, else all cores.
pub fn resolve_workers(cfg: &ExperimentConfig) -> Result<usize> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        };
    }
    Ok(cfg
        .output
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())))
}

/// Bayes test MSE in `md`'s own environment, if a closed form applies.
pub fn bayes_reference(md: &MaskedDataset) -> Result<f64> {
    let Some(gp) = md.source.gparams.clone() else {
        return Ok(f64::NAN);
    };
    if md.spec.kind() == MechanismKind::MarY {
        return Ok(f64::NAN);
    }
    let model = AnalyticModel::for_spec(gp, md.source.oparams.clone(), &md.spec);
    mse(&model.bayes_all(md)?, md.y())
}

struct RepRefs {
    source: f64,
    targets: Vec<f64>,
}

struct Appender {
    path: PathBuf,
    lock: Mutex<()>,
}

impl Appender {
    fn create(path: PathBuf) -> Result<Self> {
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "scenario",
            "estimator",
            "environment",
            "rep",
            "mse",
            "bayes_mse",
            "delta",
            "seed",
            "wall_ms",
            "status",
        ])?;
        w.flush()?;
        Ok(Self {
            path,
            lock: Mutex::new(()),
        })
    }

    /// Appends one job's rows as a single write.
    fn append(&self, rows: &[ResultRecord]) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let _guard = self.lock.lock().expect("appender lock");
        use std::io::Write;
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub results: PathBuf,
    /// Sorted by scenario, estimator, environment and repetition.
    pub records: Vec<ResultRecord>,
}

fn ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

fn record(
    scenario: &str,
    estimator: EstimatorKind,
    environment: Environment,
    rep: &RepData,
    outcome: std::result::Result<(f64, u64), String>,
    bayes_mse: f64,
) -> ResultRecord {
    let (mse, wall_ms, status) = match outcome {
        Ok((m, w)) => (m, w, STATUS_OK.to_string()),
        Err(e) => (f64::NAN, 0, format!("error: {e}")),
    };
    ResultRecord {
        scenario: scenario.to_string(),
        estimator,
        environment,
        rep: rep.rep,
        mse,
        bayes_mse,
        delta: mse - bayes_mse,
        seed: rep.seed,
        wall_ms,
        status,
    }
}

/// Fits `kind` on the source and on every target, evaluating each model
/// where the design calls for it. Failures become error rows.
fn run_job(cfg: &ExperimentConfig, rep: &RepData, refs: &RepRefs, kind: EstimatorKind) -> Vec<ResultRecord> {
    let mut rows = Vec::new();
    let fit_seed = |label: String| derive(rep.seed, &label);
    let t = Instant::now();
    let source = fit_estimator(
        kind,
        &rep.source.train,
        &rep.source.val,
        &cfg.fit,
        fit_seed(format!("fit/{}/source", kind.name())),
    );
    let fit_ms = ms(t);
    let source = source.map_err(|e| e.to_string()).and_then(|f| {
        let fp = f.model.fingerprint().map_err(|e| e.to_string())?;
        Ok((f.model, fp))
    });
    let evaluate = |model: &EstimatorModel, md: &MaskedDataset, extra_ms: u64| -> std::result::Result<(f64, u64), String> {
        let t = Instant::now();
        let p = model.predict(md).map_err(|e| e.to_string())?;
        let m = mse(&p, md.y()).map_err(|e| e.to_string())?;
        Ok((m, extra_ms + ms(t)))
    };

    let source_eval = source.as_ref().map_err(Clone::clone).and_then(|(m, _)| evaluate(m, &rep.source.test, fit_ms));
    for (k, arm) in rep.targets.iter().enumerate() {
        let sid = scenario_id(cfg, arm.rate);
        rows.push(record(&sid, kind, Environment::Source, rep, source_eval.clone(), refs.source));
        let env = if arm.is_complete() {
            Environment::Complete
        } else {
            Environment::TargetShifted
        };
        let shifted = source.as_ref().map_err(Clone::clone).and_then(|(m, _)| evaluate(m, &arm.splits.test, 0));
        rows.push(record(&sid, kind, env, rep, shifted, refs.targets[k]));

        let t = Instant::now();
        let noshift = fit_estimator(
            kind,
            &arm.splits.train,
            &arm.splits.val,
            &cfg.fit,
            fit_seed(format!("fit/{}/target{k}", kind.name())),
        )
        .map_err(|e| e.to_string())
        .and_then(|f| evaluate(&f.model, &arm.splits.test, ms(t)));
        rows.push(record(&sid, kind, Environment::TargetNoshift, rep, noshift, refs.targets[k]));
    }

    // Evaluation must never touch the fitted source model.
    if let Ok((model, fp)) = &source {
        match model.fingerprint() {
            Ok(after) if &after == fp => {}
            _ => {
                for r in rows.iter_mut().filter(|r| r.environment != Environment::TargetNoshift) {
                    r.mse = f64::NAN;
                    r.delta = f64::NAN;
                    r.status = "error: source model changed during evaluation".into();
                }
            }
        }
    }
    rows
}

pub fn sort_records(records: &mut [ResultRecord]) {
    records.sort_by(|a, b| {
        (&a.scenario, a.estimator, a.environment, a.rep).cmp(&(&b.scenario, b.estimator, b.environment, b.rep))
    });
}

/// Runs the whole experiment into `out_dir` with `workers` threads.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, workers: usize) -> Result<RunOutput> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string()?)?;
    let results = out_dir.join(RESULTS_FILE);
    let appender = Appender::create(results.clone())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let records = pool.install(|| -> Result<Vec<ResultRecord>> {
        let base = load_base(cfg)?;
        let reps: Vec<Arc<RepData>> = (0..cfg.repetitions)
            .into_par_iter()
            .map(|r| build_rep(cfg, base.as_ref(), r).map(Arc::new))
            .collect::<Result<_>>()?;
        let refs: Vec<RepRefs> = reps
            .par_iter()
            .map(|rep| {
                Ok(RepRefs {
                    source: bayes_reference(&rep.source.test)?,
                    targets: rep
                        .targets
                        .iter()
                        .map(|a| bayes_reference(&a.splits.test))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        let jobs: Vec<(usize, EstimatorKind)> = (0..reps.len())
            .flat_map(|r| cfg.estimators.iter().map(move |&k| (r, k)))
            .collect();
        let chunks: Vec<Vec<ResultRecord>> = jobs
            .par_iter()
            .map(|&(r, k)| {
                let rows = run_job(cfg, &reps[r], &refs[r], k);
                appender.append(&rows)?;
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    })?;
    let mut records = records;
    sort_records(&mut records);
    Ok(RunOutput {
        dir: out_dir.to_path_buf(),
        results,
        records,
    })
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for r in rdr.deserialize() {
        out.push(r?);
    }
    Ok(out)
}
