use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mshift::analytic::{mse, AnalyticModel};
use mshift::datagen::{ingest_table, simulate, ColumnKind, Dataset, TableSchema};
use mshift::estimator::{fit_estimator, EstimatorKind, EstimatorModel, FitSettings};
use mshift::harness::{self, Baseline, ExperimentConfig};
use mshift::missingness::{apply_mechanism, MaskedDataset, MechanismConfig, MechanismKind, MechanismSpec};
use mshift::rng::rng_from;

#[derive(Parser)]
#[command(name = "mshift", version, about = "Prediction under missingness shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a Gaussian dataset with a wave outcome, or ingest a CSV table.
    Simulate {
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 0.7)]
        lambda: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ingest this CSV instead of simulating.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Column to keep from --csv, as NAME:continuous or NAME:binary.
        #[arg(long = "column", value_name = "NAME:KIND")]
        columns: Vec<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Apply a missingness mechanism to a dataset.
    Mask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "mcar")]
        mechanism: MechanismKind,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        tilt: Option<f64>,
        #[arg(long)]
        y_strength: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit one estimator on a masked dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Validation set; without it the last --val-fraction of rows is held out.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long)]
        estimator: EstimatorKind,
        /// TOML file with fit settings (same keys as an experiment's [fit]).
        #[arg(long)]
        settings: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Test MSE of a fitted estimator on a masked dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write per-row predictions here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run a full experiment from a config file.
    Run {
        #[arg(long, short)]
        config: PathBuf,
        /// Overrides MSHIFT_OUTPUT_ROOT and the config.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Overrides MSHIFT_WORKERS and the config.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarise a results file into a table and figures.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to the results file's directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// `bayes` or an estimator name.
        #[arg(long, default_value = "bayes")]
        baseline: Baseline,
    },
}

fn parse_columns(specs: &[String]) -> Result<TableSchema> {
    let mut schema = TableSchema::new();
    for s in specs {
        let (name, kind) = s.rsplit_once(':').with_context(|| format!("column {s:?} is not NAME:KIND"))?;
        let kind = match kind {
            "continuous" => ColumnKind::Continuous,
            "binary" => ColumnKind::Binary,
            other => bail!("column kind {other:?} is neither continuous nor binary"),
        };
        schema.insert(name.to_string(), kind);
    }
    Ok(schema)
}

fn cmd_simulate(d: usize, lambda: f64, n: usize, seed: u64, csv: Option<PathBuf>, columns: &[String], out: &Path) -> Result<()> {
    let ds = match csv {
        Some(path) => {
            let schema = parse_columns(columns)?;
            let (ds, rep) = ingest_table(&path, &schema, seed)?;
            println!(
                "ingested {} of {} rows ({:.1}% dropped as incomplete)",
                ds.n(),
                rep.rows_read,
                100.0 * rep.dropped_fraction()
            );
            ds
        }
        None => simulate(d, lambda, n, seed)?,
    };
    ds.save(out)?;
    println!("wrote {} (n = {}, d = {}, noise sd = {:.4})", out.display(), ds.n(), ds.d(), ds.oparams.sigma_eps);
    Ok(())
}

fn cmd_mask(data: &Path, cfg: MechanismConfig, seed: u64, out: &Path) -> Result<()> {
    let ds = Arc::new(Dataset::load(data).with_context(|| format!("loading {}", data.display()))?);
    let md = apply_mechanism(ds, &cfg, &mut rng_from(seed))?;
    md.save(out)?;
    println!("wrote {} ({} at target {}, realised {:.4})", out.display(), cfg.kind.name(), cfg.rate, md.missing_rate());
    Ok(())
}

fn load_masked(path: &Path) -> Result<MaskedDataset> {
    MaskedDataset::load(path).with_context(|| format!("loading {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    val: Option<&Path>,
    val_fraction: f64,
    kind: EstimatorKind,
    settings: Option<&Path>,
    overrides: (Option<usize>, Option<usize>, Option<usize>, Option<f64>),
    seed: u64,
    out: &Path,
) -> Result<()> {
    let md = load_masked(data)?;
    let (train, val) = match val {
        Some(v) => (md, load_masked(v)?),
        None => {
            if !(val_fraction > 0.0 && val_fraction < 1.0) {
                bail!("--val-fraction must lie in (0, 1)");
            }
            let n_val = ((md.n() as f64 * val_fraction).round() as usize).clamp(1, md.n() - 1);
            let cut = md.n() - n_val;
            let tr: Vec<usize> = (0..cut).collect();
            let va: Vec<usize> = (cut..md.n()).collect();
            (md.subset(&tr), md.subset(&va))
        }
    };
    let mut s: FitSettings = match settings {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => FitSettings::default(),
    };
    let (max_epochs, width, depth, lr) = overrides;
    if let Some(v) = max_epochs {
        s.train.max_epochs = v;
    }
    if let Some(v) = width {
        s.width = v;
    }
    if let Some(v) = depth {
        s.depth = v;
    }
    if let Some(v) = lr {
        s.train.lr = v;
    }
    let fitted = fit_estimator(kind, &train, &val, &s, seed)?;
    fitted.model.save(out)?;
    if let Some(r) = &fitted.report {
        println!(
            "{kind}: {} epochs, best validation MSE {:.6} at epoch {}",
            r.epochs, r.best_val_mse, r.best_epoch
        );
    }
    if let Some(g) = &fitted.grid {
        println!("grid selected {:?}", g.best);
    }
    println!("wrote {} (sha256 {})", out.display(), fitted.model.fingerprint()?);
    Ok(())
}

fn cmd_evaluate(model: &Path, data: &Path, predictions: Option<&Path>) -> Result<()> {
    let model = EstimatorModel::load(model).with_context(|| format!("loading {}", model.display()))?;
    let md = load_masked(data)?;
    let pred = model.predict(&md)?;
    let m = mse(&pred, md.y())?;
    print!("{}: mse = {m:.6}", model.kind());
    if let (Some(gp), false) = (md.source.gparams.clone(), matches!(md.spec, MechanismSpec::MarY { .. })) {
        let bayes = AnalyticModel::for_spec(gp, md.source.oparams.clone(), &md.spec);
        let b = mse(&bayes.bayes_all(&md)?, md.y())?;
        print!(", bayes_mse = {b:.6}, delta = {:.6}", m - b);
    }
    println!();
    if let Some(p) = predictions {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["row", "y", "prediction"])?;
        for (i, (y, f)) in md.y().iter().zip(&pred).enumerate() {
            w.write_record([i.to_string(), y.to_string(), f.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_run(config: &Path, out: Option<PathBuf>, workers: Option<usize>) -> Result<()> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let dir = out.unwrap_or_else(|| harness::resolve_output_dir(&cfg));
    let workers = match workers {
        Some(w) => w,
        None => harness::resolve_workers(&cfg)?,
    };
    let res = harness::run_experiment(&cfg, &dir, workers)?;
    let failed = res.records.iter().filter(|r| !r.is_ok()).count();
    println!(
        "wrote {} records to {} ({failed} with error status)",
        res.records.len(),
        res.results.display()
    );
    Ok(())
}

fn cmd_report(results: &Path, out: Option<PathBuf>, baseline: Baseline) -> Result<()> {
    let dir = out.unwrap_or_else(|| results.parent().map(Path::to_path_buf).unwrap_or_default());
    let rep = harness::report(results, &dir, baseline)?;
    for r in &rep.rows {
        println!(
            "{:<32} {:<12} {:<15} mse {:.5} ± {:.5}  delta {:+.5}",
            r.scenario,
            r.estimator.name(),
            r.environment.name(),
            r.mean_mse,
            r.sd_mse,
            r.mean_delta
        );
    }
    println!("wrote {} and {} figure(s)", rep.summary.display(), rep.figures.len());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            d,
            lambda,
            n,
            seed,
            csv,
            columns,
            out,
        } => cmd_simulate(d, lambda, n, seed, csv, &columns, &out),
        Command::Mask {
            data,
            mechanism,
            rate,
            tilt,
            y_strength,
            seed,
            out,
        } => {
            let mut cfg = MechanismConfig::new(mechanism, rate);
            if let Some(t) = tilt {
                cfg.tilt = t;
            }
            if let Some(s) = y_strength {
                cfg.y_strength = s;
            }
            cmd_mask(&data, cfg, seed, &out)
        }
        Command::Train {
            data,
            val,
            val_fraction,
            estimator,
            settings,
            max_epochs,
            width,
            depth,
            lr,
            seed,
            out,
        } => cmd_train(
            &data,
            val.as_deref(),
            val_fraction,
            estimator,
            settings.as_deref(),
            (max_epochs, width, depth, lr),
            seed,
            &out,
        ),
        Command::Evaluate { model, data, predictions } => cmd_evaluate(&model, &data, predictions.as_deref()),
        Command::Run { config, out, workers } => cmd_run(&config, out, workers),
        Command::Report { results, out, baseline } => cmd_report(&results, out, baseline),
    }
}
