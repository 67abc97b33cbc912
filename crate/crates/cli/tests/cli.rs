use std::path::Path;
use std::process::{Command, Output};

fn mshift(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mshift"));
    c.args(args).env_remove("MSHIFT_WORKERS").env_remove("MSHIFT_OUTPUT_ROOT");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = mshift(args, &[]);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_mask_train_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.msd");
    let masked = dir.path().join("masked.msd");
    let model = dir.path().join("model.mse");
    let preds = dir.path().join("preds.csv");
    ok(&["simulate", "--d", "4", "--n", "600", "--seed", "3", "-o", p(&data)]);
    assert!(dir.path().join("data.msd.toml").exists());
    let out = ok(&["mask", "--data", p(&data), "--mechanism", "mar", "--rate", "0.3", "--seed", "4", "-o", p(&masked)]);
    assert!(out.contains("mar-logistic"), "{out}");
    let out = ok(&[
        "train", "--data", p(&masked), "--estimator", "neumise", "--max-epochs", "3", "--width", "8", "-o", p(&model),
    ]);
    assert!(out.contains("sha256"), "{out}");
    let out = ok(&["evaluate", "--model", p(&model), "--data", p(&masked), "--predictions", p(&preds)]);
    assert!(out.contains("mse = ") && out.contains("bayes_mse"), "{out}");
    let rows = std::fs::read_to_string(&preds).unwrap().lines().count();
    assert_eq!(rows, 601);
}

#[test]
fn ingest_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.csv");
    std::fs::write(&table, "a,b,c\n1.0,0,x\n2.5,1,y\nNA,1,z\n0.5,0,w\n").unwrap();
    let out_path = dir.path().join("t.msd");
    let out = ok(&["simulate", "--csv", p(&table), "--column", "a:continuous", "--column", "b:binary", "-o", p(&out_path)]);
    assert!(out.contains("ingested 3 of 4 rows"), "{out}");
}

const CONFIG: &str = r#"
schema_version = 1
name = "clirun"
seed = 5
repetitions = 2
estimators = ["bayes", "mean", "ice"]

[dataset]
kind = "simulated"
d = 3
lambda = 0.7

[mechanism]
kind = "mcar"
source_rate = 0.5
target_rates = [0.25]

[sizes]
train = 200
val = 50
test = 100

[fit]
width = 6
[fit.train]
max_epochs = 3
"#;

#[test]
fn run_then_report_honours_output_root_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let root = dir.path().join("root");
    let o = mshift(&["run", "-c", p(&cfg)], &[("MSHIFT_OUTPUT_ROOT", p(&root)), ("MSHIFT_WORKERS", "2")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = root.join("clirun").join("results.csv");
    let first = std::fs::read_to_string(&results).unwrap();
    assert_eq!(first.lines().count(), 1 + 18);
    assert!(first.starts_with("scenario,estimator,environment,rep,mse,bayes_mse,delta,seed,wall_ms,status\n"));
    assert!(root.join("clirun").join("config.toml").exists());

    let again = dir.path().join("again");
    ok(&["run", "-c", p(&cfg), "-o", p(&again), "--workers", "1"]);
    let mse_by_key = |text: &str| {
        let mut v: Vec<(String, String)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[..4].join(","), f[4].to_string())
            })
            .collect();
        v.sort();
        v
    };
    assert_eq!(mse_by_key(&first), mse_by_key(&std::fs::read_to_string(again.join("results.csv")).unwrap()));

    let out = ok(&["report", "--results", p(&results)]);
    assert!(out.contains("target-shifted"), "{out}");
    assert!(root.join("clirun").join("summary.csv").exists());
    assert_eq!(std::fs::read_dir(root.join("clirun").join("figures")).unwrap().count(), 1);
}

#[test]
fn invalid_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, CONFIG.replace("schema_version = 1", "schema_version = 9")).unwrap();
    let o = mshift(&["run", "-c", p(&cfg)], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema_version"));

    let o = mshift(&["train", "--data", "x", "--estimator", "lasso", "-o", "y"], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown estimator"));

    std::fs::write(&cfg, CONFIG).unwrap();
    let o = mshift(&["run", "-c", p(&cfg), "-o", p(dir.path())], &[("MSHIFT_WORKERS", "zero")]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("MSHIFT_WORKERS"));
}
