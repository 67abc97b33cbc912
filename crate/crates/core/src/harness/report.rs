//! Summary tables and strip charts from a results file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorKind;
use crate::harness::run::{read_records, Environment, ResultRecord};

/// What deltas are measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// The `bayes_mse` column of each record.
    Bayes,
    /// Another estimator's MSE in the same scenario, environment and rep.
    Estimator(EstimatorKind),
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "bayes" {
            return Ok(Self::Bayes);
        }
        s.parse().map(Self::Estimator)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub environment: Environment,
    pub n_ok: usize,
    pub n_error: usize,
    pub mean_mse: f64,
    pub sd_mse: f64,
    pub mean_delta: f64,
    pub sd_delta: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

type Key = (String, EstimatorKind, Environment);

/// Per-record deltas against `baseline`, keyed like the summary; fails on
/// the first record whose baseline is missing.
pub fn deltas(records: &[ResultRecord], baseline: Baseline) -> Result<BTreeMap<Key, Vec<(usize, f64, f64)>>> {
    let lookup: BTreeMap<(&str, EstimatorKind, Environment, usize), f64> = records
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| ((r.scenario.as_str(), r.estimator, r.environment, r.rep), r.mse))
        .collect();
    let mut out: BTreeMap<Key, Vec<(usize, f64, f64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_ok()) {
        let base = match baseline {
            Baseline::Bayes if r.bayes_mse.is_finite() => r.bayes_mse,
            Baseline::Bayes => {
                return Err(Error::Report(format!(
                    "no Bayes reference for scenario {}, environment {}, rep {}",
                    r.scenario,
                    r.environment.name(),
                    r.rep
                )))
            }
            Baseline::Estimator(b) => *lookup
                .get(&(r.scenario.as_str(), b, r.environment, r.rep))
                .ok_or_else(|| {
                    Error::Report(format!(
                        "baseline {b} has no successful record for scenario {}, environment {}, rep {}",
                        r.scenario,
                        r.environment.name(),
                        r.rep
                    ))
                })?,
        };
        out.entry((r.scenario.clone(), r.estimator, r.environment))
            .or_default()
            .push((r.rep, r.mse, r.mse - base));
    }
    Ok(out)
}

pub fn summarize(records: &[ResultRecord], baseline: Baseline) -> Result<Vec<SummaryRow>> {
    let groups = deltas(records, baseline)?;
    let mut errors: BTreeMap<Key, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.is_ok()) {
        *errors.entry((r.scenario.clone(), r.estimator, r.environment)).or_default() += 1;
    }
    let keys: BTreeSet<Key> = groups.keys().chain(errors.keys()).cloned().collect();
    Ok(keys
        .into_iter()
        .map(|k| {
            let g = groups.get(&k).map(Vec::as_slice).unwrap_or(&[]);
            let (mean_mse, sd_mse) = mean_sd(&g.iter().map(|t| t.1).collect::<Vec<_>>());
            let (mean_delta, sd_delta) = mean_sd(&g.iter().map(|t| t.2).collect::<Vec<_>>());
            SummaryRow {
                n_ok: g.len(),
                n_error: errors.get(&k).copied().unwrap_or(0),
                scenario: k.0,
                estimator: k.1,
                environment: k.2,
                mean_mse,
                sd_mse,
                mean_delta,
                sd_delta,
            }
        })
        .collect())
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn file_stem(scenario: &str) -> String {
    scenario
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 60.0;

/// One SVG per scenario: a panel per environment, a box and the per-rep
/// points per estimator, and a dashed line at the mean model's average.
pub fn render_scenario(scenario: &str, groups: &BTreeMap<Key, Vec<(usize, f64, f64)>>) -> String {
    let envs: BTreeSet<Environment> = groups.keys().filter(|k| k.0 == scenario).map(|k| k.2).collect();
    let ests: BTreeSet<EstimatorKind> = groups.keys().filter(|k| k.0 == scenario).map(|k| k.1).collect();
    let all: Vec<f64> = groups
        .iter()
        .filter(|(k, _)| k.0 == scenario)
        .flat_map(|(_, v)| v.iter().map(|t| t.2))
        .filter(|v| v.is_finite())
        .collect();
    let (mut lo, mut hi) = all.iter().fold((0.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        hi += 1.0;
        lo -= 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let y_of = |v: f64| MARGIN + PANEL_H * (hi - v) / (hi - lo);

    let width = MARGIN + envs.len().max(1) as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.0 * MARGIN + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, xml_escape(scenario));
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="20" font-size="13">{}</text>"#, xml_escape(scenario));
    for (p, env) in envs.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL_W + MARGIN);
        let _ = writeln!(
            s,
            r##"<rect x="{x0}" y="{MARGIN}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888"/>"##
        );
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">{}</text>"#, MARGIN - 8.0, env.name());
        for t in 0..=4 {
            let v = lo + (hi - lo) * t as f64 / 4.0;
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" text-anchor="end" fill="#444">{v:.3}</text>"##,
                x0 - 4.0,
                y_of(v) + 4.0
            );
        }
        let zero = y_of(0.0);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" x2="{}" y1="{zero}" y2="{zero}" stroke="#bbb"/>"##,
            x0 + PANEL_W
        );
        let slot = PANEL_W / ests.len().max(1) as f64;
        for (e, est) in ests.iter().enumerate() {
            let cx = x0 + slot * (e as f64 + 0.5);
            let _ = writeln!(
                s,
                r#"<text x="{cx}" y="{}" text-anchor="end" transform="rotate(-40 {cx} {})">{}</text>"#,
                MARGIN + PANEL_H + 14.0,
                MARGIN + PANEL_H + 14.0,
                est.name()
            );
            let Some(pts) = groups.get(&(scenario.to_string(), *est, *env)) else {
                continue;
            };
            let mut v: Vec<f64> = pts.iter().map(|t| t.2).filter(|v| v.is_finite()).collect();
            if v.is_empty() {
                continue;
            }
            v.sort_by(f64::total_cmp);
            let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
            let bw = (slot * 0.5).min(30.0);
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{bw}" height="{}" fill="#dde8f5" stroke="#3a6ea5"/>"##,
                cx - bw / 2.0,
                y_of(q3),
                (y_of(q1) - y_of(q3)).max(0.5)
            );
            let _ = writeln!(
                s,
                r##"<line x1="{}" x2="{}" y1="{m}" y2="{m}" stroke="#3a6ea5" stroke-width="2"/>"##,
                cx - bw / 2.0,
                cx + bw / 2.0,
                m = y_of(med)
            );
            for (k, val) in v.iter().enumerate() {
                let jitter = (k as f64 / v.len() as f64 - 0.5) * bw * 0.6;
                let _ = writeln!(
                    s,
                    r##"<circle cx="{}" cy="{}" r="2.5" fill="#c0392b"/>"##,
                    cx + jitter,
                    y_of(*val)
                );
            }
        }
        if let Some(pts) = groups.get(&(scenario.to_string(), EstimatorKind::Mean, *env)) {
            let v: Vec<f64> = pts.iter().map(|t| t.2).filter(|v| v.is_finite()).collect();
            if !v.is_empty() {
                let y = y_of(v.iter().sum::<f64>() / v.len() as f64);
                let _ = writeln!(
                    s,
                    r##"<line x1="{x0}" x2="{}" y1="{y}" y2="{y}" stroke="#555" stroke-dasharray="5,4"/>"##,
                    x0 + PANEL_W
                );
                let _ = writeln!(
                    s,
                    r##"<text x="{}" y="{}" text-anchor="end" fill="#555">mean model</text>"##,
                    x0 + PANEL_W - 4.0,
                    y - 4.0
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Clone, Debug)]
pub struct ReportOutput {
    pub summary: PathBuf,
    pub figures: Vec<PathBuf>,
    pub rows: Vec<SummaryRow>,
}

/// Reads `results`, writes `summary.csv` and one figure per scenario into
/// `out_dir`.
pub fn report(results: impl AsRef<Path>, out_dir: impl AsRef<Path>, baseline: Baseline) -> Result<ReportOutput> {
    let records = read_records(results)?;
    if records.is_empty() {
        return Err(Error::Report("results file has no records".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("figures"))?;
    let rows = summarize(&records, baseline)?;
    let summary = out_dir.join("summary.csv");
    write_summary(&rows, &summary)?;
    let groups = deltas(&records, baseline)?;
    let scenarios: BTreeSet<&str> = records.iter().map(|r| r.scenario.as_str()).collect();
    let mut figures = Vec::new();
    for sc in scenarios {
        let path = out_dir.join("figures").join(format!("{}.svg", file_stem(sc)));
        std::fs::write(&path, render_scenario(sc, &groups))?;
        figures.push(path);
    }
    Ok(ReportOutput { summary, figures, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(est: EstimatorKind, env: Environment, rep: usize, mse: f64, bayes: f64) -> ResultRecord {
        ResultRecord {
            scenario: "s:mcar:0.5->0.25".into(),
            estimator: est,
            environment: env,
            rep,
            mse,
            bayes_mse: bayes,
            delta: mse - bayes,
            seed: 1,
            wall_ms: 3,
            status: "ok".into(),
        }
    }

    #[test]
    fn self_baseline_gives_zero_deltas() {
        let rs: Vec<_> = (0..3)
            .map(|r| rec(EstimatorKind::Ice, Environment::Source, r, 1.0 + r as f64, 0.5))
            .collect();
        let rows = summarize(&rs, Baseline::Estimator(EstimatorKind::Ice)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_delta, 0.0);
        assert_eq!(rows[0].mean_mse, 2.0);
        assert!((rows[0].sd_mse - 1.0).abs() < 1e-15);
    }

    #[test]
    fn missing_baselines_are_named() {
        let rs = vec![
            rec(EstimatorKind::Ice, Environment::Source, 0, 1.0, f64::NAN),
            rec(EstimatorKind::Mean, Environment::Source, 1, 1.0, f64::NAN),
        ];
        let e = summarize(&rs, Baseline::Estimator(EstimatorKind::Mean)).unwrap_err().to_string();
        assert!(e.contains("rep 0") && e.contains("source"), "{e}");
        let e = summarize(&rs, Baseline::Bayes).unwrap_err().to_string();
        assert!(e.contains("Bayes"), "{e}");
    }

    #[test]
    fn error_rows_are_counted_not_averaged() {
        let mut bad = rec(EstimatorKind::Ice, Environment::Source, 1, f64::NAN, 0.5);
        bad.status = "error: diverged".into();
        let rs = vec![rec(EstimatorKind::Ice, Environment::Source, 0, 1.0, 0.5), bad];
        let rows = summarize(&rs, Baseline::Bayes).unwrap();
        assert_eq!((rows[0].n_ok, rows[0].n_error), (1, 1));
        assert_eq!(rows[0].mean_delta, 0.5);
    }

    #[test]
    fn figure_has_a_panel_per_environment_and_a_reference_line() {
        let rs = vec![
            rec(EstimatorKind::Ice, Environment::Source, 0, 1.0, 0.5),
            rec(EstimatorKind::Mean, Environment::Source, 0, 2.0, 0.5),
            rec(EstimatorKind::Ice, Environment::TargetShifted, 0, 1.5, 0.5),
        ];
        let g = deltas(&rs, Baseline::Bayes).unwrap();
        let svg = render_scenario("s:mcar:0.5->0.25", &g);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<rect").count(), 2 + 3);
        assert!(svg.contains("mean model"));
        assert_eq!(file_stem("a:b:0.5->0.25"), "a_b_0.5-_0.25");
    }
}
