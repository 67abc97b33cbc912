//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::TableSchema;
use crate::error::{Error, Result};
use crate::estimator::{EstimatorKind, FitSettings};
use crate::missingness::{MechanismConfig, MechanismKind, DEFAULT_TILT};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    #[serde(default = "one")]
    pub repetitions: usize,
    pub dataset: DatasetConfig,
    pub mechanism: MechanismSection,
    #[serde(default)]
    pub sizes: Sizes,
    /// May be empty, in which case a run writes only the header.
    #[serde(default)]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default)]
    pub output: OutputConfig,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Simulated { d: usize, lambda: f64 },
    /// A CSV table; relative paths resolve against the config file.
    Ingested { path: PathBuf, schema: TableSchema },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismSection {
    pub kind: MechanismKind,
    pub source_rate: f64,
    /// One shifted scenario per entry; 0 gives the complete-data arm.
    pub target_rates: Vec<f64>,
    #[serde(default = "default_tilt")]
    pub tilt: f64,
    #[serde(default = "default_strength")]
    pub y_strength: f64,
}

fn default_tilt() -> f64 {
    DEFAULT_TILT
}

fn default_strength() -> f64 {
    1.0
}

impl MechanismSection {
    pub fn at_rate(&self, rate: f64) -> MechanismConfig {
        MechanismConfig {
            kind: self.kind,
            rate,
            tilt: self.tilt,
            y_strength: self.y_strength,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            train: 100_000,
            val: 10_000,
            test: 10_000,
        }
    }
}

impl Sizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Defaults to `results/<name>`.
    pub dir: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`; an ingested table path is made relative
    /// to the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let DatasetConfig::Ingested { path: table, .. } = &mut cfg.dataset {
            if table.is_relative() {
                if let Some(dir) = path.parent() {
                    *table = dir.join(&*table);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return bad(format!("name {:?} must be non-empty without slashes or commas", self.name));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.sizes.train < 2 || self.sizes.val == 0 || self.sizes.test == 0 {
            return bad(format!("sizes {:?} need train ≥ 2, val ≥ 1, test ≥ 1", self.sizes));
        }
        let rates = std::iter::once(self.mechanism.source_rate).chain(self.mechanism.target_rates.iter().copied());
        for r in rates {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("missingness rate {r} outside [0, 1)"));
            }
        }
        if self.mechanism.target_rates.is_empty() {
            return bad("at least one target rate is required".into());
        }
        if let DatasetConfig::Simulated { d, lambda } = self.dataset {
            if d == 0 || !(lambda > 0.0 && lambda <= 1.0) {
                return bad(format!("simulated dataset needs d ≥ 1 and λ in (0, 1], got d = {d}, λ = {lambda}"));
            }
        }
        if self.output.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        self.fit.train.validate()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
schema_version = 1
name = "desk"
seed = 7
repetitions = 2
estimators = ["bayes", "mean", "neumiss"]

[dataset]
kind = "simulated"
d = 5
lambda = 0.7

[mechanism]
kind = "mcar"
source_rate = 0.5
target_rates = [0.25, 0.0]

[sizes]
train = 100
val = 50
test = 50

[fit]
width = 8
[fit.train]
max_epochs = 3
"#;

    #[test]
    fn example_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        assert_eq!(cfg.estimators[2], EstimatorKind::Neumiss);
        assert_eq!(cfg.fit.train.max_epochs, 3);
        assert_eq!(cfg.fit.train.patience, 12);
        assert_eq!(cfg.mechanism.tilt, DEFAULT_TILT);
        assert_eq!(cfg.fit.width, 8);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sizes_default_to_the_full_scale_split() {
        let text = EXAMPLE.replace("[sizes]\ntrain = 100\nval = 50\ntest = 50\n", "");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.sizes.total(), 120_000);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for (from, to) in [
            ("schema_version = 1", "schema_version = 2"),
            ("repetitions = 2", "repetitions = 0"),
            ("[0.25, 0.0]", "[1.5]"),
            ("\"neumiss\"]", "\"lasso\"]"),
            ("lambda = 0.7", "lambda = 0.7\nextra = 1"),
            ("max_epochs = 3", "max_epochs = 3\npatience = 0"),
        ] {
            let text = EXAMPLE.replace(from, to);
            assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))), "{to}");
        }
    }
}
