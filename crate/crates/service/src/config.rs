//! Flat `key = value` run configuration with environment overrides.
//!
//! Every key may be overridden by `CCF_<KEY>` (upper case), e.g.
//! `CCF_LEARNING_RATE=0.001`. Precedence: defaults, then the file, then
//! the environment.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `batch_size` | minibatch size | 32 |
//! | `max_epochs` | epoch ceiling | 40 |
//! | `patience` | early-stop patience | 6 |
//! | `learning_rate` | Adam step size | 0.003 |
//! | `seed` | weight init and shuffling seed | 0 |
//! | `deterministic` | recorded in model metadata | true |
//! | `clip_norm` | global gradient-norm ceiling | 5.0 |
//! | `hidden` | hidden units / channels | 32 |
//! | `layers` | StackedLSTM depth | 2 |
//! | `kernel` | ConvLSTM kernel width | 3 |
//! | `window` | input window `W` in rows | 12 |
//! | `features` | `hourly` (lags + rolling stats) or `raw` | hourly |
//! | `target_lags` | add target lag/rolling columns | false |
//! | `train_fraction`, `val_fraction`, `test_fraction` | chronological split | 0.70, 0.15, 0.15 |
//! | `budget`, `initial_design`, `candidates` | Bayesian search | 12, 4, 1024 |
//! | `folds` | forward-chaining CV folds | 3 |

use std::path::Path;

use ccforecast_core::architectures::Architecture;
use ccforecast_core::features::FeatureConfig;
use ccforecast_core::ingest::SplitFractions;
use ccforecast_core::training::{ModelShape, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

pub const ENV_PREFIX: &str = "CCF_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Hourly,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub clip_norm: f64,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub window: usize,
    pub features: FeatureSet,
    pub target_lags: bool,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub budget: usize,
    pub initial_design: usize,
    pub candidates: usize,
    pub folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 40,
            patience: 6,
            learning_rate: 0.003,
            seed: 0,
            deterministic: true,
            clip_norm: 5.0,
            hidden: 32,
            layers: 2,
            kernel: 3,
            window: 12,
            features: FeatureSet::Hourly,
            target_lags: false,
            train_fraction: 0.70,
            val_fraction: 0.15,
            test_fraction: 0.15,
            budget: 12,
            initial_design: 4,
            candidates: 1024,
            folds: 3,
        }
    }
}

fn env_value(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    }
}

impl RunConfig {
    /// Reads `file` (when given) and applies `CCF_*` overrides from `env`.
    pub fn load(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> ServiceResult<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ServiceError::invalid("config", format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| ServiceError::invalid("config", format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let known = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        for (k, v) in env {
            let Some(key) = k.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            if known.contains_key(&key) {
                let mut value = env_value(&v);
                if matches!(known[&key], toml::Value::Float(_)) {
                    if let toml::Value::Integer(i) = value {
                        value = toml::Value::Float(i as f64);
                    }
                }
                table.insert(key, value);
            }
        }
        for (k, v) in table.iter_mut() {
            if matches!(known.get(k), Some(toml::Value::Float(_))) {
                if let toml::Value::Integer(i) = v {
                    *v = toml::Value::Float(*i as f64);
                }
            }
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ServiceError::invalid("config", e.to_string()))?;
        cfg.train_config().validate()?;
        cfg.fractions()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            learning_rate: self.learning_rate,
            seed: self.seed,
            deterministic: self.deterministic,
            clip_norm: self.clip_norm,
        }
    }

    pub fn shape(&self, architecture: Architecture) -> ModelShape {
        let mut s = ModelShape::new(architecture, self.hidden);
        match architecture {
            Architecture::Stacked => s.layers = self.layers,
            Architecture::Conv => s.kernel = self.kernel,
            _ => {}
        }
        s
    }

    pub fn feature_config(&self, interval_s: i64) -> FeatureConfig {
        let fc = match self.features {
            FeatureSet::Hourly => FeatureConfig::hourly(interval_s, self.window),
            FeatureSet::Raw => FeatureConfig::raw_only(interval_s, self.window),
        };
        fc.with_target_lags(self.target_lags)
    }

    pub fn fractions(&self) -> ServiceResult<SplitFractions> {
        Ok(SplitFractions::new(self.train_fraction, self.val_fraction, self.test_fraction)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_environment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.conf");
        std::fs::write(&p, "hidden = 48\nlearning_rate = 0.01\nfeatures = \"raw\"\nmax_epochs = 5\n").unwrap();
        let env = vec![
            ("CCF_LEARNING_RATE".to_string(), "1".to_string()),
            ("CCF_PATIENCE".to_string(), "2".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let c = RunConfig::load(Some(&p), env).unwrap();
        assert_eq!(c.hidden, 48);
        assert_eq!(c.learning_rate, 1.0);
        assert_eq!(c.patience, 2);
        assert_eq!(c.features, FeatureSet::Raw);
        assert_eq!(c.max_epochs, 5);
        assert_eq!(c.batch_size, RunConfig::default().batch_size);
    }

    #[test]
    fn bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.conf");
        std::fs::write(&p, "hiddne = 3\n").unwrap();
        assert!(RunConfig::load(Some(&p), vec![]).is_err());
        assert!(RunConfig::load(None, vec![("CCF_PATIENCE".into(), "0".into())]).is_err());
        assert!(RunConfig::load(None, vec![("CCF_TRAIN_FRACTION".into(), "0.9".into())]).is_err());
    }
}
