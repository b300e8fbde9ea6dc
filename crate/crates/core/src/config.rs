//! Run configuration: a TOML document with one section per module, plus
//! dotted-path overrides such as `loss.tau=0.4`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::{load_dataset, GraphDataset};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::loss::LossConfig;
use crate::optim::AdamConfig;
use crate::trainer::{EncoderConfig, PaeConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Dataset directory; relative paths in a config file are resolved
    /// against the file's directory.
    pub path: PathBuf,
    /// Scale every feature row to sum to one.
    pub row_normalize_features: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: PathBuf::from("data/cora"),
            row_normalize_features: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: Option<usize>,
    pub tstat_every: Option<usize>,
    pub tstat_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            seed: t.seed,
            lr: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            eps: t.optimizer.eps,
            checkpoint_every: None,
            tstat_every: None,
            tstat_samples: t.tstat_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub bins: usize,
    pub negatives_per_node: usize,
    pub tstat_samples: usize,
    pub seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            bins: 50,
            negatives_per_node: 20,
            tstat_samples: 100_000,
            seed: 0,
        }
    }
}

/// Every tunable of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub pae: PaeConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub analysis: AnalysisSection,
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `section.key=value` (any depth) in `table`; the value is parsed as
/// TOML, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses a TOML document, then applies `overrides` in order.
    pub fn from_str_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`; a relative dataset path from the file is taken relative
    /// to the file's directory, one from an override relative to the cwd.
    pub fn from_file(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_str_with(&text, overrides)?;
        let overridden = overrides.iter().any(|o| o.trim_start().starts_with("dataset.path"));
        if !overridden && cfg.dataset.path.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.dataset.path = base.join(&cfg.dataset.path);
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            seed: t.seed,
            optimizer: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
            },
            augment: self.augment.clone(),
            loss: self.loss.clone(),
            encoder: self.encoder.clone(),
            pae: self.pae.clone(),
            checkpoint_every: t.checkpoint_every,
            tstat_every: t.tstat_every,
            tstat_samples: t.tstat_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset.path.is_dir() {
            return Err(Error::Config(format!(
                "dataset directory {} does not exist",
                self.dataset.path.display()
            )));
        }
        self.train_config().validate()?;
        self.eval.validate()?;
        if self.analysis.bins == 0 {
            return Err(Error::Config("analysis.bins must be positive".into()));
        }
        Ok(())
    }

    /// Loads the dataset and applies the configured preprocessing.
    pub fn load_dataset(&self) -> Result<GraphDataset> {
        let g = load_dataset(&self.dataset.path)?;
        Ok(if self.dataset.row_normalize_features {
            g.with_row_normalized_features()
        } else {
            g
        })
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossMode;

    #[test]
    fn overrides_and_defaults() {
        let cfg = RunConfig::from_str_with(
            "[loss]\ntau = 0.4\n[train]\nepochs = 10\n",
            &[
                "loss.mode=grace".into(),
                "train.seed=3".into(),
                "encoder.hidden=[16, 8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.loss.tau, 0.4);
        assert_eq!(cfg.loss.mode, LossMode::Grace);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.encoder.hidden, vec![16, 8]);
        assert_eq!(cfg.train.lr, 5e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_str_with("[loss]\ntemperature = 1.0\n", &[]),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_str_with("", &["nonsense".into()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_str_with("[pae]\nbackend = \"vgae\"\n", &[]).unwrap();
        let again = RunConfig::from_str_with(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn relative_dataset_path_follows_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.config");
        fs::write(&path, "[dataset]\npath = \"data/g\"\n").unwrap();
        let cfg = RunConfig::from_file(&path, &[]).unwrap();
        assert_eq!(cfg.dataset.path, dir.path().join("data/g"));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_file(dir.path().join("missing.config"), &[]),
            Err(Error::MissingFile(_))
        ));
    }
}
