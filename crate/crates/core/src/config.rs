//! JSON run configuration with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::RoleBudgets;
use crate::bank::LifecycleThresholds;
use crate::data::{load_multivariate, load_ucr_tsv, Dataset};
use crate::error::{ConfigError, Result};
use crate::features::DEFAULT_TOP_N;
use crate::pipeline::{RunConfig, Stages};
use crate::plot::PlotConfig;
use crate::vlm::RemoteConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `<label>\t<v1>\t...` files, one per split.
    Ucr,
    /// One UCR-style file per channel: `<name>Dimension<i>_<SPLIT>.tsv`.
    Multivariate,
    /// [`Dataset`] serialized as JSON, one file per split.
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub description: String,
    pub format: DatasetFormat,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Directory holding the per-channel files of a multivariate dataset.
    pub dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            description: String::new(),
            format: DatasetFormat::Ucr,
            train_path: None,
            test_path: None,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { k: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    /// `null` selects `ceil(0.10 × training steps)`.
    pub tau_drop: Option<u32>,
    pub tau_promote: i64,
    pub tau_remove: i64,
    pub top_n: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        let lifecycle = LifecycleThresholds::default();
        Self {
            tau_drop: None,
            tau_promote: lifecycle.promote,
            tau_remove: lifecycle.remove,
            top_n: DEFAULT_TOP_N,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub kind: ClientKind,
    /// JSON-lines script for the scripted client.
    pub script: Option<PathBuf>,
    pub remote: RemoteConfig,
    pub temperature: f64,
    pub r_schema: u32,
    pub budgets: RoleBudgets,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            kind: ClientKind::Scripted,
            script: None,
            remote: RemoteConfig::default(),
            temperature: crate::vlm::DEFAULT_TEMPERATURE,
            r_schema: crate::vlm::DEFAULT_SCHEMA_RETRIES,
            budgets: RoleBudgets::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Directory of template files overriding the built-in prompts.
    pub templates_dir: Option<PathBuf>,
    pub enrich_inter_class: bool,
    pub stages: Stages,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/latest"),
            templates_dir: None,
            enrich_inter_class: false,
            stages: Stages::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub thresholds: ThresholdConfig,
    pub plot: PlotConfig,
    pub client: ClientConfig,
    pub run: RunOptions,
}

fn parse_override(item: &str) -> std::result::Result<(Vec<&str>, Value), ConfigError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("override {item:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Invalid(format!("bad override key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

impl Config {
    pub fn from_json(text: &str) -> std::result::Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> std::result::Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        fix(&mut self.dataset.train_path);
        fix(&mut self.dataset.test_path);
        fix(&mut self.dataset.dir);
        fix(&mut self.client.script);
        fix(&mut self.run.templates_dir);
        if self.run.out_dir.is_relative() {
            self.run.out_dir = base.join(&self.run.out_dir);
        }
    }

    /// Applies `section.key=value` overrides. Values parse as JSON when
    /// possible and as plain strings otherwise. Unknown keys are rejected.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> std::result::Result<(), ConfigError> {
        let mut doc = serde_json::to_value(&*self)?;
        for item in overrides {
            let (path, value) = parse_override(item.as_ref())?;
            let mut node = &mut doc;
            for (i, part) in path.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| ConfigError::UnknownKey(path[..=i].join(".")))?;
                node = obj
                    .get_mut(*part)
                    .ok_or_else(|| ConfigError::UnknownKey(path[..=i].join(".")))?;
            }
            *node = value;
        }
        *self = serde_json::from_value(doc)?;
        Ok(())
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        self.run_config().validate().map_err(ConfigError::Invalid)?;
        match self.dataset.format {
            DatasetFormat::Ucr | DatasetFormat::Json => {
                if self.dataset.train_path.is_none() || self.dataset.test_path.is_none() {
                    return Err(ConfigError::Invalid(
                        "dataset.train_path and dataset.test_path are required".into(),
                    ));
                }
            }
            DatasetFormat::Multivariate => {
                if self.dataset.dir.is_none() || self.dataset.name.is_empty() {
                    return Err(ConfigError::Invalid(
                        "dataset.dir and dataset.name are required for multivariate data".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            k: self.split.k,
            seed: self.split.seed,
            tau_drop: self.thresholds.tau_drop,
            lifecycle: LifecycleThresholds {
                promote: self.thresholds.tau_promote,
                remove: self.thresholds.tau_remove,
            },
            top_n: self.thresholds.top_n,
            plot: self.plot.clone(),
            temperature: self.client.temperature,
            r_schema: self.client.r_schema,
            budgets: self.client.budgets,
            enrich_inter_class: self.run.enrich_inter_class,
            stages: self.run.stages,
        }
    }

    /// Loads the archive train and test splits.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let required = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| ConfigError::Invalid(format!("dataset.{key} is required")))
        };
        let (mut train, mut test) = match d.format {
            DatasetFormat::Ucr => (
                load_ucr_tsv(&required(&d.train_path, "train_path")?, &d.name, &d.description)?,
                load_ucr_tsv(&required(&d.test_path, "test_path")?, &d.name, &d.description)?,
            ),
            DatasetFormat::Multivariate => {
                let dir = required(&d.dir, "dir")?;
                (
                    load_multivariate(&dir, &d.name, "TRAIN", &d.description)?,
                    load_multivariate(&dir, &d.name, "TEST", &d.description)?,
                )
            }
            DatasetFormat::Json => {
                let read = |p: PathBuf| -> Result<Dataset> {
                    let text = std::fs::read_to_string(&p).map_err(crate::error::io_err(&p))?;
                    Ok(Dataset::from_json(&text)?)
                };
                (
                    read(required(&d.train_path, "train_path")?)?,
                    read(required(&d.test_path, "test_path")?)?,
                )
            }
        };
        for ds in [&mut train, &mut test] {
            if !d.name.is_empty() {
                ds.name = d.name.clone();
            }
            if !d.description.is_empty() {
                ds.description = d.description.clone();
            }
        }
        Ok((train, test))
    }
}
