//! Experiment configuration: one TOML file per run.
//!
//! A file only needs the keys it changes. It is merged onto the defaults of
//! its `task`, so `eta` and `normalize_head` follow the task unless set.

use std::path::{Path, PathBuf};

use mbj::data::RetrievalBenchmarkConfig;
use mbj::train::{Schedule, Task, TraceSpec, Variant};
use mbj::{MbjError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub variant: Variant,
    /// Run directory; every artifact lands here.
    pub output: PathBuf,
    /// Directory holding real datasets; falls back to `MBJ_DATA_ROOT`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub schedule: Schedule,
    pub jitter: JitterConfig,
}

pub const DATA_ROOT_VAR: &str = "MBJ_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Retrieval(RetrievalSpec),
    Cifar(CifarSpec),
}

/// Gaussian clusters standing in for image embeddings.
///
/// Class sizes come from `counts` if given, otherwise `max_count` shrunk by
/// `imbalance_ratio` (exponential profile) or kept flat; `reduced_class` then
/// cuts one class to `reduced_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub max_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imbalance_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_class: Option<usize>,
    pub reduced_count: usize,
    pub test_per_class: usize,
    /// Within-class spread relative to the unit-norm class centers.
    pub scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            dim: 16,
            max_count: 1000,
            imbalance_ratio: None,
            counts: None,
            reduced_class: Some(9),
            reduced_count: 50,
            test_per_class: 200,
            scale: 0.35,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSpec {
    pub seed: u64,
    pub benchmark: RetrievalBenchmarkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CifarSpec {
    /// 10 or 100.
    pub classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imbalance_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_class: Option<usize>,
    pub reduced_count: usize,
    /// Seed for choosing which images survive subsetting.
    pub subset_seed: u64,
}

impl Default for CifarSpec {
    fn default() -> Self {
        CifarSpec {
            classes: 10,
            imbalance_ratio: Some(100.0),
            reduced_class: None,
            reduced_count: 50,
            subset_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Mlp,
    Resnet32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: Backbone,
    /// MLP only.
    pub hidden_dim: usize,
    /// MLP only; ResNet-32 embeds into 64 dimensions.
    pub embedding_dim: usize,
    /// Cosine head; on for metric learning.
    pub normalize_head: bool,
}

/// Which vectors to trace and when.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    /// Training rows whose feature is traced.
    pub samples: Vec<usize>,
    /// Classes whose prototype is traced.
    pub prototypes: Vec<usize>,
    /// Epochs of continued conventional training after phase 1 during which
    /// traces are recorded; 0 skips the observation.
    pub observe_epochs: usize,
    /// Also trace during phase 2.
    pub phase2: bool,
}

impl JitterConfig {
    pub fn spec(&self) -> TraceSpec {
        TraceSpec {
            samples: self.samples.clone(),
            prototypes: self.prototypes.clone(),
            ..TraceSpec::default()
        }
    }
}

impl ExperimentConfig {
    pub fn default_for(task: Task) -> Self {
        let dataset = match task {
            Task::Classification => DatasetSpec::Synthetic(SyntheticSpec::default()),
            Task::MetricLearning => DatasetSpec::Retrieval(RetrievalSpec::default()),
        };
        ExperimentConfig {
            task,
            variant: Variant::Mbj,
            output: PathBuf::from("runs").join(task.name()),
            data_root: None,
            dataset,
            model: ModelSpec {
                backbone: Backbone::Mlp,
                hidden_dim: 64,
                embedding_dim: 32,
                normalize_head: task == Task::MetricLearning,
            },
            schedule: Schedule::for_task(task),
            jitter: JitterConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| MbjError::Config(e.to_string()))?;
        let task = match user.get("task") {
            None => Task::Classification,
            Some(v) => v
                .as_str()
                .ok_or_else(|| MbjError::Config("`task` must be a string".into()))?
                .parse()?,
        };
        let defaults = toml::Table::try_from(Self::default_for(task)).expect("defaults serialize");
        let merged = merge(defaults, user);
        let config: Self = merged.try_into().map_err(|e: toml::de::Error| MbjError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MbjError::Io {
            path: path.into(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            MbjError::Config(msg) => MbjError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| MbjError::Io {
            path: path.into(),
            source: e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        match (&self.dataset, self.task) {
            (DatasetSpec::Retrieval(_), Task::Classification) => {
                return Err(MbjError::Config(
                    "the retrieval benchmark has disjoint test identities; use task = \"metric-learning\"".into(),
                ))
            }
            (DatasetSpec::Cifar(c), _) if c.classes != 10 && c.classes != 100 => {
                return Err(MbjError::Config(format!("dataset.cifar.classes must be 10 or 100, got {}", c.classes)))
            }
            _ => {}
        }
        if self.model.backbone == Backbone::Resnet32 && !matches!(self.dataset, DatasetSpec::Cifar(_)) {
            return Err(MbjError::Config("backbone resnet32 needs image inputs (dataset.cifar)".into()));
        }
        Ok(())
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        self.data_root.clone().or_else(|| std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from))
    }
}

/// Overlays `user` on `base`. Sub-tables merge key by key, except `dataset`,
/// whose single key picks the source and is taken whole.
fn merge(mut base: toml::Table, user: toml::Table) -> toml::Table {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if key != "dataset" => {
                let merged = merge(std::mem::take(b), u);
                *b = merged;
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
    base
}
