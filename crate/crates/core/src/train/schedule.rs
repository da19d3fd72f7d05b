use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MbjError, Result};
use crate::loss::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    MetricLearning,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::MetricLearning => "metric-learning",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = MbjError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "metric-learning" => Ok(Task::MetricLearning),
            other => Err(MbjError::Config(format!(
                "unknown task `{other}` (expected classification or metric-learning)"
            ))),
        }
    }
}

/// Phase-2 training variant.
///
/// `Mbj` resolves to the task's preferred memory: features for
/// classification, prototypes for metric learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Baseline,
    Mbj,
    Rr,
    Fr,
    FrRj,
    MbjW,
    MbjF,
    MbjWf,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::Mbj,
        Variant::Rr,
        Variant::Fr,
        Variant::FrRj,
        Variant::MbjW,
        Variant::MbjF,
        Variant::MbjWf,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Mbj => "mbj",
            Variant::Rr => "rr",
            Variant::Fr => "fr",
            Variant::FrRj => "fr+rj",
            Variant::MbjW => "mbj-w",
            Variant::MbjF => "mbj-f",
            Variant::MbjWf => "mbj-wf",
        }
    }

    /// `(feature memory, prototype memory)` used by this variant on `task`.
    pub fn memories(self, task: Task) -> (bool, bool) {
        match (self, task) {
            (Variant::Mbj, Task::Classification) | (Variant::MbjF, _) => (true, false),
            (Variant::Mbj, Task::MetricLearning) | (Variant::MbjW, _) => (false, true),
            (Variant::MbjWf, _) => (true, true),
            _ => (false, false),
        }
    }

    pub fn uses_bank(self, task: Task) -> bool {
        let (f, p) = self.memories(task);
        f || p
    }

    /// Whether phase 2 over-samples batch features instead of keeping a bank.
    pub fn duplicates_features(self) -> bool {
        matches!(self, Variant::Fr | Variant::FrRj)
    }

    pub fn class_balanced_loader(self) -> bool {
        self == Variant::Rr
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = MbjError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == lower)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.id()).collect();
                MbjError::Config(format!("unknown variant `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

impl TryFrom<String> for Variant {
    type Error = MbjError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.id().to_string()
    }
}

/// Two-phase optimization schedule.
///
/// Phase 1 runs a fixed epoch budget with step decay at `lr_milestones`;
/// phase 2 runs at a constant small rate, by default a tenth of the final
/// phase-1 rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_lr: Option<f64>,
    /// Phase-1 epochs at which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub beta: f64,
    /// Bank capacity; `None` means five slots per class.
    pub memory_capacity: Option<usize>,
    /// Noise scale for FR+RJ; `None` means 0.1x the batch's mean feature norm.
    pub jitter_sigma: Option<f64>,
    /// Random 4-pixel-padded crops and horizontal flips for image inputs.
    pub augment: bool,
}

pub type ClsSchedule = Schedule;
pub type DmlSchedule = Schedule;

impl Schedule {
    pub fn for_task(task: Task) -> Self {
        let loss = match task {
            Task::Classification => LossConfig::classification(),
            Task::MetricLearning => LossConfig::metric_learning(),
        };
        Schedule {
            phase1_epochs: 200,
            phase2_epochs: 20,
            phase1_lr: 0.1,
            phase2_lr: None,
            lr_milestones: vec![160, 180],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 128,
            seed: 0,
            loss,
            beta: 1.5,
            memory_capacity: None,
            jitter_sigma: None,
            augment: true,
        }
    }

    pub fn classification() -> Self {
        Self::for_task(Task::Classification)
    }

    pub fn metric_learning() -> Self {
        Self::for_task(Task::MetricLearning)
    }

    pub fn phase1_lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.phase1_lr * self.lr_decay.powi(decays as i32)
    }

    pub fn final_phase1_lr(&self) -> f64 {
        self.phase1_lr_at(self.phase1_epochs.saturating_sub(1))
    }

    pub fn resolved_phase2_lr(&self) -> f64 {
        self.phase2_lr.unwrap_or(0.1 * self.final_phase1_lr())
    }

    pub fn capacity(&self, class_count: usize) -> usize {
        self.memory_capacity.unwrap_or(5 * class_count)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(MbjError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("phase1_lr", self.phase1_lr)?;
        positive("phase2_lr", self.resolved_phase2_lr())?;
        positive("lr_decay", self.lr_decay)?;
        if self.resolved_phase2_lr() >= self.phase1_lr {
            return Err(MbjError::Config(format!(
                "phase2_lr ({}) must be smaller than phase1_lr ({})",
                self.resolved_phase2_lr(),
                self.phase1_lr
            )));
        }
        if self.batch_size < 2 {
            return Err(MbjError::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MbjError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(MbjError::Config("weight_decay must be >= 0".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(MbjError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.memory_capacity == Some(0) {
            return Err(MbjError::Config("memory_capacity must be positive".into()));
        }
        if let Some(s) = self.jitter_sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(MbjError::Config(format!("jitter_sigma must be >= 0, got {s}")));
            }
        }
        self.loss.validate()
    }
}
