use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, Architecture, Schedule, ScheduleKind};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::tasks::{Preset, SynthesisOptions, TaskSpec};
use crate::train::TrainConfig;

use super::ExperimentError;

/// Which task to run: a named preset, or an explicit mismatch level on the ring task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default)]
    pub preset: Option<Preset>,
    /// Overrides the preset's level when both are given.
    #[serde(default)]
    pub mismatch_level: Option<f64>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            preset: Some(Preset::Style),
            mismatch_level: None,
        }
    }
}

impl TaskConfig {
    pub fn level(&self) -> f64 {
        self.mismatch_level
            .or(self.preset.map(Preset::mismatch_level))
            .unwrap_or(0.0)
    }

    pub fn resolve(&self) -> Result<TaskSpec, ExperimentError> {
        let level = self.level();
        if !(level >= 0.0 && level.is_finite()) {
            return Err(ExperimentError::Config(format!(
                "task.mismatch_level must be finite and non-negative, got {level}"
            )));
        }
        Ok(task_for_level(self.preset, level))
    }
}

/// Ring task at `level`, named after the preset when the level matches one.
pub fn task_for_level(preset: Option<Preset>, level: f64) -> TaskSpec {
    let preset = preset
        .filter(|p| p.mismatch_level() == level)
        .or_else(|| {
            Preset::ALIGNMENT
                .into_iter()
                .find(|p| p.mismatch_level() == level)
        });
    match preset {
        Some(p) => TaskSpec::ring(p.name(), level),
        None => TaskSpec::ring(&format!("ring-{level}"), level),
    }
}

/// The task used to pretrain base models: the shared base mixture with no shift.
pub fn base_task() -> TaskSpec {
    Preset::Gaussian.task()
}

/// Default margin temperature for a mismatch level, following the preset ordering.
pub fn default_beta_for_level(level: f64) -> f64 {
    Preset::ALIGNMENT
        .into_iter()
        .rev()
        .find(|p| level >= p.mismatch_level())
        .unwrap_or(Preset::Preference)
        .default_beta()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub schedule: ScheduleKind,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_timesteps() -> usize {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            schedule: ScheduleKind::Cosine,
            timesteps: default_timesteps(),
        }
    }
}

impl ModelConfig {
    pub fn schedule(&self) -> Result<Schedule, ExperimentError> {
        Ok(make_schedule(self.schedule, self.timesteps)?)
    }

    pub fn architecture(&self, task: &TaskSpec) -> Architecture {
        Architecture::new(task.dim, task.cond_dim, self.hidden.clone())
    }
}

/// SFT on fresh base-mixture draws, producing the reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_pretrain_size")]
    pub dataset_size: usize,
}

fn default_pretrain_steps() -> usize {
    2000
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-3
}

fn default_pretrain_size() -> usize {
    8192
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: default_pretrain_steps(),
            batch_size: default_batch(),
            lr: default_lr(),
            dataset_size: default_pretrain_size(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectedFrom {
    /// Generations of the base model.
    #[default]
    Model,
    /// Draws from the base mixture.
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_data_size")]
    pub size: usize,
    #[serde(default)]
    pub rejected: RejectedFrom,
    /// Keep only pairs whose chosen sample beats the rejected one by more than this; `null` disables.
    #[serde(default = "default_margin")]
    pub min_reward_margin: Option<f64>,
}

fn default_data_size() -> usize {
    1024
}

fn default_margin() -> Option<f64> {
    Some(0.0)
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            size: default_data_size(),
            rejected: RejectedFrom::Model,
            min_reward_margin: default_margin(),
        }
    }
}

impl DataConfig {
    pub fn synthesis_options(&self) -> SynthesisOptions {
        SynthesisOptions {
            min_reward_margin: self.min_reward_margin,
            ..SynthesisOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Generations per condition.
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
}

fn default_eval_samples() -> usize {
    1024
}

fn default_eval_seed() -> u64 {
    7
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            samples: default_eval_samples(),
            seed: default_eval_seed(),
        }
    }
}

/// Axes of the cartesian sweep. An empty axis contributes the single base value from the config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub objective: Vec<ObjectiveKind>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub mismatch_level: Vec<f64>,
    #[serde(default)]
    pub dataset_size: Vec<usize>,
    #[serde(default)]
    pub seed: Vec<u64>,
    /// With an empty beta axis, use the preset default for each mismatch level instead of `train.objective.beta`.
    #[serde(default)]
    pub preset_beta: bool,
}

/// One JSON document describing a whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub sweep: SweepAxes,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut train = TrainConfig::new(ObjectiveConfig::new(
            ObjectiveKind::Mapo,
            Preset::Style.default_beta(),
        ));
        train.record_timing = false;
        ExperimentConfig {
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            train,
            eval: EvalSettings::default(),
            sweep: SweepAxes::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        self.task.resolve()?;
        self.model.schedule()?;
        if self.model.hidden.iter().any(|&h| h == 0) {
            return bad("model.hidden widths must be positive");
        }
        self.train.validate()?;
        if self.pretrain.steps == 0 || self.pretrain.batch_size == 0 || self.pretrain.dataset_size == 0 {
            return bad("pretrain.steps, batch_size and dataset_size must be positive");
        }
        if !(self.pretrain.lr > 0.0) {
            return bad("pretrain.lr must be positive");
        }
        if self.data.size == 0 || self.sweep.dataset_size.contains(&0) {
            return bad("dataset sizes must be positive");
        }
        if self.eval.samples < crate::metrics::MIN_EVAL_SAMPLES {
            return bad("eval.samples must be at least 64");
        }
        if self.sweep.beta.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return bad("sweep.beta values must be positive");
        }
        if self
            .sweep
            .mismatch_level
            .iter()
            .any(|m| !(*m >= 0.0 && m.is_finite()))
        {
            return bad("sweep.mismatch_level values must be non-negative");
        }
        Ok(())
    }

    /// Training configuration used for pretraining the base model with `seed`.
    pub fn pretrain_train_config(&self, seed: u64) -> TrainConfig {
        let mut t = TrainConfig::new(ObjectiveConfig::new(ObjectiveKind::Sft, 1.0));
        t.steps = self.pretrain.steps;
        t.batch_size = self.pretrain.batch_size;
        t.lr = self.pretrain.lr;
        t.seed = seed;
        t.record_timing = self.train.record_timing;
        t
    }
}
