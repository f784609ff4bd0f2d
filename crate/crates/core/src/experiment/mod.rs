//! Experiment driver: base-model pretraining, cartesian sweeps over objectives and
//! task settings, the results table and its summary plots.

mod config;
mod plot;
mod report;
mod results;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::diffusion::{DenoiserParams, DiffusionError, OutputInit, Schedule};
use crate::metrics::{evaluate, Baseline, EvalConfig, MetricsError, MetricsReport};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::parallel::derive_seed;
use crate::tasks::{
    save_dataset, synthesize_preferences, Dataset, DatasetError, RejectedSource, SynthesisOptions,
    TaskError, TaskSpec,
};
use crate::train::{
    save_checkpoint, train, write_step_logs, Checkpoint, CheckpointError, TrainError,
    TrainOutcome,
};

pub use config::{
    base_task, default_beta_for_level, task_for_level, DataConfig, EvalSettings, ExperimentConfig,
    ModelConfig, PretrainConfig, RejectedFrom, SweepAxes, TaskConfig,
};
pub use plot::{LinePlot, Series};
pub use report::{gap_by_level, median, score_by_dataset_size, summarize, Report, SummaryRow};
pub use results::{read_results, write_results, CellStatus, ResultRow, RESULT_COLUMNS};

const PRETRAIN_DATA_STREAM: u64 = 11;
const INIT_STREAM: u64 = 12;
const PREFERENCE_DATA_STREAM: u64 = 13;
const EVAL_STREAM: u64 = 14;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("results table: {0}")]
    Results(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pretrains the base model for `seed` with SFT on fresh draws of the base mixture.
/// Its distribution plays the role of the reference every alignment run starts from.
pub fn pretrain_base(
    cfg: &ExperimentConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<TrainOutcome, ExperimentError> {
    let task = base_task();
    let data = pretraining_data(cfg, seed)?;
    let init = DenoiserParams::init(
        cfg.model.architecture(&task),
        derive_seed(seed, &[INIT_STREAM]),
        OutputInit::Zero,
    );
    Ok(train(&cfg.pretrain_train_config(seed), schedule, &data, &task, init)?)
}

/// The dataset `pretrain_base` trains on: chosen samples are base-mixture draws.
pub fn pretraining_data(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset, ExperimentError> {
    Ok(synthesize_preferences(
        &base_task(),
        &RejectedSource::BaseMixture,
        cfg.pretrain.dataset_size,
        derive_seed(seed, &[PRETRAIN_DATA_STREAM]),
        SynthesisOptions {
            min_reward_margin: None,
            max_rounds: 1,
        },
    )?)
}

/// Preference data for one task, size and seed. Identical for every objective and
/// temperature sharing those three, so objectives are compared on the same pairs.
/// `base` is required when rejected samples come from the model.
pub fn preference_data(
    cfg: &ExperimentConfig,
    task: &TaskSpec,
    base: Option<&DenoiserParams>,
    schedule: &Schedule,
    size: usize,
    seed: u64,
) -> Result<Dataset, ExperimentError> {
    let source = match (cfg.data.rejected, base) {
        (RejectedFrom::Model, Some(params)) => RejectedSource::Model { params, schedule },
        (RejectedFrom::Model, None) => {
            return Err(ExperimentError::Config(
                "data.rejected = model needs a base model to generate rejected samples".into(),
            ))
        }
        (RejectedFrom::Mixture, _) => RejectedSource::BaseMixture,
    };
    let data_seed = derive_seed(
        seed,
        &[PREFERENCE_DATA_STREAM, task.mismatch_level.to_bits(), size as u64],
    );
    Ok(synthesize_preferences(
        task,
        &source,
        size,
        data_seed,
        cfg.data.synthesis_options(),
    )?)
}

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub id: String,
    pub objective: ObjectiveKind,
    /// Temperature of the objective: β for MaPO, β_dpo for DPO, 0 for SFT.
    pub beta: f64,
    pub mismatch_level: f64,
    pub dataset_size: usize,
    pub seed: u64,
}

impl CellSpec {
    pub fn objective_config(&self, base: &ObjectiveConfig) -> ObjectiveConfig {
        let mut o = base.clone();
        o.kind = self.objective;
        match self.objective {
            ObjectiveKind::Mapo => o.beta = self.beta,
            ObjectiveKind::Dpo => o.beta_dpo = self.beta,
            ObjectiveKind::Sft => {}
        }
        o
    }
}

fn axis<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

/// Expands the sweep axes into cells. The beta axis only applies to MaPO; DPO
/// cells use `train.objective.beta_dpo` and SFT has no temperature.
pub fn expand_cells(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let s = &cfg.sweep;
    let objectives = axis(&s.objective, cfg.train.objective.kind);
    let levels = axis(&s.mismatch_level, cfg.task.level());
    let sizes = axis(&s.dataset_size, cfg.data.size);
    let seeds = axis(&s.seed, cfg.train.seed);
    let mut cells = Vec::new();
    for &seed in &seeds {
        for &level in &levels {
            for &size in &sizes {
                for &objective in &objectives {
                    let betas = match objective {
                        ObjectiveKind::Mapo if !s.beta.is_empty() => s.beta.clone(),
                        ObjectiveKind::Mapo if s.preset_beta => vec![default_beta_for_level(level)],
                        ObjectiveKind::Mapo => vec![cfg.train.objective.beta],
                        ObjectiveKind::Dpo => vec![cfg.train.objective.beta_dpo],
                        ObjectiveKind::Sft => vec![0.0],
                    };
                    for beta in betas {
                        cells.push(CellSpec {
                            id: format!("cell-{:04}", cells.len()),
                            objective,
                            beta,
                            mismatch_level: level,
                            dataset_size: size,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cells
}

/// Evaluation settings for a cell with seed `seed`.
pub fn eval_config(cfg: &ExperimentConfig, seed: u64) -> EvalConfig {
    EvalConfig {
        n: cfg.eval.samples,
        seed: derive_seed(cfg.eval.seed, &[EVAL_STREAM, seed]),
        record_timing: cfg.train.record_timing,
    }
}

/// Trains and evaluates one cell starting from `base`. With `out_dir` the cell's
/// dataset, checkpoint, step log and metrics are written there.
pub fn run_cell(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    base: &DenoiserParams,
    schedule: &Schedule,
    out_dir: Option<&Path>,
) -> Result<MetricsReport, ExperimentError> {
    let task = task_for_level(cfg.task.preset, cell.mismatch_level);
    let data = preference_data(cfg, &task, Some(base), schedule, cell.dataset_size, cell.seed)?;
    let mut tc = cfg.train.clone();
    tc.objective = cell.objective_config(&cfg.train.objective);
    tc.seed = cell.seed;
    tc.checkpoint_path = None;
    tc.eval_every = 0;
    let out = train(&tc, schedule, &data, &task, base.clone())?;
    let report = evaluate(
        &out.checkpoint.params,
        schedule,
        &task,
        &Baseline::Model(base),
        eval_config(cfg, cell.seed),
    )?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_dataset(&dir.join("dataset.bin"), &data)?;
        save_checkpoint(&dir.join("checkpoint.ckpt"), &out.checkpoint)?;
        let log_path = dir.join("steps.csv");
        let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        write_step_logs(file, &out.logs)?;
        let metrics_path = dir.join("metrics.json");
        fs::write(&metrics_path, report.to_json()?).map_err(io_err(&metrics_path))?;
    }
    Ok(report)
}

/// Runs every cell of the sweep with up to `jobs` cells in flight. Base models are
/// pretrained once per seed. A failing cell is recorded with its status and the
/// sweep carries on. Rows come back in cell order regardless of scheduling.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<ResultRow>, ExperimentError> {
    cfg.validate()?;
    let schedule = cfg.model.schedule()?;
    let cells = expand_cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(format!("cannot start worker pool: {e}")))?;

    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let bases: Vec<(u64, Result<Checkpoint, String>)> = pool.install(|| {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&s| {
                let base = pretrain_base(cfg, &schedule, s)
                    .map(|out| out.checkpoint)
                    .map_err(|e| e.to_string());
                (s, base)
            })
            .collect()
    });
    if let Some(dir) = out_dir {
        for (seed, base) in &bases {
            if let Ok(ck) = base {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                save_checkpoint(&dir.join(format!("base-seed{seed}.ckpt")), ck)?;
            }
        }
    }

    let rows = pool.install(|| {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|cell| {
                let base = &bases
                    .iter()
                    .find(|(s, _)| *s == cell.seed)
                    .expect("every seed was pretrained")
                    .1;
                let outcome = match base {
                    Ok(ck) => {
                        let dir = out_dir.map(|d| d.join(&cell.id));
                        run_cell(cfg, cell, &ck.params, &schedule, dir.as_deref())
                            .map_err(|e| CellStatus::from_error(&e))
                    }
                    Err(msg) => Err(CellStatus::Failed(format!("pretraining failed: {msg}"))),
                };
                ResultRow::new(cell, outcome)
            })
            .collect::<Vec<_>>()
    });
    Ok(rows)
}
