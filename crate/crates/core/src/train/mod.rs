//! Deterministic single-threaded training loop shared by every objective.
//!
//! A run is a pure function of its configuration, dataset, task and initial
//! parameters. Minibatch order comes from a per-epoch permutation seeded by
//! `(seed, epoch)`; timestep and noise draws come from one ChaCha8 stream
//! whose exact position is stored in checkpoints, so an interrupted run can
//! be resumed bit-identically.

mod adam;
mod checkpoint;

pub use adam::{adam_step, cosine_lr, AdamHyper, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState, CHECKPOINT_MAGIC,
    CHECKPOINT_SCHEMA_VERSION,
};

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::{DenoiserParams, DiffusionError, ReferenceHandle, Schedule};
use crate::metrics::{evaluate, Baseline, EvalConfig, MetricsError, MetricsReport};
use crate::ndgrad::{GradError, Tape};
use crate::objectives::{
    objective, NoiseDraw, ObjectiveConfig, ObjectiveError, ObjectiveKind, PairBatch,
    PairLossBreakdown,
};
use crate::parallel::derive_seed;
use crate::tasks::{Dataset, TaskSpec};

const NOISE_STREAM: u64 = 1;
const EPOCH_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset was generated for a different task")]
    TaskMismatch,
    #[error("checkpoint belongs to a different configuration or dataset")]
    FingerprintMismatch,
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite {
        step: usize,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Final learning rate of the cosine decay, as a fraction of `lr`.
    #[serde(default = "default_min_lr_fraction")]
    pub min_lr_fraction: f64,
    #[serde(default)]
    pub adam: AdamHyper,
    #[serde(default)]
    pub seed: u64,
    /// Rescale gradients whose norm exceeds this value. Off by default.
    #[serde(default)]
    pub clip_grad: Option<f64>,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    /// Also write the checkpoint every this many steps (0 writes only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Record wall-clock times in logs; disable for byte-reproducible outputs.
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

fn default_steps() -> usize {
    2000
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-3
}

fn default_min_lr_fraction() -> f64 {
    0.1
}

fn default_eval_samples() -> usize {
    256
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(objective: ObjectiveConfig) -> Self {
        TrainConfig {
            objective,
            steps: default_steps(),
            batch_size: default_batch(),
            lr: default_lr(),
            min_lr_fraction: default_min_lr_fraction(),
            adam: AdamHyper::default(),
            seed: 0,
            clip_grad: None,
            eval_every: 0,
            eval_samples: default_eval_samples(),
            checkpoint_path: None,
            checkpoint_every: 0,
            record_timing: true,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.objective.validate()?;
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return bad("min_lr_fraction must lie in [0, 1]".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return bad("clip_grad must be positive".into());
            }
        }
        if self.eval_every > 0 && self.eval_samples < crate::metrics::MIN_EVAL_SAMPLES {
            return bad(format!(
                "eval_samples must be at least {}",
                crate::metrics::MIN_EVAL_SAMPLES
            ));
        }
        Ok(())
    }

    /// Hash of every field that influences the parameter trajectory, together with the dataset identity.
    pub fn fingerprint(&self, dataset: &Dataset) -> [u8; 32] {
        let mut core = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = core.as_object_mut() {
            for key in [
                "eval_every",
                "eval_samples",
                "checkpoint_path",
                "checkpoint_every",
                "record_timing",
            ] {
                map.remove(key);
            }
        }
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&core).expect("value serializes"));
        h.update(dataset.header.task_fingerprint);
        h.update(dataset.header.seed.to_le_bytes());
        h.update(dataset.header.count.to_le_bytes());
        h.finalize().into()
    }
}

/// Column order of the step log CSV.
pub const STEP_LOG_COLUMNS: [&str; 10] = [
    "step",
    "lr",
    "total",
    "mse_w",
    "mse_l",
    "margin",
    "phi_w",
    "phi_l",
    "grad_norm",
    "wall_time_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based index of the completed update.
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub mse_w: f64,
    pub mse_l: f64,
    pub margin: f64,
    pub phi_w: f64,
    pub phi_l: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    /// Seconds spent in this step (0 when timing is disabled).
    pub wall_time_s: f64,
}

impl StepLog {
    pub fn breakdown(&self) -> PairLossBreakdown {
        PairLossBreakdown {
            total: self.total,
            mse_w: self.mse_w,
            mse_l: self.mse_l,
            margin: self.margin,
            phi_w: self.phi_w,
            phi_l: self.phi_l,
        }
    }
}

/// Writes step logs as CSV with [`STEP_LOG_COLUMNS`].
pub fn write_step_logs<W: std::io::Write>(out: W, logs: &[StepLog]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for log in logs {
        w.serialize(log)?;
    }
    if logs.is_empty() {
        w.write_record(STEP_LOG_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<StepLog>,
    pub reports: Vec<(usize, MetricsReport)>,
}

/// Mutable state of one run.
pub struct Trainer<'a> {
    config: TrainConfig,
    schedule: &'a Schedule,
    dataset: &'a Dataset,
    task: &'a TaskSpec,
    params: DenoiserParams,
    adam: AdamState,
    step: usize,
    rng: ChaCha8Rng,
    anchor: ReferenceHandle,
    fingerprint: [u8; 32],
    epoch_order: Option<(usize, Vec<usize>)>,
    logs: Vec<StepLog>,
    reports: Vec<(usize, MetricsReport)>,
}

impl<'a> Trainer<'a> {
    /// Starts a run. The initial parameters are frozen as the anchor at step 0:
    /// DPO uses it as its reference and evaluation compares against it.
    pub fn new(
        config: TrainConfig,
        schedule: &'a Schedule,
        dataset: &'a Dataset,
        task: &'a TaskSpec,
        init: DenoiserParams,
    ) -> Result<Self, TrainError> {
        Self::check_inputs(&config, dataset, task, &init)?;
        let fingerprint = config.fingerprint(dataset);
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[NOISE_STREAM])),
            adam: AdamState::zeros_like(init.buffers()),
            anchor: ReferenceHandle::snapshot(&init),
            params: init,
            step: 0,
            fingerprint,
            config,
            schedule,
            dataset,
            task,
            epoch_order: None,
            logs: Vec::new(),
            reports: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint written under the same configuration and dataset.
    pub fn resume(
        config: TrainConfig,
        schedule: &'a Schedule,
        dataset: &'a Dataset,
        task: &'a TaskSpec,
        checkpoint: Checkpoint,
    ) -> Result<Self, TrainError> {
        Self::check_inputs(&config, dataset, task, &checkpoint.params)?;
        let fingerprint = config.fingerprint(dataset);
        if checkpoint.config_fingerprint != fingerprint
            || checkpoint.schedule_kind != schedule.kind()
            || checkpoint.timesteps as usize != schedule.timesteps()
        {
            return Err(TrainError::FingerprintMismatch);
        }
        let anchor = checkpoint.anchor.ok_or_else(|| {
            TrainError::InvalidConfig("checkpoint has no anchor parameters to resume from".into())
        })?;
        if !checkpoint.adam.matches(checkpoint.params.buffers()) {
            return Err(TrainError::InvalidConfig(
                "optimizer state does not match parameters".into(),
            ));
        }
        Ok(Trainer {
            rng: checkpoint.rng.restore(),
            adam: checkpoint.adam,
            anchor: ReferenceHandle::snapshot(&anchor),
            params: checkpoint.params,
            step: checkpoint.step as usize,
            fingerprint,
            config,
            schedule,
            dataset,
            task,
            epoch_order: None,
            logs: Vec::new(),
            reports: Vec::new(),
        })
    }

    fn check_inputs(
        config: &TrainConfig,
        dataset: &Dataset,
        task: &TaskSpec,
        params: &DenoiserParams,
    ) -> Result<(), TrainError> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(TrainError::InvalidConfig("dataset is empty".into()));
        }
        if !dataset.matches(task) {
            return Err(TrainError::TaskMismatch);
        }
        let arch = params.arch();
        if arch.data_dim != task.dim || arch.cond_dim != task.cond_dim {
            return Err(TrainError::InvalidConfig(format!(
                "model expects data/cond dims {}/{}, task has {}/{}",
                arch.data_dim, arch.cond_dim, task.dim, task.cond_dim
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn anchor(&self) -> &ReferenceHandle {
        &self.anchor
    }

    pub fn logs(&self) -> &[StepLog] {
        &self.logs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step as u64,
            schedule_kind: self.schedule.kind(),
            timesteps: self.schedule.timesteps() as u32,
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
            config_fingerprint: self.fingerprint,
            anchor: Some(self.anchor.params().clone()),
        }
    }

    /// Dataset indices of the minibatch for the current step: position
    /// `step * B + j` of the concatenation of per-epoch permutations.
    fn batch_indices(&mut self) -> Vec<usize> {
        let n = self.dataset.len();
        let b = self.config.batch_size;
        let mut out = Vec::with_capacity(b);
        for j in 0..b {
            let pos = self.step * b + j;
            let (epoch, within) = (pos / n, pos % n);
            if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[EPOCH_STREAM, epoch as u64]));
                order.shuffle(&mut rng);
                self.epoch_order = Some((epoch, order));
            }
            out.push(self.epoch_order.as_ref().unwrap().1[within]);
        }
        out
    }

    /// Performs one update and returns its log entry.
    pub fn train_step(&mut self) -> Result<StepLog, TrainError> {
        let start = Instant::now();
        let snapshot = (self.rng.clone(), self.epoch_order.clone());
        let indices = self.batch_indices();
        let triples: Vec<_> = indices.iter().map(|&i| &self.dataset.records[i]).collect();
        let batch = PairBatch::new(&triples)?;
        let cfg = &self.config.objective;
        let noise = NoiseDraw::sample(
            &mut self.rng,
            self.schedule,
            batch.len(),
            batch.data_dim(),
            cfg.share_noise,
        )?;
        let tape = Tape::new();
        let net = self.params.track(&tape);
        let reference = (cfg.kind == ObjectiveKind::Dpo).then_some(&self.anchor);
        let evaluated = objective(&net, reference, self.schedule, &batch, &noise, cfg).and_then(
            |out| {
                let grads = out.loss.backward().map_err(ObjectiveError::from)?;
                Ok((out, grads))
            },
        );
        let blown_up = matches!(&evaluated, Err(e) if is_numeric_blowup(e));
        let (out, grads) = match evaluated {
            Ok(v) => v,
            Err(_) if blown_up => {
                self.rng = snapshot.0;
                self.epoch_order = snapshot.1;
                return Err(TrainError::NonFinite {
                    step: self.step + 1,
                    last_good: Box::new(self.checkpoint()),
                });
            }
            Err(e) => return Err(e.into()),
        };
        let grad_norm = grads.norm();
        if !out.breakdown.is_finite() || !grad_norm.is_finite() {
            self.rng = snapshot.0;
            self.epoch_order = snapshot.1;
            return Err(TrainError::NonFinite {
                step: self.step + 1,
                last_good: Box::new(self.checkpoint()),
            });
        }
        let mut grads = grads.into_vecs();
        if let Some(limit) = self.config.clip_grad {
            if grad_norm > limit {
                let scale = limit / grad_norm;
                grads.iter_mut().flatten().for_each(|g| *g *= scale);
            }
        }
        let lr = cosine_lr(
            self.config.lr,
            self.config.min_lr_fraction,
            self.step,
            self.config.steps,
        );
        let before = self.adam.clone();
        let mut updated = self.params.clone();
        adam_step(updated.buffers_mut(), &grads, &mut self.adam, lr, &self.config.adam);
        if !updated.is_finite() {
            self.adam = before;
            self.rng = snapshot.0;
            self.epoch_order = snapshot.1;
            return Err(TrainError::NonFinite {
                step: self.step + 1,
                last_good: Box::new(self.checkpoint()),
            });
        }
        self.params = updated;
        self.step += 1;
        let b = out.breakdown;
        let log = StepLog {
            step: self.step,
            lr,
            total: b.total,
            mse_w: b.mse_w,
            mse_l: b.mse_l,
            margin: b.margin,
            phi_w: b.phi_w,
            phi_l: b.phi_l,
            grad_norm,
            wall_time_s: if self.config.record_timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.logs.push(log);
        Ok(log)
    }

    /// Evaluates the current parameters against the anchor model.
    pub fn evaluate_now(&self) -> Result<MetricsReport, TrainError> {
        let eval = EvalConfig {
            n: self.config.eval_samples,
            seed: derive_seed(self.config.seed, &[EVAL_STREAM]),
            record_timing: self.config.record_timing,
        };
        Ok(evaluate(
            &self.params,
            self.schedule,
            self.task,
            &Baseline::Model(self.anchor.params()),
            eval,
        )?)
    }

    fn maybe_checkpoint(&self, force: bool) -> Result<(), TrainError> {
        if let Some(path) = &self.config.checkpoint_path {
            let every = self.config.checkpoint_every;
            if force || (every > 0 && self.step % every == 0) {
                save_checkpoint(path, &self.checkpoint())?;
            }
        }
        Ok(())
    }

    /// Runs until `step == target` (capped at the configured step count).
    pub fn run_until(&mut self, target: usize) -> Result<(), TrainError> {
        let target = target.min(self.config.steps);
        while self.step < target {
            if let Err(e) = self.train_step() {
                if let TrainError::NonFinite { last_good, .. } = &e {
                    if let Some(path) = &self.config.checkpoint_path {
                        save_checkpoint(path, last_good)?;
                    }
                }
                return Err(e);
            }
            let every = self.config.eval_every;
            if every > 0 && self.step % every == 0 {
                let report = self.evaluate_now()?;
                self.reports.push((self.step, report));
            }
            self.maybe_checkpoint(false)?;
        }
        Ok(())
    }

    /// Runs the remaining steps and writes the final checkpoint if a path is configured.
    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        self.run_until(self.config.steps)?;
        self.maybe_checkpoint(true)?;
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            logs: self.logs,
            reports: self.reports,
        })
    }
}

/// Domain errors raised while evaluating a step mean the parameters produced
/// non-finite intermediates, which is the same failure as a NaN loss.
fn is_numeric_blowup(e: &ObjectiveError) -> bool {
    matches!(
        e,
        ObjectiveError::Domain { .. }
            | ObjectiveError::Grad(GradError::Domain { .. })
            | ObjectiveError::Diffusion(DiffusionError::Grad(GradError::Domain { .. }))
    )
}

/// Trains `init` on `dataset` for `config.steps` updates.
pub fn train(
    config: &TrainConfig,
    schedule: &Schedule,
    dataset: &Dataset,
    task: &TaskSpec,
    init: DenoiserParams,
) -> Result<TrainOutcome, TrainError> {
    Trainer::new(config.clone(), schedule, dataset, task, init)?.run()
}
