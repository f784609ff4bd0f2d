//! Synthetic conditional tasks with a controllable shift between the
//! pretraining distribution and the preferred one, and preference-pair
//! synthesis on top of them.

mod dataset;

pub use dataset::{
    load_dataset, load_dataset_json, save_dataset, save_dataset_json, Dataset, DatasetError,
    DatasetHeader, DATASET_MAGIC, DATASET_SCHEMA_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::{
    ancestral_sample_batch, optimal_gaussian_denoiser, DenoiserParams, DiffusionError,
    NoisePredictor, Schedule,
};
use crate::ndgrad::Tensor;
use crate::samples::SampleSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("condition {0:?} is not a one-hot vector over the task's classes")]
    UnknownCondition(Vec<f64>),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("sample count must be at least 1")]
    EmptyRequest,
    #[error("sampler diverged while generating pairs starting at index {index}: {source}")]
    SamplerDiverged {
        index: usize,
        #[source]
        source: DiffusionError,
    },
    #[error("only {kept} of {requested} pairs passed the reward filter after {rounds} rounds")]
    FilterExhausted {
        kept: usize,
        requested: usize,
        rounds: usize,
    },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// One isotropic Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Base,
    Target,
}

/// Class-conditional mixture pair. Class `k` (one-hot `c`) owns component `k`
/// of both mixtures; the target means are the base means moved by
/// `mismatch_level * std` along a per-class unit direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub dim: usize,
    pub cond_dim: usize,
    pub base_mixture: Vec<Component>,
    pub target_mixture: Vec<Component>,
    pub mismatch_level: f64,
}

/// Named presets ordered by mismatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// The pretraining distribution itself (no shift).
    Gaussian,
    Preference,
    Culture,
    Safety,
    Style,
    Personalization,
}

impl Preset {
    pub const ALIGNMENT: [Preset; 5] = [
        Preset::Preference,
        Preset::Culture,
        Preset::Safety,
        Preset::Style,
        Preset::Personalization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Gaussian => "gaussian",
            Preset::Preference => "preference",
            Preset::Culture => "culture",
            Preset::Safety => "safety",
            Preset::Style => "style",
            Preset::Personalization => "personalization",
        }
    }

    pub fn mismatch_level(self) -> f64 {
        match self {
            Preset::Gaussian | Preset::Preference => 0.0,
            Preset::Culture => 0.5,
            Preset::Safety => 1.0,
            Preset::Style => 2.0,
            Preset::Personalization => 4.0,
        }
    }

    /// Default margin temperature for the preset.
    pub fn default_beta(self) -> f64 {
        match self {
            Preset::Gaussian | Preset::Preference => 8.0,
            Preset::Culture => 32.0,
            Preset::Safety | Preset::Style => 64.0,
            Preset::Personalization => 1024.0,
        }
    }

    pub fn task(self) -> TaskSpec {
        TaskSpec::ring(self.name(), self.mismatch_level())
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Preset::Gaussian]
            .into_iter()
            .chain(Preset::ALIGNMENT)
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset `{s}`"))
    }
}

pub const RING_CLASSES: usize = 4;
pub const RING_RADIUS: f64 = 2.0;
pub const RING_STD: f64 = 0.5;

impl TaskSpec {
    /// Builds a task from a base mixture and one shift direction per component.
    pub fn shifted(
        name: impl Into<String>,
        base_mixture: Vec<Component>,
        directions: &[Vec<f64>],
        mismatch_level: f64,
    ) -> Result<Self, TaskError> {
        if !(mismatch_level >= 0.0) || !mismatch_level.is_finite() {
            return Err(TaskError::InvalidTask(format!(
                "mismatch level {mismatch_level} must be finite and non-negative"
            )));
        }
        if directions.len() != base_mixture.len() {
            return Err(TaskError::InvalidTask(
                "one shift direction per component is required".into(),
            ));
        }
        let target_mixture = base_mixture
            .iter()
            .zip(directions)
            .map(|(c, dir)| {
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mean = if mismatch_level == 0.0 || norm == 0.0 {
                    c.mean.clone()
                } else {
                    c.mean
                        .iter()
                        .zip(dir)
                        .map(|(m, d)| m + mismatch_level * c.std * d / norm)
                        .collect()
                };
                Component {
                    weight: c.weight,
                    mean,
                    std: c.std,
                }
            })
            .collect();
        let task = TaskSpec {
            name: name.into(),
            dim: base_mixture.first().map_or(0, |c| c.mean.len()),
            cond_dim: base_mixture.len(),
            base_mixture,
            target_mixture,
            mismatch_level,
        };
        task.validate()?;
        Ok(task)
    }

    /// Four classes on a circle of radius 2 with std 0.5, shifted tangentially.
    pub fn ring(name: &str, mismatch_level: f64) -> Self {
        let mut base = Vec::with_capacity(RING_CLASSES);
        let mut dirs = Vec::with_capacity(RING_CLASSES);
        for k in 0..RING_CLASSES {
            let angle = k as f64 * std::f64::consts::TAU / RING_CLASSES as f64;
            let (s, c) = angle.sin_cos();
            base.push(Component {
                weight: 1.0 / RING_CLASSES as f64,
                mean: vec![RING_RADIUS * c, RING_RADIUS * s],
                std: RING_STD,
            });
            dirs.push(vec![-s, c]);
        }
        TaskSpec::shifted(name, base, &dirs, mismatch_level).expect("ring task is valid")
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |msg: String| Err(TaskError::InvalidTask(msg));
        if self.dim == 0 || self.cond_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        for (label, mix) in [("base", &self.base_mixture), ("target", &self.target_mixture)] {
            if mix.len() != self.cond_dim {
                return bad(format!("{label} mixture needs one component per class"));
            }
            let total: f64 = mix.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 || mix.iter().any(|c| !(c.weight > 0.0)) {
                return bad(format!("{label} weights must be positive and sum to 1"));
            }
            for c in mix {
                if c.mean.len() != self.dim || c.mean.iter().any(|v| !v.is_finite()) {
                    return bad(format!("{label} component mean has wrong dimension"));
                }
                if !(c.std > 0.0) || !c.std.is_finite() {
                    return bad(format!("{label} component std must be positive"));
                }
            }
        }
        if self.mismatch_level == 0.0 && self.base_mixture != self.target_mixture {
            return bad("mismatch level 0 requires identical mixtures".into());
        }
        Ok(())
    }

    pub fn mixture(&self, which: Which) -> &[Component] {
        match which {
            Which::Base => &self.base_mixture,
            Which::Target => &self.target_mixture,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cond_dim
    }

    pub fn condition(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.cond_dim];
        c[class] = 1.0;
        c
    }

    /// Class index of a one-hot condition.
    pub fn class_of(&self, c: &[f64]) -> Result<usize, TaskError> {
        let unknown = || TaskError::UnknownCondition(c.to_vec());
        if c.len() != self.cond_dim {
            return Err(unknown());
        }
        let mut class = None;
        for (i, &v) in c.iter().enumerate() {
            if v == 1.0 && class.is_none() {
                class = Some(i);
            } else if v != 0.0 {
                return Err(unknown());
            }
        }
        class.ok_or_else(unknown)
    }

    /// Bytes hashed into the task fingerprint: every field in declaration order, floats as bit patterns.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend((self.name.len() as u64).to_le_bytes());
        out.extend(self.name.as_bytes());
        out.extend((self.dim as u64).to_le_bytes());
        out.extend((self.cond_dim as u64).to_le_bytes());
        for mix in [&self.base_mixture, &self.target_mixture] {
            out.extend((mix.len() as u64).to_le_bytes());
            for c in mix {
                out.extend(c.weight.to_bits().to_le_bytes());
                for m in &c.mean {
                    out.extend(m.to_bits().to_le_bytes());
                }
                out.extend(c.std.to_bits().to_le_bytes());
            }
        }
        out.extend(self.mismatch_level.to_bits().to_le_bytes());
        out
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_bytes()).into()
    }

    /// Draws a class index according to the mixture weights.
    pub fn draw_class(&self, which: Which, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mix = self.mixture(which);
        let mut acc = 0.0;
        for (k, c) in mix.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return k;
            }
        }
        mix.len() - 1
    }

    fn draw_point(&self, which: Which, class: usize, rng: &mut impl Rng, out: &mut Vec<f64>) {
        let comp = &self.mixture(which)[class];
        for &m in &comp.mean {
            let z: f64 = StandardNormal.sample(rng);
            out.push(m + comp.std * z);
        }
    }
}

/// I.i.d. draws from the named mixture conditioned on `c`.
pub fn sample_data(
    task: &TaskSpec,
    which: Which,
    c: &[f64],
    n: usize,
    seed: u64,
) -> Result<SampleSet, TaskError> {
    if n == 0 {
        return Err(TaskError::EmptyRequest);
    }
    let class = task.class_of(c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * task.dim);
    for _ in 0..n {
        task.draw_point(which, class, &mut rng, &mut data);
    }
    Ok(SampleSet::new(task.dim, data))
}

/// Draws classes by mixture weight, then points; returns `(classes, points)`.
pub fn sample_mixture(
    task: &TaskSpec,
    which: Which,
    n: usize,
    seed: u64,
) -> Result<(Vec<usize>, SampleSet), TaskError> {
    if n == 0 {
        return Err(TaskError::EmptyRequest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * task.dim);
    for _ in 0..n {
        let k = task.draw_class(which, &mut rng);
        classes.push(k);
        task.draw_point(which, k, &mut rng, &mut data);
    }
    Ok((classes, SampleSet::new(task.dim, data)))
}

/// Log-density of `x` under the target component selected by `c`, including the mixture weight.
pub fn oracle_reward(task: &TaskSpec, x: &[f64], c: &[f64]) -> Result<f64, TaskError> {
    let class = task.class_of(c)?;
    Ok(class_log_density(task, Which::Target, class, x))
}

pub(crate) fn class_log_density(task: &TaskSpec, which: Which, class: usize, x: &[f64]) -> f64 {
    let comp = &task.mixture(which)[class];
    let var = comp.std * comp.std;
    let sq: f64 = x.iter().zip(&comp.mean).map(|(a, m)| (a - m) * (a - m)).sum();
    comp.weight.ln() - 0.5 * x.len() as f64 * (std::f64::consts::TAU * var).ln() - 0.5 * sq / var
}

/// One preference example: condition, chosen sample, rejected sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub c: Vec<f64>,
    pub x_w: Vec<f64>,
    pub x_l: Vec<f64>,
}

impl PreferenceTriple {
    pub fn is_finite(&self) -> bool {
        self.c
            .iter()
            .chain(&self.x_w)
            .chain(&self.x_l)
            .all(|v| v.is_finite())
    }
}

/// Where rejected samples come from.
pub enum RejectedSource<'a> {
    /// Generations of the model being aligned.
    Model {
        params: &'a DenoiserParams,
        schedule: &'a Schedule,
    },
    /// Direct draws from the base mixture.
    BaseMixture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    /// Keep only pairs whose chosen sample out-scores the rejected one by more than this.
    pub min_reward_margin: Option<f64>,
    /// Upper bound on redraw rounds when filtering.
    pub max_rounds: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            min_reward_margin: Some(0.0),
            max_rounds: 64,
        }
    }
}

const GENERATION_CHUNK: usize = 1024;

/// Builds `n` preference triples: chosen from the target mixture, rejected from `source`.
pub fn synthesize_preferences(
    task: &TaskSpec,
    source: &RejectedSource<'_>,
    n: usize,
    seed: u64,
    options: SynthesisOptions,
) -> Result<Dataset, TaskError> {
    if n == 0 {
        return Err(TaskError::EmptyRequest);
    }
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut rounds = 0;
    while records.len() < n {
        if rounds == options.max_rounds {
            return Err(TaskError::FilterExhausted {
                kept: records.len(),
                requested: n,
                rounds,
            });
        }
        rounds += 1;
        let want = n - records.len();
        // Conditions are uniform over the class set, independent of mixture weights.
        let classes: Vec<usize> = (0..want).map(|_| rng.random_range(0..task.cond_dim)).collect();
        let mut chosen = Vec::with_capacity(want * task.dim);
        for &k in &classes {
            task.draw_point(Which::Target, k, &mut rng, &mut chosen);
        }
        let rejected = match source {
            RejectedSource::BaseMixture => {
                let mut out = Vec::with_capacity(want * task.dim);
                for &k in &classes {
                    task.draw_point(Which::Base, k, &mut rng, &mut out);
                }
                out
            }
            RejectedSource::Model { params, schedule } => {
                let mut out = Vec::with_capacity(want * task.dim);
                for (chunk_idx, chunk) in classes.chunks(GENERATION_CHUNK).enumerate() {
                    let conds = SampleSet::from_rows(
                        task.cond_dim,
                        chunk.iter().map(|&k| task.condition(k)),
                    );
                    let sample_seed: u64 = rng.random();
                    let gen = ancestral_sample_batch(*params, schedule, task.dim, &conds, sample_seed)
                        .map_err(|source| TaskError::SamplerDiverged {
                            index: records.len() + chunk_idx * GENERATION_CHUNK,
                            source,
                        })?;
                    out.extend_from_slice(gen.as_slice());
                }
                out
            }
        };
        for (i, &k) in classes.iter().enumerate() {
            let x_w = chosen[i * task.dim..(i + 1) * task.dim].to_vec();
            let x_l = rejected[i * task.dim..(i + 1) * task.dim].to_vec();
            if let Some(margin) = options.min_reward_margin {
                let gap = class_log_density(task, Which::Target, k, &x_w)
                    - class_log_density(task, Which::Target, k, &x_l);
                if !(gap > margin) {
                    continue;
                }
            }
            records.push(PreferenceTriple {
                c: task.condition(k),
                x_w,
                x_l,
            });
        }
    }
    Ok(Dataset::new(task, seed, records))
}

/// Bayes-optimal noise predictor for the class-conditional mixture `which`.
#[derive(Debug, Clone)]
pub struct TaskOracle<'a> {
    pub task: &'a TaskSpec,
    pub which: Which,
}

impl NoisePredictor for TaskOracle<'_> {
    fn predict_noise(
        &self,
        schedule: &Schedule,
        x_t: &Tensor,
        c: &Tensor,
        t: &[usize],
    ) -> Result<Tensor, DiffusionError> {
        let dim = self.task.dim;
        let cd = self.task.cond_dim;
        if x_t.shape() != [t.len(), dim] || c.shape() != [t.len(), cd] {
            return Err(DiffusionError::Shape(format!(
                "x_t {:?}, c {:?} for {} rows",
                x_t.shape(),
                c.shape(),
                t.len()
            )));
        }
        let mut out = Vec::with_capacity(x_t.numel());
        for ((row, cond), &step) in x_t
            .values()
            .chunks_exact(dim)
            .zip(c.values().chunks_exact(cd))
            .zip(t)
        {
            let class = self
                .task
                .class_of(cond)
                .map_err(|e| DiffusionError::InvalidArgument(e.to_string()))?;
            let comp = &self.task.mixture(self.which)[class];
            out.extend(optimal_gaussian_denoiser(
                &comp.mean,
                comp.std * comp.std,
                schedule,
                row,
                step,
            )?);
        }
        Ok(Tensor::matrix(t.len(), dim, out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mismatch_means_identical_mixtures() {
        let t = TaskSpec::ring("x", 0.0);
        assert_eq!(t.base_mixture, t.target_mixture);
        let t = TaskSpec::ring("x", 2.0);
        assert_ne!(t.base_mixture, t.target_mixture);
        let shift: f64 = t.base_mixture[0]
            .mean
            .iter()
            .zip(&t.target_mixture[0].mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((shift - 2.0 * RING_STD).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_mixtures() {
        let mut t = TaskSpec::ring("x", 1.0);
        t.base_mixture[0].weight = 0.5;
        assert!(t.validate().is_err());
        let mut t = TaskSpec::ring("x", 1.0);
        t.target_mixture[1].std = 0.0;
        assert!(t.validate().is_err());
        let mut t = TaskSpec::ring("x", 0.0);
        t.target_mixture[1].mean[0] += 1.0;
        assert!(t.validate().is_err());
        assert!(TaskSpec::shifted("x", TaskSpec::ring("y", 0.0).base_mixture, &[], 1.0).is_err());
    }

    #[test]
    fn condition_lookup() {
        let t = TaskSpec::ring("x", 0.0);
        assert_eq!(t.class_of(&[0.0, 0.0, 1.0, 0.0]).unwrap(), 2);
        assert!(t.class_of(&[0.0, 0.5, 0.5, 0.0]).is_err());
        assert!(t.class_of(&[0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(t.class_of(&[1.0, 0.0, 0.0]).is_err());
        assert!(t.class_of(&[1.0, 1.0, 0.0, 0.0]).is_err());
        assert!(matches!(
            sample_data(&t, Which::Base, &[2.0, 0.0, 0.0, 0.0], 4, 0),
            Err(TaskError::UnknownCondition(_))
        ));
    }

    #[test]
    fn reward_peak_value() {
        let t = TaskSpec::ring("x", 1.0);
        let c = t.condition(1);
        let mu = t.target_mixture[1].mean.clone();
        let s2 = RING_STD * RING_STD;
        let expected = 0.25f64.ln() - (std::f64::consts::TAU * s2).ln();
        assert!((oracle_reward(&t, &mu, &c).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn reward_decreases_along_a_ray() {
        let t = TaskSpec::ring("x", 2.0);
        let c = t.condition(3);
        let mu = &t.target_mixture[3].mean;
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let r = step as f64 * 0.1;
            let x = [mu[0] + 0.6 * r, mu[1] - 0.8 * r];
            let reward = oracle_reward(&t, &x, &c).unwrap();
            assert!(reward < prev);
            prev = reward;
        }
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let a = TaskSpec::ring("style", 2.0);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.target_mixture[2].mean[1] += 1e-15;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), TaskSpec::ring("other", 2.0).fingerprint());
    }

    #[test]
    fn presets_parse_and_order() {
        let levels: Vec<f64> = Preset::ALIGNMENT.iter().map(|p| p.mismatch_level()).collect();
        assert_eq!(levels, vec![0.0, 0.5, 1.0, 2.0, 4.0]);
        assert_eq!("style".parse::<Preset>().unwrap(), Preset::Style);
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn synthesis_rejects_zero_count() {
        let t = Preset::Style.task();
        assert_eq!(
            synthesize_preferences(&t, &RejectedSource::BaseMixture, 0, 1, Default::default())
                .unwrap_err(),
            TaskError::EmptyRequest
        );
    }

    #[test]
    fn filtered_pairs_all_prefer_chosen() {
        let t = Preset::Preference.task();
        let d = synthesize_preferences(&t, &RejectedSource::BaseMixture, 500, 9, Default::default())
            .unwrap();
        assert_eq!(d.records.len(), 500);
        for r in &d.records {
            assert!(oracle_reward(&t, &r.x_w, &r.c).unwrap() > oracle_reward(&t, &r.x_l, &r.c).unwrap());
        }
    }
}
