//! Sample-based evaluation: energy distance as the mismatch score, the
//! task's oracle reward, paired win rates and coverage of the target modes.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{
    ancestral_sample, gaussian_oracle_mse, DiffusionError, NoisePredictor, Schedule,
};
use crate::ndgrad::Tensor;
use crate::parallel::{derive_seed, pool};
use crate::samples::SampleSet;
use crate::tasks::{sample_data, sample_mixture, TaskError, TaskSpec, Which};

pub use crate::tasks::oracle_reward;

/// Smallest per-condition sample count accepted by [`evaluate`].
pub const MIN_EVAL_SAMPLES: usize = 64;
/// Radius of a target mode, in component standard deviations.
pub const TARGET_RADIUS_STDS: f64 = 2.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sample sets need at least {min} points, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("sample sets differ in dimension ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("paired sets must have equal sizes and one condition per pair")]
    Unpaired,
    #[error("sampler failed for condition {condition}: {source}")]
    Sampler {
        condition: usize,
        #[source]
        source: DiffusionError,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean pairwise distance over all `|a| * |b|` index pairs. Row sums run in
/// parallel and are then added in row order, so the result is independent of
/// the thread count.
fn mean_cross_distance(a: &SampleSet, b: &SampleSet) -> f64 {
    let rows: Vec<f64> = pool().install(|| {
        (0..a.len())
            .into_par_iter()
            .map(|i| {
                let ai = a.row(i);
                b.rows().map(|bj| euclid(ai, bj)).sum::<f64>()
            })
            .collect()
    });
    rows.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

fn canonical_order<'a>(a: &'a SampleSet, b: &'a SampleSet) -> (&'a SampleSet, &'a SampleSet) {
    let key = |s: &SampleSet| (s.len(), s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    if key(a) <= key(b) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Energy distance `2 E|a-b| - E|a-a'| - E|b-b'|` with all expectations taken
/// over every index pair (including `i = j`), so identical sets give exactly 0.
/// The value is exactly symmetric in its arguments.
pub fn two_sample_distance(a: &SampleSet, b: &SampleSet) -> Result<f64, MetricsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(MetricsError::TooFewSamples { min: 2, got: s.len() });
        }
    }
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (first, second) = canonical_order(a, b);
    let cross = mean_cross_distance(first, second);
    let within = mean_cross_distance(a, a) + mean_cross_distance(b, b);
    Ok(2.0 * cross - within)
}

/// Fraction of matched pairs where `a` out-scores `b` under the oracle reward; ties count 1/2.
pub fn win_rate(
    task: &TaskSpec,
    a: &SampleSet,
    b: &SampleSet,
    conds: &SampleSet,
) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.len() != conds.len() || a.is_empty() {
        return Err(MetricsError::Unpaired);
    }
    let mut score = 0u64; // in half-wins
    for ((xa, xb), c) in a.rows().zip(b.rows()).zip(conds.rows()) {
        let (ra, rb) = (oracle_reward(task, xa, c)?, oracle_reward(task, xb, c)?);
        score += if ra > rb {
            2
        } else if ra == rb {
            1
        } else {
            0
        };
    }
    Ok(score as f64 / (2 * a.len()) as f64)
}

/// Fraction of samples within `2 std` of the target component selected by their condition.
pub fn target_mass(task: &TaskSpec, xs: &SampleSet, conds: &SampleSet) -> Result<f64, MetricsError> {
    if xs.len() != conds.len() || xs.is_empty() {
        return Err(MetricsError::Unpaired);
    }
    let mut inside = 0usize;
    for (x, c) in xs.rows().zip(conds.rows()) {
        let comp = &task.target_mixture[task.class_of(c)?];
        if euclid(x, &comp.mean) <= TARGET_RADIUS_STDS * comp.std {
            inside += 1;
        }
    }
    Ok(inside as f64 / xs.len() as f64)
}

/// Column order of [`MetricsReport::csv_header`] and [`MetricsReport::to_csv_record`].
pub const REPORT_COLUMNS: [&str; 7] = [
    "mismatch",
    "mean_oracle_reward",
    "win_rate_vs_base",
    "target_mass",
    "n",
    "seed",
    "wall_time_s",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Energy distance between generations and target draws, averaged over conditions.
    pub mismatch: f64,
    pub mean_oracle_reward: f64,
    pub win_rate_vs_base: f64,
    pub target_mass: f64,
    /// Samples per condition.
    pub n: usize,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl MetricsReport {
    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    pub fn to_csv_record(&self) -> Vec<String> {
        vec![
            fmt_f64(self.mismatch),
            fmt_f64(self.mean_oracle_reward),
            fmt_f64(self.win_rate_vs_base),
            fmt_f64(self.target_mass),
            self.n.to_string(),
            self.seed.to_string(),
            fmt_f64(self.wall_time_s),
        ]
    }

    pub fn to_csv_row(&self) -> String {
        self.to_csv_record().join(",")
    }

    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes a header plus one row.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_COLUMNS)?;
        w.write_record(self.to_csv_record())?;
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// What generated samples are compared against in the win rate.
pub enum Baseline<'a> {
    /// Generations of another model, drawn with noise independent of the evaluated model's.
    Model(&'a dyn NoisePredictor),
    /// Fresh draws from the task's base mixture.
    BaseMixture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Samples per condition.
    pub n: usize,
    pub seed: u64,
    /// When false `wall_time_s` is reported as 0 so reports are byte-reproducible.
    pub record_timing: bool,
}

impl EvalConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        EvalConfig {
            n,
            seed,
            record_timing: false,
        }
    }
}

/// Samples `n` generations per condition and scores them against the task.
/// Every metric is computed per condition and averaged uniformly.
pub fn evaluate(
    model: &dyn NoisePredictor,
    schedule: &Schedule,
    task: &TaskSpec,
    baseline: &Baseline<'_>,
    config: EvalConfig,
) -> Result<MetricsReport, MetricsError> {
    if config.n < MIN_EVAL_SAMPLES {
        return Err(MetricsError::TooFewSamples {
            min: MIN_EVAL_SAMPLES,
            got: config.n,
        });
    }
    task.validate()?;
    let start = Instant::now();
    let n = config.n;
    let k = task.num_classes();
    let (mut mismatch, mut reward, mut wins, mut mass) = (0.0, 0.0, 0.0, 0.0);
    for class in 0..k {
        let c = task.condition(class);
        let gen_seed = derive_seed(config.seed, &[0, class as u64]);
        let generated = ancestral_sample(model, schedule, task.dim, &c, n, gen_seed)
            .map_err(|source| MetricsError::Sampler {
                condition: class,
                source,
            })?;
        let target = sample_data(task, Which::Target, &c, n, derive_seed(config.seed, &[1, class as u64]))?;
        let base_seed = derive_seed(config.seed, &[2, class as u64]);
        let base = match baseline {
            Baseline::Model(m) => ancestral_sample(*m, schedule, task.dim, &c, n, base_seed)
                .map_err(|source| MetricsError::Sampler {
                    condition: class,
                    source,
                })?,
            Baseline::BaseMixture => sample_data(task, Which::Base, &c, n, base_seed)?,
        };
        let conds = SampleSet::from_rows(task.cond_dim, std::iter::repeat_n(&c, n));
        mismatch += two_sample_distance(&generated, &target)?;
        reward += generated
            .rows()
            .map(|x| oracle_reward(task, x, &c))
            .sum::<Result<f64, _>>()?
            / n as f64;
        wins += win_rate(task, &generated, &base, &conds)?;
        mass += target_mass(task, &generated, &conds)?;
    }
    let kf = k as f64;
    Ok(MetricsReport {
        mismatch: mismatch / kf,
        mean_oracle_reward: reward / kf,
        win_rate_vs_base: wins / kf,
        target_mass: mass / kf,
        n,
        seed: config.seed,
        wall_time_s: if config.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    })
}

/// Monte-Carlo estimate of the simplified denoising loss on fresh draws from
/// `which`, with uniform timesteps. Evaluated in chunks of 4096 rows.
pub fn test_mse(
    model: &dyn NoisePredictor,
    schedule: &Schedule,
    task: &TaskSpec,
    which: Which,
    n: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::TooFewSamples { min: 1, got: 0 });
    }
    let (classes, x0) = sample_mixture(task, which, n, derive_seed(seed, &[0]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let d = task.dim;
    let mut total = 0.0;
    for start in (0..n).step_by(4096) {
        let end = (start + 4096).min(n);
        let rows = end - start;
        let t: Vec<usize> = (0..rows)
            .map(|_| rng.random_range(1..=schedule.timesteps()))
            .collect();
        let eps: Vec<f64> = (0..rows * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut xt = Vec::with_capacity(rows * d);
        for (i, &step) in t.iter().enumerate() {
            let (a, s) = (schedule.alpha(step)?, schedule.sigma(step)?);
            for j in 0..d {
                xt.push(a * x0.row(start + i)[j] + s * eps[i * d + j]);
            }
        }
        let conds: Vec<f64> = classes[start..end]
            .iter()
            .flat_map(|&k| task.condition(k))
            .collect();
        let pred = model.predict_noise(
            schedule,
            &Tensor::matrix(rows, d, xt).map_err(DiffusionError::from)?,
            &Tensor::matrix(rows, task.cond_dim, conds).map_err(DiffusionError::from)?,
            &t,
        )?;
        total += pred
            .values()
            .iter()
            .zip(&eps)
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>();
    }
    Ok(total / (n * d) as f64)
}

/// Exact expected loss of the Bayes-optimal denoiser for `which` under uniform
/// timesteps. Each condition selects one isotropic Gaussian, so the optimum is
/// the per-component closed form averaged over weights and timesteps.
pub fn oracle_test_mse(task: &TaskSpec, which: Which, schedule: &Schedule) -> Result<f64, MetricsError> {
    let steps = schedule.timesteps();
    let mut total = 0.0;
    for comp in task.mixture(which) {
        let mut per_t = 0.0;
        for t in 1..=steps {
            per_t += gaussian_oracle_mse(comp.std * comp.std, schedule, t)?;
        }
        total += comp.weight * per_t / steps as f64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(dim: usize, v: &[f64]) -> SampleSet {
        SampleSet::new(dim, v.to_vec())
    }

    #[test]
    fn energy_distance_of_point_masses() {
        // Two points per set at 0 and 3 on a line: E = 2*3 - 0 - 0.
        let a = set(1, &[0.0, 0.0]);
        let b = set(1, &[3.0, 3.0]);
        assert_eq!(two_sample_distance(&a, &b).unwrap(), 6.0);
        assert_eq!(two_sample_distance(&a, &a).unwrap(), 0.0);
        assert!(two_sample_distance(&set(1, &[0.0]), &b).is_err());
        assert!(two_sample_distance(&a, &set(2, &[0.0, 0.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn win_rate_ties_and_complement() {
        let task = TaskSpec::ring("x", 1.0);
        let c = task.condition(0);
        let conds = SampleSet::from_rows(4, [&c, &c, &c]);
        let mu = task.target_mixture[0].mean.clone();
        let a = SampleSet::from_rows(2, [mu.clone(), vec![9.0, 9.0], mu.clone()]);
        let b = SampleSet::from_rows(2, [vec![5.0, 5.0], mu.clone(), mu]);
        assert_eq!(win_rate(&task, &a, &a, &conds).unwrap(), 0.5);
        let ab = win_rate(&task, &a, &b, &conds).unwrap();
        assert_eq!(ab, 0.5);
        assert_eq!(ab + win_rate(&task, &b, &a, &conds).unwrap(), 1.0);
        assert!(win_rate(&task, &a, &set(2, &[0.0, 0.0]), &conds).is_err());
    }

    #[test]
    fn target_mass_counts_the_disc() {
        let task = TaskSpec::ring("x", 0.0);
        let c = task.condition(1);
        let mu = &task.target_mixture[1].mean;
        let xs = SampleSet::from_rows(
            2,
            [
                vec![mu[0], mu[1]],
                vec![mu[0] + 0.99, mu[1]],
                vec![mu[0] + 1.01, mu[1]],
                vec![-mu[0], -mu[1]],
            ],
        );
        let conds = SampleSet::from_rows(4, std::iter::repeat_n(&c, 4));
        assert_eq!(target_mass(&task, &xs, &conds).unwrap(), 0.5);
    }

    #[test]
    fn csv_round_trip_of_floats() {
        let r = MetricsReport {
            mismatch: 0.1 + 0.2,
            mean_oracle_reward: -2.5,
            win_rate_vs_base: 0.75,
            target_mass: 1.0,
            n: 64,
            seed: 3,
            wall_time_s: 0.0,
        };
        let row = r.to_csv_row();
        let first: f64 = row.split(',').next().unwrap().parse().unwrap();
        assert_eq!(first, 0.1 + 0.2);
        assert_eq!(MetricsReport::csv_header().split(',').count(), r.to_csv_record().len());
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
