use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Largest per-step noise fraction; keeps `alpha_t / alpha_{t-1}` away from zero at the end of the chain.
const MAX_STEP_BETA: f64 = 0.999;
const MIN_SIGMA: f64 = 1e-4;
const MIN_ALPHA: f64 = 1e-4;
const MIN_TIMESTEPS: usize = 2;
/// Beyond this the cosine tail drops below `MIN_ALPHA` before the last step.
pub const MAX_TIMESTEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(format!("unknown schedule kind `{other}`")),
        }
    }
}

/// Variance-preserving discrete noise schedule, indexed by `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    lambda: Vec<f64>,
    omega: Vec<f64>,
}

impl Schedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn timesteps(&self) -> usize {
        self.alpha.len()
    }

    fn index(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.timesteps() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(t - 1)
    }

    pub fn check(&self, t: usize) -> Result<(), DiffusionError> {
        self.index(t).map(|_| ())
    }

    pub fn alpha(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.sigma[self.index(t)?])
    }

    /// Log signal-to-noise ratio `ln(alpha^2 / sigma^2)`.
    pub fn lambda(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.lambda[self.index(t)?])
    }

    pub fn omega(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.omega[self.index(t)?])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omega
    }

    /// Replaces the unit loss weights with `weight(lambda_t)`.
    pub fn with_weights(mut self, weight: impl Fn(f64) -> f64) -> Self {
        self.omega = self.lambda.iter().map(|&l| weight(l)).collect();
        self
    }
}

/// Continuous-time VP schedule with noise rate rising linearly from 0.1 to 20.
fn linear_alpha_bar(s: f64) -> f64 {
    let (lo, hi) = (0.1, 20.0);
    (-(lo * s + 0.5 * (hi - lo) * s * s)).exp()
}

fn cosine_alpha_bar(s: f64) -> f64 {
    let offset = 0.008;
    let f = ((s + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos();
    f * f
}

/// Builds a schedule with `timesteps` steps (2 to 10 000).
///
/// Per-step noise fractions are capped at 0.999 and the endpoints clamped so
/// that `sigma_1 >= 1e-4` and `alpha_T >= 1e-4`.
pub fn make_schedule(kind: ScheduleKind, timesteps: usize) -> Result<Schedule, DiffusionError> {
    if !(MIN_TIMESTEPS..=MAX_TIMESTEPS).contains(&timesteps) {
        return Err(DiffusionError::InvalidTimesteps(timesteps));
    }
    let n = timesteps as f64;
    let betas: Vec<f64> = match kind {
        ScheduleKind::Cosine => (1..=timesteps)
            .map(|t| {
                let prev = cosine_alpha_bar((t - 1) as f64 / n) / cosine_alpha_bar(0.0);
                let cur = cosine_alpha_bar(t as f64 / n) / cosine_alpha_bar(0.0);
                1.0 - cur / prev
            })
            .collect(),
        ScheduleKind::Linear => (1..=timesteps)
            .map(|t| 1.0 - linear_alpha_bar(t as f64 / n) / linear_alpha_bar((t - 1) as f64 / n))
            .collect(),
    };
    let mut alpha_bar = 1.0;
    let mut alpha = Vec::with_capacity(timesteps);
    for beta in betas {
        let beta = beta.clamp(0.0, MAX_STEP_BETA);
        alpha_bar *= 1.0 - beta;
        alpha.push(alpha_bar.sqrt());
    }
    let max_alpha = (1.0 - MIN_SIGMA * MIN_SIGMA).sqrt();
    alpha[0] = alpha[0].min(max_alpha);
    let last = timesteps - 1;
    alpha[last] = alpha[last].max(MIN_ALPHA);
    let sigma: Vec<f64> = alpha.iter().map(|a| (1.0 - a * a).sqrt()).collect();
    let lambda = alpha
        .iter()
        .zip(&sigma)
        .map(|(a, s)| 2.0 * (a.ln() - s.ln()))
        .collect();
    Ok(Schedule {
        kind,
        alpha,
        sigma,
        lambda,
        omega: vec![1.0; timesteps],
    })
}
