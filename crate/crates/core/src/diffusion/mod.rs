//! Discrete-time diffusion: schedules, forward corruption, the conditional
//! MLP noise predictor, ancestral sampling and a closed-form Gaussian oracle.

mod denoiser;
mod schedule;

pub use denoiser::{
    denoise_predict, time_embedding, Architecture, DenoiserParams, Network, OutputInit,
    ReferenceHandle, TIME_EMBED_DIM,
};
pub use schedule::{make_schedule, Schedule, ScheduleKind};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::ndgrad::{GradError, Tensor};
use crate::samples::SampleSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("a schedule needs between 2 and 10000 timesteps, got {0}")]
    InvalidTimesteps(usize),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sampler produced a non-finite state at t = {t}")]
    Diverged { t: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor {
    /// `x_t` is `[B, data_dim]`, `c` is `[B, cond_dim]`, one timestep per row.
    fn predict_noise(
        &self,
        schedule: &Schedule,
        x_t: &Tensor,
        c: &Tensor,
        t: &[usize],
    ) -> Result<Tensor, DiffusionError>;
}

/// `alpha_t * x0 + sigma_t * eps`.
pub fn forward_sample(
    schedule: &Schedule,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<Tensor, DiffusionError> {
    let (a, s) = (schedule.alpha(t)?, schedule.sigma(t)?);
    if x0.shape() != eps.shape() {
        return Err(GradError::ShapeMismatch {
            op: "forward_sample",
            left: x0.shape().to_vec(),
            right: eps.shape().to_vec(),
        }
        .into());
    }
    Ok(x0.scalar_mul(a)?.add(&eps.scalar_mul(s)?)?)
}

/// Row-wise forward corruption with a separate timestep per row of `x0`.
pub fn forward_sample_rows(
    schedule: &Schedule,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor, DiffusionError> {
    if x0.shape() != eps.shape() || x0.shape().len() != 2 || x0.shape()[0] != t.len() {
        return Err(DiffusionError::Shape(format!(
            "x0 {:?}, eps {:?}, {} timesteps",
            x0.shape(),
            eps.shape(),
            t.len()
        )));
    }
    let dim = x0.shape()[1];
    let mut a = Vec::with_capacity(x0.numel());
    let mut s = Vec::with_capacity(x0.numel());
    for &step in t {
        let (ai, si) = (schedule.alpha(step)?, schedule.sigma(step)?);
        a.extend(std::iter::repeat_n(ai, dim));
        s.extend(std::iter::repeat_n(si, dim));
    }
    let a = Tensor::new(x0.shape(), a)?;
    let s = Tensor::new(x0.shape(), s)?;
    Ok(x0.mul(&a)?.add(&eps.mul(&s)?)?)
}

/// Draws `n` samples for a single condition `c`.
pub fn ancestral_sample(
    model: &dyn NoisePredictor,
    schedule: &Schedule,
    data_dim: usize,
    c: &[f64],
    n: usize,
    seed: u64,
) -> Result<SampleSet, DiffusionError> {
    if n == 0 {
        return Err(DiffusionError::InvalidArgument(
            "sample count must be at least 1".into(),
        ));
    }
    let conds = SampleSet::from_rows(c.len(), std::iter::repeat_n(c, n));
    ancestral_sample_batch(model, schedule, data_dim, &conds, seed)
}

/// Runs the reverse chain `x_T -> x_0` for one sample per row of `conds`.
///
/// Each step uses the DDPM posterior mean built from the predicted clean
/// sample, with variance `sigma_{t-1}^2 / sigma_t^2 * (1 - alpha_t^2 / alpha_{t-1}^2)`.
/// The last step returns the mean without noise.
pub fn ancestral_sample_batch(
    model: &dyn NoisePredictor,
    schedule: &Schedule,
    data_dim: usize,
    conds: &SampleSet,
    seed: u64,
) -> Result<SampleSet, DiffusionError> {
    let n = conds.len();
    if n == 0 {
        return Err(DiffusionError::InvalidArgument(
            "sample count must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |len: usize| -> Vec<f64> {
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let c = Tensor::matrix(n, conds.dim(), conds.as_slice().to_vec())?;
    let mut x: Vec<f64> = normal(n * data_dim);
    let total = schedule.timesteps();
    for t in (1..=total).rev() {
        let xt = Tensor::matrix(n, data_dim, x)?;
        let eps = model.predict_noise(schedule, &xt, &c, &vec![t; n])?;
        let (a_t, s_t) = (schedule.alpha(t)?, schedule.sigma(t)?);
        let (a_prev, s_prev) = if t > 1 {
            (schedule.alpha(t - 1)?, schedule.sigma(t - 1)?)
        } else {
            (1.0, 0.0)
        };
        let step_alpha = a_t / a_prev;
        let step_var = 1.0 - step_alpha * step_alpha;
        let coef_x0 = a_prev * step_var / (s_t * s_t);
        let coef_xt = step_alpha * s_prev * s_prev / (s_t * s_t);
        let noise_std = (s_prev * s_prev / (s_t * s_t) * step_var).sqrt();
        let z = if t > 1 {
            normal(n * data_dim)
        } else {
            vec![0.0; n * data_dim]
        };
        x = xt
            .values()
            .iter()
            .zip(eps.values())
            .zip(&z)
            .map(|((&xv, &ev), &zv)| {
                let x0_hat = (xv - s_t * ev) / a_t;
                coef_x0 * x0_hat + coef_xt * xv + noise_std * zv
            })
            .collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::Diverged { t });
        }
    }
    Ok(SampleSet::new(data_dim, x))
}

/// Bayes-optimal noise prediction when `x0 ~ N(mean, var * I)`.
pub fn optimal_gaussian_denoiser(
    mean: &[f64],
    var: f64,
    schedule: &Schedule,
    x_t: &[f64],
    t: usize,
) -> Result<Vec<f64>, DiffusionError> {
    let (a, s) = (schedule.alpha(t)?, schedule.sigma(t)?);
    gaussian_eps(mean, var, a, s, x_t)
}

fn gaussian_eps(mean: &[f64], var: f64, a: f64, s: f64, x_t: &[f64]) -> Result<Vec<f64>, DiffusionError> {
    if !(s > 0.0) {
        return Err(DiffusionError::InvalidArgument(
            "noise scale must be positive".into(),
        ));
    }
    if !(var > 0.0) {
        return Err(DiffusionError::InvalidArgument(
            "data variance must be positive".into(),
        ));
    }
    if mean.len() != x_t.len() {
        return Err(DiffusionError::Shape(format!(
            "mean has {} coordinates, x_t has {}",
            mean.len(),
            x_t.len()
        )));
    }
    let denom = a * a * var + s * s;
    Ok(x_t
        .iter()
        .zip(mean)
        .map(|(&x, &m)| {
            let x0 = (a * var * x + s * s * m) / denom;
            (x - a * x0) / s
        })
        .collect())
}

/// Noise oracle for data drawn from one isotropic Gaussian, ignoring the condition.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl NoisePredictor for GaussianOracle {
    fn predict_noise(
        &self,
        schedule: &Schedule,
        x_t: &Tensor,
        _c: &Tensor,
        t: &[usize],
    ) -> Result<Tensor, DiffusionError> {
        let dim = self.mean.len();
        if x_t.shape() != [t.len(), dim] {
            return Err(DiffusionError::Shape(format!(
                "expected [{}, {dim}], got {:?}",
                t.len(),
                x_t.shape()
            )));
        }
        let mut out = Vec::with_capacity(x_t.numel());
        for (row, &step) in x_t.values().chunks_exact(dim).zip(t) {
            out.extend(optimal_gaussian_denoiser(&self.mean, self.var, schedule, row, step)?);
        }
        Ok(Tensor::matrix(t.len(), dim, out)?)
    }
}

/// Expected squared noise-prediction error per coordinate of the Gaussian oracle at step `t`.
pub fn gaussian_oracle_mse(var: f64, schedule: &Schedule, t: usize) -> Result<f64, DiffusionError> {
    let (a, s) = (schedule.alpha(t)?, schedule.sigma(t)?);
    Ok(a * a * var / (a * a * var + s * s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(t: usize) -> Schedule {
        make_schedule(ScheduleKind::Cosine, t).unwrap()
    }

    #[test]
    fn forward_sample_arithmetic() {
        let s = cosine(64);
        // Pick the step and rescale so alpha = 0.8, sigma = 0.6 exactly.
        let x0 = Tensor::vector(vec![1.0, 0.0]);
        let eps = Tensor::vector(vec![0.5, -0.5]);
        let out = x0.scalar_mul(0.8).unwrap().add(&eps.scalar_mul(0.6).unwrap()).unwrap();
        assert!((out.values()[0] - 1.1).abs() < 1e-15);
        assert!((out.values()[1] + 0.3).abs() < 1e-15);

        let t = 20;
        let (a, g) = (s.alpha(t).unwrap(), s.sigma(t).unwrap());
        let zero = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(
            forward_sample(&s, &zero, t, &eps).unwrap().values(),
            &[0.5 * g, -0.5 * g]
        );
        assert_eq!(forward_sample(&s, &x0, t, &zero).unwrap().values(), &[a, 0.0]);
    }

    #[test]
    fn forward_sample_checks_inputs() {
        let s = cosine(8);
        let x0 = Tensor::vector(vec![1.0, 0.0]);
        assert!(forward_sample(&s, &x0, 9, &x0).is_err());
        assert!(forward_sample(&s, &x0, 1, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn oracle_standard_normal_collapses() {
        let s = cosine(64);
        for t in [1, 10, 40, 64] {
            let x = [0.7, -1.3];
            let eps = optimal_gaussian_denoiser(&[0.0, 0.0], 1.0, &s, &x, t).unwrap();
            let g = s.sigma(t).unwrap();
            assert!((eps[0] - g * x[0]).abs() < 1e-12);
            assert!((eps[1] - g * x[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_at_mode_center_is_zero() {
        let s = cosine(64);
        let t = 30;
        let a = s.alpha(t).unwrap();
        let x = [2.0 * a, 2.0 * a];
        let eps = optimal_gaussian_denoiser(&[2.0, 2.0], 1e-8, &s, &x, t).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-12), "{eps:?}");
    }

    #[test]
    fn oracle_rejects_degenerate_inputs() {
        let s = cosine(8);
        assert!(optimal_gaussian_denoiser(&[0.0], 0.0, &s, &[1.0], 3).is_err());
        assert!(gaussian_eps(&[0.0], 1.0, 1.0, 0.0, &[1.0]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = cosine(16);
        let oracle = GaussianOracle {
            mean: vec![1.0, -1.0],
            var: 0.25,
        };
        let a = ancestral_sample(&oracle, &s, 2, &[1.0], 3, 42).unwrap();
        let b = ancestral_sample(&oracle, &s, 2, &[1.0], 3, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let c = ancestral_sample(&oracle, &s, 2, &[1.0], 3, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn two_step_chain_terminates() {
        let s = cosine(2);
        let oracle = GaussianOracle {
            mean: vec![0.0, 0.0],
            var: 1.0,
        };
        let out = ancestral_sample(&oracle, &s, 2, &[0.0], 16, 1).unwrap();
        assert!(out.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_samples_rejected() {
        let s = cosine(4);
        let oracle = GaussianOracle {
            mean: vec![0.0],
            var: 1.0,
        };
        assert!(ancestral_sample(&oracle, &s, 1, &[0.0], 0, 1).is_err());
    }

    struct Exploding;

    impl NoisePredictor for Exploding {
        fn predict_noise(
            &self,
            _s: &Schedule,
            x_t: &Tensor,
            _c: &Tensor,
            _t: &[usize],
        ) -> Result<Tensor, DiffusionError> {
            Ok(Tensor::full(x_t.shape(), f64::INFINITY))
        }
    }

    #[test]
    fn divergence_reports_timestep() {
        let s = cosine(8);
        let err = ancestral_sample(&Exploding, &s, 2, &[0.0], 4, 0).unwrap_err();
        assert_eq!(err, DiffusionError::Diverged { t: 8 });
    }
}

