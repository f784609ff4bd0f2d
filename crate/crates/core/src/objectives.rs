//! Training objectives: the simplified denoising MSE, the margin-aware
//! preference loss with its bounded link function, the per-timestep
//! Diffusion-DPO surrogate and plain supervised fine-tuning.
//!
//! Every batched objective runs the trained network once over the chosen and
//! rejected rows stacked together, so a preference step costs one forward and
//! one backward pass. Only DPO additionally evaluates the frozen reference.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{forward_sample_rows, DiffusionError, Network, ReferenceHandle, Schedule};
use crate::ndgrad::{softplus, GradError, Tensor};
use crate::tasks::PreferenceTriple;

/// Below this loss value the link uses its Taylor expansion.
pub const LINK_SERIES_CUTOFF: f64 = 1e-5;
/// Above this loss value the link uses `ln l - l`, where `expm1` would overflow.
pub const LINK_ASYMPTOTIC_CUTOFF: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("invalid objective configuration: {0}")]
    InvalidConfig(String),
    #[error("{op}: argument {value} outside its domain")]
    Domain { op: &'static str, value: f64 },
    #[error("batch error: {0}")]
    Batch(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Mapo,
    Dpo,
    Sft,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [ObjectiveKind::Mapo, ObjectiveKind::Dpo, ObjectiveKind::Sft];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Mapo => "mapo",
            ObjectiveKind::Dpo => "dpo",
            ObjectiveKind::Sft => "sft",
        }
    }

    pub fn needs_reference(self) -> bool {
        self == ObjectiveKind::Dpo
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown objective `{s}` (expected mapo, dpo or sft)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepSampling {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Temperature of the link function.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// KL weight of the DPO surrogate.
    #[serde(default = "default_beta_dpo")]
    pub beta_dpo: f64,
    /// Use the same `(t, eps)` for both members of a pair.
    #[serde(default = "default_true")]
    pub share_noise: bool,
    #[serde(default)]
    pub timestep_sampling: TimestepSampling,
    /// Multiply each row's error by the schedule weight instead of using the simplified loss.
    #[serde(default)]
    pub weighted_mse: bool,
}

fn default_beta() -> f64 {
    8.0
}

fn default_beta_dpo() -> f64 {
    500.0
}

fn default_true() -> bool {
    true
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind, beta: f64) -> Self {
        ObjectiveConfig {
            kind,
            beta,
            beta_dpo: default_beta_dpo(),
            share_noise: true,
            timestep_sampling: TimestepSampling::Uniform,
            weighted_mse: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if !(self.beta_dpo > 0.0 && self.beta_dpo.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "beta_dpo must be positive and finite, got {}",
                self.beta_dpo
            )));
        }
        Ok(())
    }
}

/// Batch-averaged loss components. For DPO and SFT runs `margin`, `phi_w` and
/// `phi_l` are still computed from the model's own losses (with `beta`) so that
/// all objectives log comparable telemetry; only MaPO optimizes them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairLossBreakdown {
    pub total: f64,
    pub mse_w: f64,
    pub mse_l: f64,
    pub margin: f64,
    pub phi_w: f64,
    pub phi_l: f64,
}

impl PairLossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.mse_w, self.mse_l, self.margin, self.phi_w, self.phi_l]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_ell(op: &'static str, ell: f64) -> Result<()> {
    if ell >= 0.0 && ell.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::Domain { op, value: ell })
    }
}

fn check_beta(op: &'static str, beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::Domain { op, value: beta })
    }
}

/// `ln(l / (e^l - 1))`, with the removable singularity at 0 filled in.
fn log_link_unit(ell: f64) -> f64 {
    if ell < LINK_SERIES_CUTOFF {
        -ell / 2.0 + ell * ell / 24.0
    } else if ell > LINK_ASYMPTOTIC_CUTOFF {
        ell.ln() - ell
    } else {
        ell.ln() - ell.exp_m1().ln()
    }
}

/// `ln phi_beta(l)`.
pub fn link_phi_log(ell: f64, beta: f64) -> Result<f64> {
    check_ell("link_phi", ell)?;
    check_beta("link_phi", beta)?;
    Ok(beta * log_link_unit(ell))
}

/// `phi_beta(l) = (l / (e^l - 1))^beta`, equal to 1 at `l = 0`.
///
/// ```
/// let v = mapo_lab::objectives::link_phi(1.0, 1.0).unwrap();
/// assert!((v - 1.0 / (std::f64::consts::E - 1.0)).abs() < 1e-15);
/// ```
pub fn link_phi(ell: f64, beta: f64) -> Result<f64> {
    Ok(link_phi_log(ell, beta)?.exp())
}

/// `|d phi_1 / d l| = (l e^l - e^l + 1) / (e^l - 1)^2`.
///
/// The value lies in `(0, 1/2)` and tends to 1/2 as `l -> 0+`; that limit is
/// not returned because `l = 0` is rejected.
pub fn amplification_factor(ell: f64) -> Result<f64> {
    if !(ell > 0.0) || !ell.is_finite() {
        return Err(ObjectiveError::Domain {
            op: "amplification_factor",
            value: ell,
        });
    }
    if ell < 0.5 {
        // Numerator as its Taylor series sum_{n>=2} (n-1) l^n / n!, which
        // avoids the cancellation in l e^l - e^l + 1.
        let mut term = ell; // l^n / n! for n = 1
        let mut num = 0.0;
        for n in 2..40 {
            term *= ell / n as f64;
            let add = (n - 1) as f64 * term;
            num += add;
            if add < num * 1e-18 {
                break;
            }
        }
        let den = ell.exp_m1();
        Ok(num / (den * den))
    } else {
        let e = (-ell).exp();
        let den = (-ell).exp_m1();
        Ok(e * (ell - 1.0 + e) / (den * den))
    }
}

/// `ln phi_beta` applied elementwise to a tensor of non-negative losses.
pub fn link_phi_log_tensor(ell: &Tensor, beta: f64) -> Result<Tensor> {
    check_beta("link_phi", beta)?;
    let values = ell.values();
    if let Some(&bad) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(ObjectiveError::Domain {
            op: "link_phi",
            value: bad,
        });
    }
    let all_mid = values
        .iter()
        .all(|&v| (LINK_SERIES_CUTOFF..=LINK_ASYMPTOTIC_CUTOFF).contains(&v));
    let unit = if all_mid {
        ell.log()?.sub(&ell.expm1()?.log()?)?
    } else {
        // Evaluate each branch on inputs masked into its safe range, then
        // select with constant 0/1 masks; gradients reach only the live branch.
        let mask = |f: &dyn Fn(f64) -> bool| -> Result<(Tensor, Tensor)> {
            let on: Vec<f64> = values.iter().map(|&v| if f(v) { 1.0 } else { 0.0 }).collect();
            let off: Vec<f64> = on.iter().map(|m| 1.0 - m).collect();
            Ok((Tensor::new(ell.shape(), on)?, Tensor::new(ell.shape(), off)?))
        };
        let (small_on, _) = mask(&|v| v < LINK_SERIES_CUTOFF)?;
        let (big_on, big_off) = mask(&|v| v > LINK_ASYMPTOTIC_CUTOFF)?;
        let (mid_on, mid_off) =
            mask(&|v| (LINK_SERIES_CUTOFF..=LINK_ASYMPTOTIC_CUTOFF).contains(&v))?;

        let small_in = ell.mul(&small_on)?;
        let small = small_in
            .scalar_mul(-0.5)?
            .add(&small_in.square()?.scalar_mul(1.0 / 24.0)?)?;
        let mid_in = ell.mul(&mid_on)?.add(&mid_off)?;
        let mid = mid_in.log()?.sub(&mid_in.expm1()?.log()?)?.mul(&mid_on)?;
        let big_in = ell.mul(&big_on)?.add(&big_off)?;
        let big = big_in.log()?.sub(&big_in)?.mul(&big_on)?;
        small.add(&mid)?.add(&big)?
    };
    Ok(unit.scalar_mul(beta)?)
}

/// `phi_beta` applied elementwise to a tensor of non-negative losses.
pub fn link_phi_tensor(ell: &Tensor, beta: f64) -> Result<Tensor> {
    Ok(link_phi_log_tensor(ell, beta)?.exp()?)
}

/// `-ln sigmoid(phi(l_w) - phi(l_l)) = softplus(phi(l_l) - phi(l_w))`, elementwise.
pub fn margin_loss(ell_w: &Tensor, ell_l: &Tensor, beta: f64) -> Result<Tensor> {
    let phi_w = link_phi_tensor(ell_w, beta)?;
    let phi_l = link_phi_tensor(ell_l, beta)?;
    Ok(phi_l.sub(&phi_w)?.softplus()?)
}

/// Per-row denoising error: the mean over data coordinates of `(eps - eps_theta(x_t, c, t))^2`.
/// Returns a `[B, 1]` tensor.
pub fn mse_per_row(
    net: &Network,
    schedule: &Schedule,
    c: &Tensor,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let x_t = forward_sample_rows(schedule, x0, t, eps)?;
    let pred = net.predict(schedule, &x_t, c, t)?;
    let per_row = eps.sub(&pred)?.square()?.mean_axis(1)?;
    Ok(per_row.reshape(&[t.len(), 1])?)
}

/// Simplified denoising loss averaged over the batch.
pub fn mse_loss(
    net: &Network,
    schedule: &Schedule,
    c: &Tensor,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    Ok(mse_per_row(net, schedule, c, x0, t, eps)?.mean()?)
}

/// Conditions, chosen and rejected samples of a minibatch as `[B, *]` tensors.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub c: Tensor,
    pub x_w: Tensor,
    pub x_l: Tensor,
}

impl PairBatch {
    pub fn new(triples: &[&PreferenceTriple]) -> Result<Self> {
        let first = triples
            .first()
            .ok_or_else(|| ObjectiveError::Batch("empty minibatch".into()))?;
        let (cd, d) = (first.c.len(), first.x_w.len());
        let b = triples.len();
        let mut c = Vec::with_capacity(b * cd);
        let mut x_w = Vec::with_capacity(b * d);
        let mut x_l = Vec::with_capacity(b * d);
        for tr in triples {
            if tr.c.len() != cd || tr.x_w.len() != d || tr.x_l.len() != d {
                return Err(ObjectiveError::Batch("triples have mixed widths".into()));
            }
            c.extend_from_slice(&tr.c);
            x_w.extend_from_slice(&tr.x_w);
            x_l.extend_from_slice(&tr.x_l);
        }
        Ok(PairBatch {
            c: Tensor::matrix(b, cd, c)?,
            x_w: Tensor::matrix(b, d, x_w)?,
            x_l: Tensor::matrix(b, d, x_l)?,
        })
    }

    pub fn from_triple(triple: &PreferenceTriple) -> Result<Self> {
        Self::new(&[triple])
    }

    pub fn len(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data_dim(&self) -> usize {
        self.x_w.shape()[1]
    }
}

/// Timesteps and Gaussian noise for both members of every pair.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t_w: Vec<usize>,
    pub t_l: Vec<usize>,
    pub eps_w: Tensor,
    pub eps_l: Tensor,
}

impl NoiseDraw {
    /// Uniform timesteps in `1..=T` and standard normal noise; with `share`
    /// the rejected member reuses the chosen member's draw.
    pub fn sample<R: Rng>(
        rng: &mut R,
        schedule: &Schedule,
        batch: usize,
        dim: usize,
        share: bool,
    ) -> Result<Self> {
        let steps = schedule.timesteps();
        let draw = |rng: &mut R| -> Result<(Vec<usize>, Tensor)> {
            let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
            let eps: Vec<f64> = (0..batch * dim).map(|_| StandardNormal.sample(rng)).collect();
            Ok((t, Tensor::matrix(batch, dim, eps)?))
        };
        let (t_w, eps_w) = draw(rng)?;
        let (t_l, eps_l) = if share {
            (t_w.clone(), eps_w.clone())
        } else {
            draw(rng)?
        };
        Ok(NoiseDraw {
            t_w,
            t_l,
            eps_w,
            eps_l,
        })
    }

    /// Uses the given timestep and noise for both members of a single pair.
    pub fn fixed(t: usize, eps: &[f64]) -> Result<Self> {
        let eps = Tensor::matrix(1, eps.len(), eps.to_vec())?;
        Ok(NoiseDraw {
            t_w: vec![t],
            t_l: vec![t],
            eps_w: eps.clone(),
            eps_l: eps,
        })
    }

    fn check(&self, batch: &PairBatch) -> Result<()> {
        let want = [batch.len(), batch.data_dim()];
        if self.t_w.len() != batch.len()
            || self.t_l.len() != batch.len()
            || self.eps_w.shape() != want
            || self.eps_l.shape() != want
        {
            return Err(ObjectiveError::Batch(
                "noise draw does not match the minibatch".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar loss to differentiate, plus batch-averaged components.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss: Tensor,
    pub breakdown: PairLossBreakdown,
}

fn mean_of(t: &Tensor) -> f64 {
    let v = t.values();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-row errors on chosen and rejected rows from one stacked forward pass.
fn pair_errors(
    net: &Network,
    schedule: &Schedule,
    batch: &PairBatch,
    noise: &NoiseDraw,
    weighted: bool,
) -> Result<(Tensor, Tensor)> {
    noise.check(batch)?;
    let b = batch.len();
    let c = Tensor::concat(&[&batch.c, &batch.c], 0)?;
    let x0 = Tensor::concat(&[&batch.x_w, &batch.x_l], 0)?;
    let eps = Tensor::concat(&[&noise.eps_w, &noise.eps_l], 0)?;
    let t: Vec<usize> = noise.t_w.iter().chain(&noise.t_l).copied().collect();
    let mut rows = mse_per_row(net, schedule, &c, &x0, &t, &eps)?;
    if weighted {
        let w: Vec<f64> = t.iter().map(|&s| schedule.omega(s)).collect::<std::result::Result<_, _>>()?;
        rows = rows.mul(&Tensor::matrix(2 * b, 1, w)?)?;
    }
    Ok((rows.slice(0, 0, b)?, rows.slice(0, b, 2 * b)?))
}

fn link_telemetry(ell_w: &Tensor, ell_l: &Tensor, beta: f64) -> Result<(f64, f64, f64)> {
    let (w, l) = (ell_w.detach(), ell_l.detach());
    let phi_w = link_phi_tensor(&w, beta)?;
    let phi_l = link_phi_tensor(&l, beta)?;
    let margin = phi_l.sub(&phi_w)?.softplus()?;
    Ok((mean_of(&margin), mean_of(&phi_w), mean_of(&phi_l)))
}

/// MaPO: `l_w + margin / beta`, averaged over pairs. No reference model is involved.
pub fn mapo_objective(
    net: &Network,
    schedule: &Schedule,
    batch: &PairBatch,
    noise: &NoiseDraw,
    config: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    config.validate()?;
    let (ell_w, ell_l) = pair_errors(net, schedule, batch, noise, config.weighted_mse)?;
    let phi_w = link_phi_tensor(&ell_w, config.beta)?;
    let phi_l = link_phi_tensor(&ell_l, config.beta)?;
    let margin = phi_l.sub(&phi_w)?.softplus()?;
    let per_pair = ell_w.add(&margin.scalar_mul(1.0 / config.beta)?)?;
    let loss = per_pair.mean()?;
    let (mse_w, margin_mean) = (mean_of(&ell_w), mean_of(&margin));
    Ok(ObjectiveOutput {
        breakdown: PairLossBreakdown {
            total: mse_w + margin_mean / config.beta,
            mse_w,
            mse_l: mean_of(&ell_l),
            margin: margin_mean,
            phi_w: mean_of(&phi_w),
            phi_l: mean_of(&phi_l),
        },
        loss,
    })
}

/// SFT: the denoising loss on chosen samples only.
pub fn sft_objective(
    net: &Network,
    schedule: &Schedule,
    batch: &PairBatch,
    noise: &NoiseDraw,
    config: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    config.validate()?;
    noise.check(batch)?;
    let mut rows = mse_per_row(net, schedule, &batch.c, &batch.x_w, &noise.t_w, &noise.eps_w)?;
    if config.weighted_mse {
        let w: Vec<f64> = noise
            .t_w
            .iter()
            .map(|&s| schedule.omega(s))
            .collect::<std::result::Result<_, _>>()?;
        rows = rows.mul(&Tensor::matrix(batch.len(), 1, w)?)?;
    }
    let loss = rows.mean()?;
    let mse_w = loss.item()?;
    // Rejected-side error is telemetry only and stays off the tape.
    let constants = Network::from_tensors(
        net.arch().clone(),
        net.tensors().iter().map(Tensor::detach).collect(),
    )?;
    let (_, ell_l) = pair_errors(&constants, schedule, batch, noise, config.weighted_mse)?;
    let (margin, phi_w, phi_l) = link_telemetry(&rows, &ell_l, config.beta)?;
    Ok(ObjectiveOutput {
        breakdown: PairLossBreakdown {
            total: mse_w,
            mse_w,
            mse_l: mean_of(&ell_l),
            margin,
            phi_w,
            phi_l,
        },
        loss,
    })
}

struct DpoTerms {
    ell_w: Tensor,
    ell_l: Tensor,
    /// `-beta_dpo * (delta_w - delta_l)` per pair, on the tape.
    gap: Tensor,
}

fn dpo_terms(
    net: &Network,
    reference: &ReferenceHandle,
    schedule: &Schedule,
    batch: &PairBatch,
    noise: &NoiseDraw,
    config: &ObjectiveConfig,
) -> Result<DpoTerms> {
    config.validate()?;
    let (ell_w, ell_l) = pair_errors(net, schedule, batch, noise, config.weighted_mse)?;
    let ref_net = reference.params().constants();
    let (ref_w, ref_l) = pair_errors(&ref_net, schedule, batch, noise, config.weighted_mse)?;
    // Reference terms are constants: (l_w - l_l) - (r_w - r_l).
    let ref_diff = ref_w.sub(&ref_l)?;
    let gap = ell_w
        .sub(&ell_l)?
        .sub(&ref_diff)?
        .scalar_mul(-config.beta_dpo)?;
    Ok(DpoTerms { ell_w, ell_l, gap })
}

/// Diffusion-DPO surrogate `softplus(beta_dpo * (delta_w - delta_l))`, averaged over pairs.
pub fn dpo_objective(
    net: &Network,
    reference: &ReferenceHandle,
    schedule: &Schedule,
    batch: &PairBatch,
    noise: &NoiseDraw,
    config: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    let terms = dpo_terms(net, reference, schedule, batch, noise, config)?;
    let per_pair = terms.gap.neg()?.softplus()?;
    let loss = per_pair.mean()?;
    let (margin, phi_w, phi_l) = link_telemetry(&terms.ell_w, &terms.ell_l, config.beta)?;
    Ok(ObjectiveOutput {
        breakdown: PairLossBreakdown {
            total: mean_of(&per_pair),
            mse_w: mean_of(&terms.ell_w),
            mse_l: mean_of(&terms.ell_l),
            margin,
            phi_w,
            phi_l,
        },
        loss,
    })
}

/// Implicit reward difference `r(x_w) - r(x_l) = -beta_dpo * (delta_w - delta_l)` per pair.
/// The partition function cancels in the difference.
pub fn implicit_reward_gaps(
    net: &Network,
    reference: &ReferenceHandle,
    schedule: &Schedule,
    batch: &PairBatch,
    noise: &NoiseDraw,
    config: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    Ok(dpo_terms(net, reference, schedule, batch, noise, config)?
        .gap
        .into_values())
}

/// Dispatches on `config.kind`; `reference` is required for DPO and ignored otherwise.
pub fn objective(
    net: &Network,
    reference: Option<&ReferenceHandle>,
    schedule: &Schedule,
    batch: &PairBatch,
    noise: &NoiseDraw,
    config: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    match config.kind {
        ObjectiveKind::Mapo => mapo_objective(net, schedule, batch, noise, config),
        ObjectiveKind::Sft => sft_objective(net, schedule, batch, noise, config),
        ObjectiveKind::Dpo => {
            let reference = reference.ok_or_else(|| {
                ObjectiveError::InvalidConfig("dpo requires a reference model".into())
            })?;
            dpo_objective(net, reference, schedule, batch, noise, config)
        }
    }
}

/// `softplus(-gap)`, the DPO loss implied by an implicit reward gap.
pub fn dpo_loss_from_gap(gap: f64) -> f64 {
    softplus(-gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, Architecture, DenoiserParams, OutputInit, ScheduleKind};

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn link_reference_values() {
        assert_eq!(link_phi(0.0, 3.0).unwrap(), 1.0);
        assert!((link_phi(1.0, 1.0).unwrap() - 0.581_976_706_869_326_4).abs() < 1e-15);
        assert!((link_phi(1.0, 8.0).unwrap() - 0.013_159_664_637_223_313).abs() < 1e-15);
        let arg = link_phi(0.5, 1.0).unwrap() - link_phi(1.0, 1.0).unwrap();
        assert!((arg - 0.188_770_334_399_072_7).abs() < 1e-14);
        assert!(link_phi(-1.0, 1.0).is_err());
        assert!(link_phi(1.0, 0.0).is_err());
        assert!(link_phi(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn margin_reference_values() {
        let s = |v: f64| Tensor::scalar(v);
        let m = |w, l, b| margin_loss(&s(w), &s(l), b).unwrap().item().unwrap();
        assert!((m(0.5, 1.0, 1.0) - 0.603_209_695_386_450_0).abs() < 1e-14);
        assert!((m(1.0, 0.5, 1.0) - 0.791_980_029_785_522_7).abs() < 1e-14);
        assert!((m(0.5, 1.0, 8.0) - 0.639_008_795_741_385_8).abs() < 1e-14);
        assert!((m(0.7, 0.7, 8.0) - LN2).abs() < 1e-15);
    }

    #[test]
    fn amplification_reference_values() {
        assert!((amplification_factor(1.0).unwrap() - 0.338_696_887_338_465_9).abs() < 1e-15);
        assert!((amplification_factor(5.0).unwrap() - 0.027_364_709_494_656_05).abs() < 1e-16);
        assert!((amplification_factor(1e-8).unwrap() - 0.499_999_998_333_333_3).abs() < 1e-15);
        assert!(amplification_factor(0.0).is_err());
        assert!(amplification_factor(-1.0).is_err());
    }

    #[test]
    fn tensor_link_matches_scalar_on_every_branch() {
        let ells = vec![0.0, 1e-9, 5e-6, 1e-5, 0.3, 2.0, 699.0, 700.5, 900.0];
        for beta in [1.0, 8.0] {
            let t = link_phi_log_tensor(&Tensor::vector(ells.clone()), beta).unwrap();
            for (got, &ell) in t.values().iter().zip(&ells) {
                let want = link_phi_log(ell, beta).unwrap();
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{ell}");
            }
        }
        assert!(link_phi_log_tensor(&Tensor::vector(vec![0.1, -0.1]), 1.0).is_err());
    }

    fn setup() -> (Schedule, DenoiserParams, PairBatch) {
        let schedule = make_schedule(ScheduleKind::Cosine, 16).unwrap();
        let params = DenoiserParams::init(Architecture::new(2, 4, vec![8]), 5, OutputInit::Random);
        let triples = [
            PreferenceTriple {
                c: vec![1.0, 0.0, 0.0, 0.0],
                x_w: vec![2.0, 0.1],
                x_l: vec![0.5, -1.0],
            },
            PreferenceTriple {
                c: vec![0.0, 0.0, 1.0, 0.0],
                x_w: vec![-2.0, 0.3],
                x_l: vec![-1.0, 1.2],
            },
        ];
        let batch = PairBatch::new(&triples.iter().collect::<Vec<_>>()).unwrap();
        (schedule, params, batch)
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let (schedule, params, batch) = setup();
        let reference = ReferenceHandle::snapshot(&params);
        let noise = NoiseDraw {
            t_w: vec![3, 9],
            t_l: vec![3, 9],
            eps_w: Tensor::matrix(2, 2, vec![0.1, -0.4, 1.1, 0.2]).unwrap(),
            eps_l: Tensor::matrix(2, 2, vec![0.1, -0.4, 1.1, 0.2]).unwrap(),
        };
        let config = ObjectiveConfig::new(ObjectiveKind::Dpo, 8.0);
        let out = dpo_objective(&params.constants(), &reference, &schedule, &batch, &noise, &config)
            .unwrap();
        assert!((out.loss.item().unwrap() - LN2).abs() < 1e-12);
        let gaps =
            implicit_reward_gaps(&params.constants(), &reference, &schedule, &batch, &noise, &config)
                .unwrap();
        assert_eq!(gaps, vec![0.0, 0.0]);
    }

    #[test]
    fn mapo_breakdown_is_consistent() {
        let (schedule, params, batch) = setup();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let noise = NoiseDraw::sample(&mut rng, &schedule, 2, 2, false).unwrap();
        let config = ObjectiveConfig::new(ObjectiveKind::Mapo, 8.0);
        let out = mapo_objective(&params.constants(), &schedule, &batch, &noise, &config).unwrap();
        let b = out.breakdown;
        assert!((b.total - (b.mse_w + b.margin / 8.0)).abs() < 1e-12);
        assert!((out.loss.item().unwrap() - b.total).abs() < 1e-12);
        assert!(b.phi_w > 0.0 && b.phi_w < 1.0 && b.phi_l > 0.0 && b.phi_l < 1.0);
    }

    #[test]
    fn dispatch_requires_reference_for_dpo() {
        let (schedule, params, batch) = setup();
        let noise = NoiseDraw {
            t_w: vec![2, 2],
            t_l: vec![2, 2],
            eps_w: Tensor::zeros(&[2, 2]),
            eps_l: Tensor::zeros(&[2, 2]),
        };
        let config = ObjectiveConfig::new(ObjectiveKind::Dpo, 8.0);
        assert!(matches!(
            objective(&params.constants(), None, &schedule, &batch, &noise, &config),
            Err(ObjectiveError::InvalidConfig(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = ObjectiveConfig::new(ObjectiveKind::Mapo, 0.0);
        assert!(c.validate().is_err());
        c.beta = 1.0;
        c.beta_dpo = -1.0;
        assert!(c.validate().is_err());
        assert_eq!("dpo".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::Dpo);
        assert!("kto".parse::<ObjectiveKind>().is_err());
    }
}
