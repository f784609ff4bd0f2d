use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter buffer plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(buffers: &[Vec<f64>]) -> Self {
        let z: Vec<Vec<f64>> = buffers.iter().map(|b| vec![0.0; b.len()]).collect();
        AdamState {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    pub fn matches(&self, buffers: &[Vec<f64>]) -> bool {
        self.m.len() == buffers.len()
            && self.v.len() == buffers.len()
            && self
                .m
                .iter()
                .zip(&self.v)
                .zip(buffers)
                .all(|((m, v), b)| m.len() == b.len() && v.len() == b.len())
    }
}

/// One bias-corrected Adam update in place.
///
/// # Panics
/// If `params`, `grads` and `state` do not have matching buffer lengths.
pub fn adam_step(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) {
    assert!(state.matches(params), "optimizer state does not match parameters");
    assert_eq!(params.len(), grads.len(), "one gradient per parameter buffer");
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powf(state.t as f64);
    let bc2 = 1.0 - hyper.beta2.powf(state.t as f64);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        assert_eq!(p.len(), g.len(), "gradient shape mismatch");
        for i in 0..p.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            if hyper.weight_decay != 0.0 {
                p[i] -= lr * hyper.weight_decay * p[i];
            }
            p[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

/// Cosine decay from `lr` at step 0 to `min_fraction * lr` at `total_steps`.
pub fn cosine_lr(lr: f64, min_fraction: f64, step: usize, total_steps: usize) -> f64 {
    let progress = if total_steps == 0 {
        1.0
    } else {
        (step as f64 / total_steps as f64).min(1.0)
    };
    let floor = lr * min_fraction;
    floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![vec![1.0, -2.0]];
        let mut s = AdamState::zeros_like(&p);
        s.m[0] = vec![0.5, 0.5];
        adam_step(&mut p, &[vec![0.0, 0.0]], &mut s, 0.1, &AdamHyper::default());
        assert_ne!(p[0], vec![1.0, -2.0]); // stale momentum still moves
        let mut p = vec![vec![1.0, -2.0]];
        let mut s = AdamState::zeros_like(&p);
        adam_step(&mut p, &[vec![0.0, 0.0]], &mut s, 0.1, &AdamHyper::default());
        assert_eq!(p[0], vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        let mut p = vec![vec![0.0; 4]];
        let mut s = AdamState::zeros_like(&p);
        let g = vec![vec![3.0, -1e-3, 1e4, -7.0]];
        adam_step(&mut p, &g, &mut s, 0.01, &AdamHyper::default());
        for (d, gi) in p[0].iter().zip(&g[0]) {
            assert!(d.abs() <= 0.01 * (1.0 + 1e-6));
            assert_eq!(d.signum(), -gi.signum());
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.1, 0, 100), 1.0);
        assert!((cosine_lr(1.0, 0.1, 100, 100) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(1.0, 0.1, 50, 100) - 0.55).abs() < 1e-15);
    }
}
