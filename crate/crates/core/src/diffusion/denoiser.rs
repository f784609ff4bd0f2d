use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DiffusionError, NoisePredictor, Schedule};
use crate::ndgrad::{Tape, Tensor};

/// Width of the sinusoidal timestep features.
pub const TIME_EMBED_DIM: usize = 8;

/// Layout of the conditional MLP `[x_t | c | embed(t)] -> eps`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(data_dim: usize, cond_dim: usize, hidden: Vec<usize>) -> Self {
        Architecture {
            data_dim,
            cond_dim,
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.cond_dim + TIME_EMBED_DIM
    }

    /// `(fan_in, fan_out)` of every linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.data_dim));
        dims
    }

    /// Shapes of the parameter buffers in storage order (weight, bias, weight, bias, ...).
    pub fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims()
            .into_iter()
            .flat_map(|(i, o)| [vec![i, o], vec![1, o]])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputInit {
    #[default]
    Random,
    /// Final layer starts at zero so the initial prediction is exactly zero.
    Zero,
}

/// Trainable weights of the denoiser, stored as plain buffers so they can cross threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    arch: Architecture,
    buffers: Vec<Vec<f64>>,
}

impl DenoiserParams {
    /// Glorot-uniform weights and zero biases.
    pub fn init(arch: Architecture, seed: u64, output: OutputInit) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        let mut buffers = Vec::with_capacity(2 * dims.len());
        for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = if layer == last && output == OutputInit::Zero {
                vec![0.0; fan_in * fan_out]
            } else {
                (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect()
            };
            buffers.push(weights);
            buffers.push(vec![0.0; fan_out]);
        }
        DenoiserParams { arch, buffers }
    }

    pub fn from_buffers(arch: Architecture, buffers: Vec<Vec<f64>>) -> Result<Self, DiffusionError> {
        let shapes = arch.buffer_shapes();
        if shapes.len() != buffers.len()
            || shapes
                .iter()
                .zip(&buffers)
                .any(|(s, b)| s.iter().product::<usize>() != b.len())
        {
            return Err(DiffusionError::InvalidArgument(
                "parameter buffers do not match the architecture".into(),
            ));
        }
        Ok(DenoiserParams { arch, buffers })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.buffers.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers.iter().flatten().all(|v| v.is_finite())
    }

    /// SHA-256 over the little-endian bit patterns of every parameter.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for b in &self.buffers {
            h.update((b.len() as u64).to_le_bytes());
            for v in b {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Untracked network for inference.
    pub fn constants(&self) -> Network {
        self.network(|t| t)
    }

    /// Network whose parameters are registered on `tape`; `ParamId(i)` is buffer `i`.
    pub fn track(&self, tape: &Tape) -> Network {
        self.network(|t| tape.param(t))
    }

    fn network(&self, mut wrap: impl FnMut(Tensor) -> Tensor) -> Network {
        let tensors = self
            .arch
            .buffer_shapes()
            .iter()
            .zip(&self.buffers)
            .map(|(shape, b)| wrap(Tensor::new(shape, b.clone()).expect("buffer shape")))
            .collect();
        Network {
            arch: self.arch.clone(),
            tensors,
        }
    }
}

/// Frozen snapshot of a denoiser used as the reference model.
#[derive(Debug, Clone)]
pub struct ReferenceHandle {
    params: Arc<DenoiserParams>,
    checksum: [u8; 32],
}

impl ReferenceHandle {
    pub fn snapshot(params: &DenoiserParams) -> Self {
        ReferenceHandle {
            checksum: params.checksum(),
            params: Arc::new(params.clone()),
        }
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn checksum(&self) -> [u8; 32] {
        self.checksum
    }

    /// Recomputes the checksum and compares it with the one taken at creation.
    pub fn verify(&self) -> bool {
        self.params.checksum() == self.checksum
    }
}

/// Denoiser weights materialized as tensors, either tracked or constant.
pub struct Network {
    arch: Architecture,
    tensors: Vec<Tensor>,
}

/// Sinusoidal features of `t / T` at frequencies `pi * 2^k`.
pub fn time_embedding(t: usize, timesteps: usize) -> [f64; TIME_EMBED_DIM] {
    let s = t as f64 / timesteps as f64;
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..TIME_EMBED_DIM / 2 {
        let w = std::f64::consts::PI * (1u32 << k) as f64;
        out[2 * k] = (w * s).sin();
        out[2 * k + 1] = (w * s).cos();
    }
    out
}

impl Network {
    /// Wraps tensors laid out like [`Architecture::buffer_shapes`].
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self, DiffusionError> {
        let shapes = arch.buffer_shapes();
        if shapes.len() != tensors.len()
            || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape())
        {
            return Err(DiffusionError::Shape(
                "tensors do not match the architecture's buffer shapes".into(),
            ));
        }
        Ok(Network { arch, tensors })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Predicts the noise for a batch: `x_t` is `[B, data_dim]`, `c` is `[B, cond_dim]`
    /// and `t` holds one timestep per row.
    pub fn predict(
        &self,
        schedule: &Schedule,
        x_t: &Tensor,
        c: &Tensor,
        t: &[usize],
    ) -> Result<Tensor, DiffusionError> {
        let rows = t.len();
        let arch = &self.arch;
        if x_t.shape() != [rows, arch.data_dim] || c.shape() != [rows, arch.cond_dim] {
            return Err(DiffusionError::Shape(format!(
                "expected x_t [{rows}, {}] and c [{rows}, {}], got {:?} and {:?}",
                arch.data_dim,
                arch.cond_dim,
                x_t.shape(),
                c.shape()
            )));
        }
        let mut emb = Vec::with_capacity(rows * TIME_EMBED_DIM);
        for &step in t {
            schedule.check(step)?;
            emb.extend_from_slice(&time_embedding(step, schedule.timesteps()));
        }
        let emb = Tensor::matrix(rows, TIME_EMBED_DIM, emb)?;
        let ones = Tensor::full(&[rows, 1], 1.0);
        let mut h = Tensor::concat(&[x_t, c, &emb], 1)?;
        let layers = self.tensors.len() / 2;
        for layer in 0..layers {
            let (w, b) = (&self.tensors[2 * layer], &self.tensors[2 * layer + 1]);
            h = h.matmul(w)?.add(&ones.matmul(b)?)?;
            if layer + 1 < layers {
                // SiLU
                h = h.mul(&h.sigmoid()?)?;
            }
        }
        Ok(h)
    }
}

impl NoisePredictor for Network {
    fn predict_noise(
        &self,
        schedule: &Schedule,
        x_t: &Tensor,
        c: &Tensor,
        t: &[usize],
    ) -> Result<Tensor, DiffusionError> {
        self.predict(schedule, x_t, c, t)
    }
}

impl NoisePredictor for DenoiserParams {
    fn predict_noise(
        &self,
        schedule: &Schedule,
        x_t: &Tensor,
        c: &Tensor,
        t: &[usize],
    ) -> Result<Tensor, DiffusionError> {
        self.constants().predict(schedule, x_t, c, t)
    }
}

/// Noise prediction for a single point, returned as a `[1, data_dim]` tensor.
pub fn denoise_predict(
    params: &DenoiserParams,
    schedule: &Schedule,
    x_t: &[f64],
    c: &[f64],
    t: usize,
) -> Result<Tensor, DiffusionError> {
    let x = Tensor::matrix(1, x_t.len(), x_t.to_vec())?;
    let c = Tensor::matrix(1, c.len(), c.to_vec())?;
    params.constants().predict(schedule, &x, &c, &[t])
}
