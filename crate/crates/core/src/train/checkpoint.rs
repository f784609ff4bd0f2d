use std::fs;
use std::io;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::adam::AdamState;
use crate::diffusion::{Architecture, DenoiserParams, ScheduleKind};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAPOCK1\0";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint schema version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue a run bit-identically, plus the model's schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub schedule_kind: ScheduleKind,
    pub timesteps: u32,
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub rng: RngState,
    pub config_fingerprint: [u8; 32],
    /// Frozen copy of the initial parameters: the DPO reference and the evaluation baseline.
    pub anchor: Option<DenoiserParams>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
    fn buffers(&mut self, b: &[Vec<f64>]) {
        self.u32(b.len() as u32);
        for v in b {
            self.f64s(v);
        }
    }
    fn params(&mut self, p: &DenoiserParams) {
        let a = p.arch();
        self.u32(a.data_dim as u32);
        self.u32(a.cond_dim as u32);
        self.u32(a.hidden.len() as u32);
        for &h in &a.hidden {
            self.u32(h as u32);
        }
        self.buffers(p.buffers());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn array32(&mut self) -> Result<[u8; 32], CheckpointError> {
        Ok(self.take(32)?.try_into().unwrap())
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn buffers(&mut self) -> Result<Vec<Vec<f64>>, CheckpointError> {
        let n = self.u32()?;
        (0..n).map(|_| self.f64s()).collect()
    }
    fn params(&mut self) -> Result<DenoiserParams, CheckpointError> {
        let data_dim = self.u32()? as usize;
        let cond_dim = self.u32()? as usize;
        let layers = self.u32()?;
        let hidden = (0..layers)
            .map(|_| self.u32().map(|h| h as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let buffers = self.buffers()?;
        DenoiserParams::from_buffers(Architecture::new(data_dim, cond_dim, hidden), buffers)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_SCHEMA_VERSION);
        w.u64(0); // total length, patched below
        w.u64(self.step);
        w.u8(match self.schedule_kind {
            ScheduleKind::Cosine => 0,
            ScheduleKind::Linear => 1,
        });
        w.u32(self.timesteps);
        w.0.extend_from_slice(&self.config_fingerprint);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend(self.rng.word_pos.to_le_bytes());
        w.params(&self.params);
        w.u64(self.adam.t);
        w.buffers(&self.adam.m);
        w.buffers(&self.adam.v);
        match &self.anchor {
            Some(a) => {
                w.u8(1);
                w.params(a);
            }
            None => w.u8(0),
        }
        let total = (w.0.len() + 8) as u64;
        w.0[12..20].copy_from_slice(&total.to_le_bytes());
        let crc = CHECKSUM.checksum(&w.0);
        w.u64(crc);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 28 {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let total = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if (bytes.len() as u64) < total {
            return Err(CheckpointError::Truncated);
        }
        if bytes.len() as u64 > total {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = CHECKSUM.checksum(body);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 20 };
        let step = r.u64()?;
        let schedule_kind = match r.u8()? {
            0 => ScheduleKind::Cosine,
            1 => ScheduleKind::Linear,
            other => return Err(CheckpointError::Malformed(format!("schedule tag {other}"))),
        };
        let timesteps = r.u32()?;
        let config_fingerprint = r.array32()?;
        let rng = RngState {
            seed: r.array32()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
        };
        let params = r.params()?;
        let adam = AdamState {
            t: r.u64()?,
            m: r.buffers()?,
            v: r.buffers()?,
        };
        if !adam.matches(params.buffers()) {
            return Err(CheckpointError::Malformed(
                "optimizer state does not match parameters".into(),
            ));
        }
        let anchor = match r.u8()? {
            0 => None,
            1 => Some(r.params()?),
            other => return Err(CheckpointError::Malformed(format!("anchor tag {other}"))),
        };
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint {
            step,
            schedule_kind,
            timesteps,
            params,
            adam,
            rng,
            config_fingerprint,
            anchor,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
