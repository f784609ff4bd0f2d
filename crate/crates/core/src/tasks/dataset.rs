use std::fs;
use std::io;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{PreferenceTriple, TaskSpec};

pub const DATASET_MAGIC: &[u8; 8] = b"MAPODS1\0";
pub const DATASET_SCHEMA_VERSION: u32 = 1;

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);
const HEADER_LEN: usize = 8 + 4 + 8 + 4 * 3 + 32;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a dataset file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported dataset schema version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset is truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dataset checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("dataset is inconsistent: {0}")]
    Inconsistent(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub seed: u64,
    pub dim: u32,
    pub cond_dim: u32,
    pub count: u32,
    pub task_fingerprint: [u8; 32],
}

/// Preference triples plus the provenance needed to tie them to a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<PreferenceTriple>,
}

impl Dataset {
    pub fn new(task: &TaskSpec, seed: u64, records: Vec<PreferenceTriple>) -> Self {
        Dataset {
            header: DatasetHeader {
                version: DATASET_SCHEMA_VERSION,
                seed,
                dim: task.dim as u32,
                cond_dim: task.cond_dim as u32,
                count: records.len() as u32,
                task_fingerprint: task.fingerprint(),
            },
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn matches(&self, task: &TaskSpec) -> bool {
        self.header.task_fingerprint == task.fingerprint()
    }

    fn check(&self) -> Result<(), DatasetError> {
        let (d, cd) = (self.header.dim as usize, self.header.cond_dim as usize);
        if self.header.count as usize != self.records.len() {
            return Err(DatasetError::Inconsistent(format!(
                "header says {} records, found {}",
                self.header.count,
                self.records.len()
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.c.len() != cd || r.x_w.len() != d || r.x_l.len() != d {
                return Err(DatasetError::Inconsistent(format!(
                    "record {i} has the wrong width"
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        self.check()?;
        let h = &self.header;
        let width = h.cond_dim as usize + 2 * h.dim as usize;
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * width * 8 + 8);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend(h.version.to_le_bytes());
        out.extend(h.seed.to_le_bytes());
        out.extend(h.dim.to_le_bytes());
        out.extend(h.cond_dim.to_le_bytes());
        out.extend(h.count.to_le_bytes());
        out.extend_from_slice(&h.task_fingerprint);
        for r in &self.records {
            for v in r.c.iter().chain(&r.x_w).chain(&r.x_l) {
                out.extend(v.to_le_bytes());
            }
        }
        let crc = CHECKSUM.checksum(&out);
        out.extend(crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        if bytes.len() < HEADER_LEN + 8 {
            return Err(DatasetError::Truncated {
                expected: HEADER_LEN + 8,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != DATASET_SCHEMA_VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let seed = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let (dim, cond_dim, count) = (u32_at(20), u32_at(24), u32_at(28));
        let task_fingerprint: [u8; 32] = bytes[32..64].try_into().unwrap();
        let width = cond_dim as usize + 2 * dim as usize;
        let expected = (count as usize)
            .checked_mul(width * 8)
            .and_then(|b| b.checked_add(HEADER_LEN + 8))
            .ok_or_else(|| DatasetError::Inconsistent("record count overflows".into()))?;
        if bytes.len() < expected {
            return Err(DatasetError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DatasetError::Inconsistent(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - expected
            )));
        }
        let body = &bytes[..expected - 8];
        let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
        let computed = CHECKSUM.checksum(body);
        if stored != computed {
            return Err(DatasetError::ChecksumMismatch { stored, computed });
        }
        let values: Vec<f64> = body[HEADER_LEN..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let (d, cd) = (dim as usize, cond_dim as usize);
        let records = if width == 0 {
            Vec::new()
        } else {
            values
                .chunks_exact(width)
                .map(|r| PreferenceTriple {
                    c: r[..cd].to_vec(),
                    x_w: r[cd..cd + d].to_vec(),
                    x_l: r[cd + d..].to_vec(),
                })
                .collect()
        };
        let ds = Dataset {
            header: DatasetHeader {
                version,
                seed,
                dim,
                cond_dim,
                count,
                task_fingerprint,
            },
            records,
        };
        ds.check()?;
        Ok(ds)
    }
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    Dataset::from_bytes(&fs::read(path)?)
}

// JSON mirror of the binary layout. Floats are stored as hexadecimal bit
// patterns so that a round trip is exact, with a decimal copy for humans.
#[derive(Serialize, Deserialize)]
struct JsonDataset {
    version: u32,
    seed: u64,
    dim: u32,
    cond_dim: u32,
    task_fingerprint: String,
    records: Vec<JsonRecord>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    c: Vec<String>,
    x_w: Vec<String>,
    x_l: Vec<String>,
    #[serde(default, skip_deserializing)]
    decimal: Option<[Vec<f64>; 3]>,
}

fn hex_bits(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{:016x}", x.to_bits())).collect()
}

fn parse_bits(v: &[String]) -> Result<Vec<f64>, DatasetError> {
    v.iter()
        .map(|s| {
            u64::from_str_radix(s, 16)
                .map(f64::from_bits)
                .map_err(|_| DatasetError::Inconsistent(format!("bad float encoding `{s}`")))
        })
        .collect()
}

pub fn save_dataset_json(path: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    dataset.check()?;
    let h = &dataset.header;
    let doc = JsonDataset {
        version: h.version,
        seed: h.seed,
        dim: h.dim,
        cond_dim: h.cond_dim,
        task_fingerprint: h.task_fingerprint.iter().map(|b| format!("{b:02x}")).collect(),
        records: dataset
            .records
            .iter()
            .map(|r| JsonRecord {
                c: hex_bits(&r.c),
                x_w: hex_bits(&r.x_w),
                x_l: hex_bits(&r.x_l),
                decimal: Some([r.c.clone(), r.x_w.clone(), r.x_l.clone()]),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

pub fn load_dataset_json(path: &Path) -> Result<Dataset, DatasetError> {
    let doc: JsonDataset = serde_json::from_slice(&fs::read(path)?)?;
    if doc.version != DATASET_SCHEMA_VERSION {
        return Err(DatasetError::UnsupportedVersion(doc.version));
    }
    let fp = &doc.task_fingerprint;
    if fp.len() != 64 {
        return Err(DatasetError::Inconsistent("fingerprint must be 64 hex digits".into()));
    }
    let mut task_fingerprint = [0u8; 32];
    for (i, b) in task_fingerprint.iter_mut().enumerate() {
        *b = u8::from_str_radix(&fp[2 * i..2 * i + 2], 16)
            .map_err(|_| DatasetError::Inconsistent("fingerprint is not hex".into()))?;
    }
    let records = doc
        .records
        .iter()
        .map(|r| {
            Ok(PreferenceTriple {
                c: parse_bits(&r.c)?,
                x_w: parse_bits(&r.x_w)?,
                x_l: parse_bits(&r.x_l)?,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let ds = Dataset {
        header: DatasetHeader {
            version: doc.version,
            seed: doc.seed,
            dim: doc.dim,
            cond_dim: doc.cond_dim,
            count: records.len() as u32,
            task_fingerprint,
        },
        records,
    };
    ds.check()?;
    Ok(ds)
}
