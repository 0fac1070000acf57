//! Single-file checkpoint container.
//!
//! Layout (little-endian): magic, format version, epoch, best validation
//! score, config digest, config JSON, parameter entries, optimizer entries,
//! then a SHA-256 over every preceding byte. Each entry is its name, a dtype
//! tag, the rank, the dimensions and the raw values.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::RunConfig;
use crate::nn::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CRKSEGCK";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint integrity check failed: stored {stored}, computed {computed}")]
    Integrity { stored: String, computed: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    /// Momentum buffers keyed by parameter name.
    pub optimizer_state: BTreeMap<String, Tensor>,
    /// Completed epochs.
    pub epoch: u64,
    /// Best validation mask AP seen so far, if validation ran.
    pub best_score: Option<f64>,
    pub config: RunConfig,
    pub config_digest: String,
}

impl Checkpoint {
    pub fn new(params: ParamStore, optimizer_state: BTreeMap<String, Tensor>, epoch: u64, config: &RunConfig) -> Self {
        Self {
            params,
            optimizer_state,
            epoch,
            best_score: None,
            config: config.clone(),
            config_digest: config.digest(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_score.unwrap_or(f64::NAN).to_le_bytes());
        put_str(&mut out, &self.config_digest);
        put_str(&mut out, &serde_json::to_string(&self.config).expect("RunConfig serializes"));
        put_entries(&mut out, self.params.iter());
        put_entries(&mut out, self.optimizer_state.iter());
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + CHECKSUM_LEN {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(CheckpointError::Integrity {
                stored: hex::encode(stored),
                computed: hex::encode(computed),
            });
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let epoch = r.u64()?;
        let best = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config_digest = r.string()?;
        let config: RunConfig =
            serde_json::from_str(&r.string()?).map_err(|e| CheckpointError::Format(format!("config: {e}")))?;
        let mut params = ParamStore::default();
        for (name, t) in r.entries()? {
            params.insert(name, t);
        }
        let optimizer_state = r.entries()?.into_iter().collect();
        if r.pos != body.len() {
            return Err(CheckpointError::Format("trailing bytes before checksum".into()));
        }
        Ok(Self {
            params,
            optimizer_state,
            epoch,
            best_score: (!best.is_nan()).then_some(best),
            config,
            config_digest,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_entries<'a>(out: &mut Vec<u8>, entries: impl Iterator<Item = (&'a String, &'a Tensor)>) {
    let entries: Vec<_> = entries.collect();
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        put_str(out, name);
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Format(e.to_string()))
    }

    fn entries(&mut self) -> Result<Vec<(String, Tensor)>, CheckpointError> {
        let n = self.len()?;
        let mut out = Vec::new();
        for _ in 0..n {
            let name = self.string()?;
            let dtype = self.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(CheckpointError::Format(format!("entry {name}: unknown dtype {dtype}")));
            }
            let ndim = self.u32()? as usize;
            let dims = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>, _>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Format(format!("entry {name}: size overflow")))?;
            let raw = self.take(count.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            out.push((name, Tensor::from_vec(&dims, data)));
        }
        Ok(out)
    }
}
