//! Binary checkpoint format:
//!
//! ```text
//! "PYRX" | u32 version | u32 json_len | json metadata
//! repeated: u32 name_len | name | u32 rank | u32 dims[rank] | f32 payload
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DiscriminatorConfig, ModelConfig};
use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PYRX";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    #[serde(default)]
    discriminator: Option<DiscriminatorConfig>,
    tensor_count: usize,
    #[serde(default)]
    training: Option<serde_json::Value>,
}

/// Model configuration plus every stored tensor, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub discriminator: Option<DiscriminatorConfig>,
    /// Opaque trainer state used for resuming.
    pub training: Option<serde_json::Value>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!(
                "truncated while reading {what} at byte {} ({} bytes needed, {} left)",
                self.pos,
                n,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            model: self.model.clone(),
            discriminator: self.discriminator.clone(),
            tensor_count: self.tensors.len(),
            training: self.training.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let payload: usize = self.tensors.iter().map(|(n, t)| n.len() + 24 + 4 * t.data().len()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.shape().dims();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.fail(format!("bad magic {magic:02x?}, expected \"PYRX\"")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(format!(
                "unsupported format version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let json_len = r.u32("metadata length")? as usize;
        let json = r.take(json_len, "metadata")?;
        let meta: Metadata =
            serde_json::from_slice(json).map_err(|e| r.fail(format!("invalid metadata: {e}")))?;
        meta.model
            .validate()
            .map_err(|e| r.fail(format!("invalid model config: {e}")))?;

        let mut tensors = Vec::with_capacity(meta.tensor_count.min(1 << 16));
        for i in 0..meta.tensor_count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.fail(format!("tensor {i} has a non-UTF-8 name")))?
                .to_owned();
            let rank = r.u32("tensor rank")? as usize;
            if rank == 0 || rank > 4 {
                return Err(r.fail(format!("tensor {name} has unsupported rank {rank}")));
            }
            let mut dims = [1usize; 4];
            for d in dims.iter_mut().skip(4 - rank) {
                *d = r.u32("tensor dims")? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let bytes_needed = shape.numel().checked_mul(4).ok_or_else(|| r.fail("tensor too large"))?;
            let raw = r.take(bytes_needed, &format!("payload of {name}"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.fail(format!(
                "{} trailing bytes after {} tensors",
                bytes.len() - r.pos,
                meta.tensor_count
            )));
        }
        Ok(Self {
            model: meta.model,
            discriminator: meta.discriminator,
            training: meta.training,
            tensors,
        })
    }

    /// Writes via a temporary file so an interrupted save never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp: PathBuf = {
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".tmp");
            path.with_file_name(name)
        };
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Load that also requires the stored model config to equal `expected`.
    pub fn load_strict(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let ck = Self::load(path)?;
        if &ck.model != expected {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "config mismatch: checkpoint has {}, expected {}",
                    serde_json::to_string(&ck.model)?,
                    serde_json::to_string(expected)?
                ),
            });
        }
        Ok(ck)
    }
}
