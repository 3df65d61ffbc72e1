//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FVLB1" | version: u32 | n_tensors: u32
//! per tensor: name_len: u32 | name (utf-8) | ndim: u32 | dims: u64 × ndim
//! payload_len: u64 | payload: f64 × payload_len
//! ```
//!
//! A JSON sidecar (`<path>.json`) carries the model config and the training
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

use super::config::ModelConfig;
use super::params::{Layout, Params};

pub const MAGIC: &[u8; 5] = b"FVLB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    pub scalar: String,
    pub config: ModelConfig,
    pub manifest: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode<T: Scalar>(params: &Params<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.flat().len() * 8 + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let entries: Vec<_> = params.layout().entries().collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (id, shape, _) in &entries {
        let name = id.name();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in *shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.flat().len() as u64).to_le_bytes());
    for x in params.flat() {
        out.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    out
}

pub fn save_checkpoint<T: Scalar>(params: &Params<T>, path: &Path, manifest: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, &encode(params))?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        scalar: T::NAME.to_string(),
        config: params.config.clone(),
        manifest,
    };
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                offset: self.offset,
                msg: format!("truncated file while reading {what}"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint body against the layout implied by `config`.
pub fn decode<T: Scalar>(bytes: &[u8], config: &ModelConfig) -> Result<Params<T>> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: "bad magic bytes (expected FVLB1)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let layout = Layout::new(config);
    let expected: Vec<_> = layout.entries().collect();
    let at = r.offset;
    let n_tensors = r.u32("tensor count")? as usize;
    if n_tensors != expected.len() {
        return Err(Error::Checkpoint {
            offset: at,
            msg: format!("header lists {n_tensors} tensors, config implies {}", expected.len()),
        });
    }
    for (id, shape, _) in &expected {
        let at = r.offset;
        let len = r.u32("name length")? as usize;
        let name = r.take(len, "tensor name")?;
        if name != id.name().as_bytes() {
            return Err(Error::Checkpoint {
                offset: at,
                msg: format!("expected tensor {}, found {}", id.name(), String::from_utf8_lossy(name)),
            });
        }
        let at = r.offset;
        let ndim = r.u32("ndim")? as usize;
        let dims = (0..ndim).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != *shape {
            return Err(Error::Checkpoint {
                offset: at,
                msg: format!("tensor {} has shape {dims:?}, config implies {shape:?}", id.name()),
            });
        }
    }
    let at = r.offset;
    let count = r.u64("payload length")? as usize;
    if count != layout.total() {
        return Err(Error::Checkpoint {
            offset: at,
            msg: format!("payload holds {count} values, config implies {}", layout.total()),
        });
    }
    let payload = r.take(count * 8, "payload")?;
    if r.offset != bytes.len() {
        return Err(Error::Checkpoint {
            offset: r.offset,
            msg: "trailing bytes after payload".into(),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Params::from_flat(config, data)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Params<T>, Sidecar)> {
    let side = sidecar_path(path);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint {}", path.display())));
    }
    if !side.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint sidecar {}", side.display())));
    }
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&side)?)?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: sidecar.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let params = decode(&fs::read(path)?, &sidecar.config)?;
    Ok((params, sidecar))
}
