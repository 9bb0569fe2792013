//! Binary container shared by model checkpoints (`FTLM`) and adapter files
//! (`FTLA`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic[4] | version u32 = 1 | config_len u32 | config (UTF-8 JSON)
//! | param_count u32
//! | per param: name_len u16 | name (UTF-8) | rank u8 | extent u32 × rank | f32 × ∏extents
//! | crc32 u32 (over every preceding byte)
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Tensor, MAX_RANK};

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_MAGIC: [u8; 4] = *b"FTLM";
pub const ADAPTER_MAGIC: [u8; 4] = *b"FTLA";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: [u8; 4] },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter list mismatch: expected {expected:?}, found {found:?}")]
    ParamNames {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config_json: String,
    pub params: Vec<(String, Tensor)>,
}

pub fn encode(magic: [u8; 4], config_json: &str, params: &[(String, &Tensor)]) -> Vec<u8> {
    let payload: usize = params.iter().map(|(n, t)| 2 + n.len() + 1 + 4 * t.rank() + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(16 + config_json.len() + payload + 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &extent in tensor.shape() {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a container. Magic and version are checked first so that foreign
/// or newer files get a specific error; the checksum is verified before any
/// length field is trusted.
pub fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<Container, CheckpointError> {
    let mut header = Reader { bytes, pos: 0 };
    let found = header.take(4)?;
    if found != magic {
        return Err(CheckpointError::BadMagic {
            found: found.to_vec(),
            expected: magic,
        });
    }
    let version = header.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated {
            offset: 8,
            needed: 4,
            available: bytes.len() - 8,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let config_len = r.u32()? as usize;
    let config_json = std::str::from_utf8(r.take(config_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("config is not UTF-8: {e}")))?
        .to_owned();
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("parameter name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u8()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(CheckpointError::Malformed(format!("parameter {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| CheckpointError::Malformed(format!("parameter {name} shape overflows")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| {
            CheckpointError::Malformed(format!("parameter {name} shape overflows"))
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("parameter {name}: {e}")))?;
        params.push((name, tensor));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes before checksum",
            body.len() - r.pos
        )));
    }
    Ok(Container { config_json, params })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Checks that `found` carries exactly the expected names and shapes, in order.
pub(crate) fn expect_layout(
    found: &[(String, Tensor)],
    expected: &[(String, Vec<usize>)],
) -> Result<(), CheckpointError> {
    if found.len() != expected.len() || found.iter().zip(expected).any(|((a, _), (b, _))| a != b) {
        return Err(CheckpointError::ParamNames {
            expected: expected.iter().map(|(n, _)| n.clone()).collect(),
            found: found.iter().map(|(n, _)| n.clone()).collect(),
        });
    }
    for ((name, tensor), (_, shape)) in found.iter().zip(expected) {
        if tensor.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: tensor.shape().to_vec(),
            });
        }
    }
    Ok(())
}
