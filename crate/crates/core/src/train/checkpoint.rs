//! Binary checkpoint container.
//!
//! Layout (little endian): `SCPF`, `u32` version, `u64` config digest,
//! `u32` array count, then per array `u16` name length, name bytes, `u8`
//! dtype (0 = f32, 1 = f64), `u8` rank, rank × `u64` dims and the payload.
//! A trailing `u64` FNV-1a checksum covers every preceding byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::fnv1a64;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCPF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint was written for config digest {found:016x}, current config is {expected:016x}")]
    DigestMismatch { expected: u64, found: u64 },
    #[error("checkpoint truncated at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint lacks array `{0}`")]
    MissingArray(String),
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Storage precision of one array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Named arrays tagged with the digest of the config that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub digest: u64,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(digest: u64) -> Self {
        Self {
            digest,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.arrays
            .get(name)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    /// Array `name`, required to have `shape`.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor, CheckpointError> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    /// Serialises every array as f64.
    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            let len = u16::try_from(name.len())
                .map_err(|_| CheckpointError::Malformed(format!("array name `{name}` too long")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| CheckpointError::Malformed(format!("array `{name}` rank too large")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(1);
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    /// Parses `bytes`. When `expected_digest` is given it must match unless `force`.
    pub fn decode(bytes: &[u8], expected_digest: Option<u64>, force: bool) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, at: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if bytes.len() < 28 {
            return Err(CheckpointError::Truncated {
                offset: bytes.len(),
                needed: 28 - bytes.len(),
            });
        }
        let body = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body..].try_into().expect("8 bytes"));
        let computed = fnv1a64(&bytes[..body]);
        let digest = r.u64()?;
        let count = r.u32()?;
        r.bytes = &bytes[..body];
        let mut arrays = BTreeMap::new();
        let parsed = (|| {
            for _ in 0..count {
                let len = r.u16()? as usize;
                let name = String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?;
                let dtype = match r.u8()? {
                    0 => Dtype::F32,
                    1 => Dtype::F64,
                    d => return Err(CheckpointError::Malformed(format!("dtype {d} on `{name}`"))),
                };
                let rank = r.u8()? as usize;
                let shape = (0..rank)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Result<Vec<_>, _>>()?;
                let n = shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` shape overflows")))?;
                let data: Vec<f64> = match dtype {
                    Dtype::F64 => r
                        .take(n.saturating_mul(8))?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect(),
                    Dtype::F32 => r
                        .take(n.saturating_mul(4))?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                        .collect(),
                };
                let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
                arrays.insert(name, t);
            }
            if r.at != body {
                return Err(CheckpointError::Malformed(format!(
                    "{} unexpected bytes before the checksum",
                    body - r.at
                )));
            }
            Ok(())
        })();
        // A corrupted length field shows up as truncation; report the checksum first.
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        parsed?;
        if let Some(expected) = expected_digest {
            if expected != digest {
                if !force {
                    return Err(CheckpointError::DigestMismatch {
                        expected,
                        found: digest,
                    });
                }
                log::warn!("loading checkpoint with digest {digest:016x} into config {expected:016x} (forced)");
            }
        }
        Ok(Self { digest, arrays })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e| CheckpointError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()?).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path, expected_digest: Option<u64>, force: bool) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::decode(&bytes, expected_digest, force)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len().saturating_sub(self.at);
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.at,
                needed: n - available,
            });
        }
        let end = self.at + n;
        let s = &self.bytes[self.at..end];
        self.at = end;
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

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(0xABCD);
        c.insert("a", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2));
        c.insert("meta/step", Tensor::scalar(7.0));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode().unwrap(), Some(0xABCD), false).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad, None, false), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad, None, false), Err(CheckpointError::Version(9))));
        assert!(matches!(
            Checkpoint::decode(&bytes, Some(1), false),
            Err(CheckpointError::DigestMismatch { .. })
        ));
        assert!(Checkpoint::decode(&bytes, Some(1), true).is_ok());
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(Checkpoint::decode(&bad, None, false), Err(CheckpointError::Checksum { .. })));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 5], None, false).is_err());
    }
}
