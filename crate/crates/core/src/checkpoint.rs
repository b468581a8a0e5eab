//! Named-array checkpoint container.
//!
//! Layout: magic `SMCL`, version u32, then per array (ordered by name):
//! `[name_len u32][name UTF-8][rank u32][dims u32 x rank][payload f64 LE]`.
//! All integers little-endian. A file is parsed fully before any state is
//! returned, so truncation can never yield partial state.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SMCL";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected SMCL")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(&'static str),
    #[error("checkpoint is missing array {0}")]
    MissingArray(String),
}

pub fn write_named_arrays(
    path: impl AsRef<Path>,
    arrays: &BTreeMap<String, Tensor>,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in shape {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path.as_ref(), buf).map_err(|source| CheckpointError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}

pub fn read_named_arrays(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let bytes = fs::read(path.as_ref()).map_err(|source| CheckpointError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    let mut cursor = Cursor { bytes: &bytes, pos: 0 };
    if cursor.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut arrays = BTreeMap::new();
    while !cursor.done() {
        let name_len = cursor.u32()? as usize;
        let name = std::str::from_utf8(cursor.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("array name is not UTF-8"))?
            .to_string();
        let rank = cursor.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cursor.f64()?);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|_| CheckpointError::Corrupt("non-finite or misshapen payload"))?;
        arrays.insert(name, tensor);
    }
    Ok(arrays)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Lossless scalar helpers: usize / u64 / u128 values are stored as exact
/// small-integer f64 arrays (u64 split into two u32 halves).
pub fn usize_to_tensor(v: usize) -> Tensor {
    Tensor::scalar(v as f64)
}

pub fn tensor_to_usize(t: &Tensor) -> Result<usize, CheckpointError> {
    let v = t
        .item()
        .map_err(|_| CheckpointError::Corrupt("scalar array expected"))?;
    if v < 0.0 || v.fract() != 0.0 || v >= 2f64.powi(53) {
        return Err(CheckpointError::Corrupt("not a small non-negative integer"));
    }
    Ok(v as usize)
}

pub fn u64_to_tensor(v: u64) -> Tensor {
    let hi = (v >> 32) as u32;
    let lo = (v & 0xffff_ffff) as u32;
    Tensor::new(vec![2], vec![hi as f64, lo as f64]).expect("two small integers")
}

pub fn tensor_to_u64(t: &Tensor) -> Result<u64, CheckpointError> {
    let d = t.data();
    if d.len() != 2 || d.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64) {
        return Err(CheckpointError::Corrupt("expected [hi, lo] u32 pair"));
    }
    Ok(((d[0] as u64) << 32) | d[1] as u64)
}

pub fn u128_to_tensor(v: u128) -> Tensor {
    let parts: Vec<f64> = (0..4)
        .map(|i| ((v >> (32 * (3 - i))) & 0xffff_ffff) as u32 as f64)
        .collect();
    Tensor::new(vec![4], parts).expect("four small integers")
}

pub fn tensor_to_u128(t: &Tensor) -> Result<u128, CheckpointError> {
    let d = t.data();
    if d.len() != 4 || d.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64) {
        return Err(CheckpointError::Corrupt("expected four u32 parts"));
    }
    let mut out = 0u128;
    for &part in d {
        out = (out << 32) | part as u128;
    }
    Ok(out)
}

pub fn bytes_to_tensor(bytes: &[u8]) -> Tensor {
    Tensor::new(
        vec![bytes.len()],
        bytes.iter().map(|&b| b as f64).collect(),
    )
    .expect("bytes are small integers")
}

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>, CheckpointError> {
    t.data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 || v > 255.0 {
                Err(CheckpointError::Corrupt("expected byte values"))
            } else {
                Ok(v as u8)
            }
        })
        .collect()
}
