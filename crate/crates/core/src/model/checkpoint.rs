//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SVCOCKPT"
//! version    u32      1
//! vocab      u32
//! width      u32
//! image_dim  u32
//! n_tensors  u32
//! per tensor:
//!   rank     u32
//!   dims     u32 × rank
//!   data     f64 × product(dims)
//! ```
//!
//! Tensors appear in [`ModelParams::tensors`] order. The maximum response
//! length and hidden-layer count are recovered from the position table and
//! the tensor count.

use std::path::Path;

use thiserror::Error;

use super::{ModelDims, ModelError, ModelParams};
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 8] = b"SVCOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint holds a non-finite parameter")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let dims = params.dims();
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(32 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        dims.vocab as u32,
        dims.width as u32,
        dims.image_dim as u32,
        tensors.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let vocab = r.u32()? as usize;
    let width = r.u32()? as usize;
    let image_dim = r.u32()? as usize;
    let n_tensors = r.u32()? as usize;
    if !(7..=9).contains(&n_tensors) || !(n_tensors - 5).is_multiple_of(2) {
        return Err(CheckpointError::Malformed(format!(
            "tensor count {n_tensors}"
        )));
    }

    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let rank = r.u32()? as usize;
        if rank > 4 {
            return Err(CheckpointError::Malformed(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed("shape overflow".into()))?;
        let nbytes = count
            .checked_mul(8)
            .filter(|&n| n <= r.remaining())
            .ok_or(CheckpointError::Truncated(r.pos))?;
        let raw = r.take(nbytes)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(CheckpointError::NonFinite);
        }
        tensors.push(Tensor::new(shape, data).map_err(ModelError::from)?);
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()));
    }

    let max_len = match tensors[1].shape() {
        [l, _] => *l,
        s => return Err(CheckpointError::Malformed(format!("position shape {s:?}"))),
    };
    let dims = ModelDims {
        vocab,
        width,
        image_dim,
        max_len,
        hidden_layers: (n_tensors - 5) / 2,
    };
    Ok(ModelParams::from_tensors(dims, tensors)?)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams, CheckpointError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitScale;

    #[test]
    fn roundtrip_is_exact() {
        for layers in [1, 2] {
            let dims = ModelDims {
                hidden_layers: layers,
                ..ModelDims::default()
            };
            let p = ModelParams::init(dims, InitScale::default(), 3).unwrap();
            let bytes = encode(&p);
            let q = decode(&bytes).unwrap();
            assert_eq!(p, q);
            assert_eq!(encode(&q), bytes);
        }
    }

    #[test]
    fn header_fields_are_little_endian() {
        let p = ModelParams::init(ModelDims::default(), InitScale::default(), 3).unwrap();
        let b = encode(&p);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &64u32.to_le_bytes());
        assert_eq!(&b[16..20], &32u32.to_le_bytes());
        assert_eq!(&b[20..24], &24u32.to_le_bytes());
        assert_eq!(&b[24..28], &7u32.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let p = ModelParams::init(ModelDims::default(), InitScale::default(), 3).unwrap();
        let b = encode(&p);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = b.clone();
        bad[8] = 2;
        assert!(matches!(
            decode(&bad),
            Err(CheckpointError::UnsupportedVersion(2))
        ));
        assert!(matches!(
            decode(&b[..b.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut bad = b.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(CheckpointError::TrailingBytes(1))));
        // Header vocab disagrees with the embedding table.
        let mut bad = b.clone();
        bad[12] = 63;
        assert!(matches!(decode(&bad), Err(CheckpointError::Model(_))));
        let mut bad = b;
        let last = bad.len() - 8;
        bad[last..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(&bad), Err(CheckpointError::NonFinite)));
    }
}
