//! Binary embedding store.
//!
//! ```text
//! magic      8 bytes  "MVCEMBED"
//! version    u32      1
//! count      u32      number of records
//! clip_dim   u32
//! dino_dim   u32
//! per record:
//!   id_len   u32
//!   id       id_len bytes of UTF-8
//!   clip_a, clip_b   f32 × clip_dim each
//!   dino_a, dino_b   f32 × dino_dim each
//!   category u8      0 object, 1 attribute, 2 count, 3 position
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::synth::ContrastType;

pub const MAGIC: &[u8; 8] = b"MVCEMBED";
pub const VERSION: u32 = 1;
const MAX_ID_LEN: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub pair_id: String,
    pub clip_a: Vec<f32>,
    pub clip_b: Vec<f32>,
    pub dino_a: Vec<f32>,
    pub dino_b: Vec<f32>,
    pub category: ContrastType,
}

impl EmbeddingRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.clip_a.len() != self.clip_b.len() {
            return Err("clip vectors differ in length".into());
        }
        if self.dino_a.len() != self.dino_b.len() {
            return Err("dino vectors differ in length".into());
        }
        for (name, v) in [
            ("clip_a", &self.clip_a),
            ("clip_b", &self.clip_b),
            ("dino_a", &self.dino_a),
            ("dino_b", &self.dino_b),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(format!("{name} has a non-finite entry"));
            }
            if v.iter().all(|&x| x == 0.0) {
                return Err(format!("{name} is the zero vector"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u32),
    #[error("header truncated")]
    TruncatedHeader,
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("record {index}: dimensions ({clip}, {dino}) differ from the store's ({clip_dim}, {dino_dim})")]
    NonUniformDims {
        index: usize,
        clip: usize,
        dino: usize,
        clip_dim: usize,
        dino_dim: usize,
    },
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
}

fn category_byte(c: ContrastType) -> u8 {
    match c {
        ContrastType::Object => 0,
        ContrastType::Attribute => 1,
        ContrastType::Count => 2,
        ContrastType::Position => 3,
    }
}

fn category_from(b: u8) -> Option<ContrastType> {
    ContrastType::ALL.get(b as usize).copied()
}

pub fn encode(records: &[EmbeddingRecord]) -> Result<Vec<u8>, StoreError> {
    let (clip_dim, dino_dim) = records
        .first()
        .map(|r| (r.clip_a.len(), r.dino_a.len()))
        .unwrap_or((0, 0));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION, records.len() as u32, clip_dim as u32, dino_dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (index, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|message| StoreError::Record { index, message })?;
        if r.clip_a.len() != clip_dim || r.dino_a.len() != dino_dim {
            return Err(StoreError::NonUniformDims {
                index,
                clip: r.clip_a.len(),
                dino: r.dino_a.len(),
                clip_dim,
                dino_dim,
            });
        }
        out.extend_from_slice(&(r.pair_id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.pair_id.as_bytes());
        for v in [&r.clip_a, &r.clip_b, &r.dino_a, &r.dino_b] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.push(category_byte(r.category));
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len())?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let raw = self.take(n.checked_mul(4)?)?;
        Some(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<EmbeddingRecord>, StoreError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8).ok_or(StoreError::TruncatedHeader)? != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = c.u32().ok_or(StoreError::TruncatedHeader)?;
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let count = c.u32().ok_or(StoreError::TruncatedHeader)? as usize;
    let clip_dim = c.u32().ok_or(StoreError::TruncatedHeader)? as usize;
    let dino_dim = c.u32().ok_or(StoreError::TruncatedHeader)? as usize;

    let mut records = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let bad = |message: &str| StoreError::Record {
            index,
            message: message.to_string(),
        };
        let id_len = c.u32().ok_or_else(|| bad("truncated id length"))? as usize;
        if id_len > MAX_ID_LEN {
            return Err(bad("id longer than 4096 bytes"));
        }
        let id = c.take(id_len).ok_or_else(|| bad("truncated id"))?;
        let pair_id = std::str::from_utf8(id)
            .map_err(|_| bad("id is not UTF-8"))?
            .to_string();
        let clip_a = c.f32s(clip_dim).ok_or_else(|| bad("truncated clip_a"))?;
        let clip_b = c.f32s(clip_dim).ok_or_else(|| bad("truncated clip_b"))?;
        let dino_a = c.f32s(dino_dim).ok_or_else(|| bad("truncated dino_a"))?;
        let dino_b = c.f32s(dino_dim).ok_or_else(|| bad("truncated dino_b"))?;
        let cat = c.take(1).ok_or_else(|| bad("truncated category"))?[0];
        let category = category_from(cat).ok_or_else(|| bad("unknown category byte"))?;
        let rec = EmbeddingRecord {
            pair_id,
            clip_a,
            clip_b,
            dino_a,
            dino_b,
            category,
        };
        rec.validate()
            .map_err(|message| StoreError::Record { index, message })?;
        records.push(rec);
    }
    let rest = bytes.len() - c.pos;
    if rest != 0 {
        return Err(StoreError::TrailingBytes(rest));
    }
    Ok(records)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>, StoreError> {
    decode(&std::fs::read(path)?)
}

pub fn save(records: &[EmbeddingRecord], path: impl AsRef<Path>) -> Result<(), StoreError> {
    std::fs::write(path, encode(records)?)?;
    Ok(())
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Two vectors whose cosine is `c` up to `f32` rounding.
pub fn vector_pair_with_cosine(rng: &mut ChaCha8Rng, dim: usize, c: f64) -> (Vec<f32>, Vec<f32>) {
    assert!(dim >= 2 && (-1.0..=1.0).contains(&c));
    let u = random_unit(rng, dim);
    let mut v = random_unit(rng, dim);
    loop {
        let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let w: Vec<f64> = v.iter().zip(&u).map(|(b, a)| b - d * a).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v = w.into_iter().map(|x| x / n).collect();
            break;
        }
        v = random_unit(rng, dim);
    }
    let s = (1.0 - c * c).max(0.0).sqrt();
    let a = u.iter().map(|&x| x as f32).collect();
    let b = u.iter().zip(&v).map(|(x, y)| (c * x + s * y) as f32).collect();
    (a, b)
}

const STORE_STREAM_BASE: u64 = 1 << 63;

/// Stand-in encoder outputs for labelled pairs: CLIP-space similarity drawn
/// from `U(0.5, 1)`, DINO-space similarity from `U(0.1, 0.9)`.
pub fn synthetic_records(
    labels: &[(String, ContrastType)],
    clip_dim: usize,
    dino_dim: usize,
    seed: u64,
) -> Vec<EmbeddingRecord> {
    labels
        .iter()
        .enumerate()
        .map(|(i, (id, category))| {
            // High streams: the corpus generator uses the low ones per pair.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(STORE_STREAM_BASE | i as u64);
            let clip_sim = rng.random_range(0.5..1.0);
            let dino_sim = rng.random_range(0.1..0.9);
            let (clip_a, clip_b) = vector_pair_with_cosine(&mut rng, clip_dim, clip_sim);
            let (dino_a, dino_b) = vector_pair_with_cosine(&mut rng, dino_dim, dino_sim);
            EmbeddingRecord {
                pair_id: id.clone(),
                clip_a,
                clip_b,
                dino_a,
                dino_b,
                category: *category,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> EmbeddingRecord {
        EmbeddingRecord {
            pair_id: id.into(),
            clip_a: vec![1.0, 0.0, 0.5],
            clip_b: vec![0.5, 0.5, 0.5],
            dino_a: vec![1.0, 2.0],
            dino_b: vec![-1.0, 2.0],
            category: ContrastType::Count,
        }
    }

    #[test]
    fn roundtrip() {
        let recs = vec![rec("a"), rec("bb"), rec("")];
        let bytes = encode(&recs).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap(), recs);
        assert!(decode(&encode(&[]).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn errors_carry_record_index() {
        let bytes = encode(&[rec("a"), rec("b")]).unwrap();
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, StoreError::Record { index: 1, .. }), "{err}");
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 9;
        assert!(matches!(decode(&bad), Err(StoreError::Record { index: 1, .. })));
        let mut zero = rec("z");
        zero.dino_b = vec![0.0, 0.0];
        assert!(matches!(encode(&[zero]), Err(StoreError::Record { index: 0, .. })));
        let mut wide = rec("w");
        wide.clip_a.push(1.0);
        wide.clip_b.push(1.0);
        assert!(matches!(
            encode(&[rec("a"), wide]),
            Err(StoreError::NonUniformDims { index: 1, .. })
        ));
    }

    #[test]
    fn constructed_cosines() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &c in &[-0.3, 0.0, 0.5, 0.7, 0.99] {
            let (a, b) = vector_pair_with_cosine(&mut rng, 16, c);
            let got = crate::mvc::filter::cosine(&a, &b).unwrap();
            assert!((got - c).abs() < 1e-6, "{got} vs {c}");
        }
        let labels: Vec<_> = (0..5).map(|i| (format!("p{i}"), ContrastType::Object)).collect();
        let recs = synthetic_records(&labels, 8, 6, 3);
        assert_eq!(recs, synthetic_records(&labels, 8, 6, 3));
        assert_eq!(decode(&encode(&recs).unwrap()).unwrap(), recs);
    }
}
