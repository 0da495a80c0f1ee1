//! Dual-threshold vision-centric pair filter.
//!
//! A pair is kept when it is semantically close (`cos(clip_a, clip_b) > tau_clip`)
//! yet visibly different in detail (`cos(dino_a, dino_b) < tau_dino`). Both
//! comparisons are strict, so ties reject. Categories listed in
//! `bypass` skip the predicates and are instead subsampled by a seeded,
//! order-independent ranking of their pair ids.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::store::{EmbeddingRecord, StoreError};
use crate::synth::ContrastType;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("cosine of vectors with {0} and {1} entries")]
    DimMismatch(usize, usize),
    #[error("cosine with a zero-norm vector")]
    ZeroNorm,
    #[error("threshold {name} = {value} is outside (-1, 1)")]
    BadThreshold { name: &'static str, value: f64 },
    #[error("bypass rate {0} is outside [0, 1]")]
    BadRate(f64),
    #[error("duplicate pair id `{0}`")]
    DuplicateId(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("kept-set line {line}: {message}")]
    KeptSet { line: usize, message: String },
    #[error("filter I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// `a·b / (|a| |b|)`, accumulated in `f64`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, FilterError> {
    if a.len() != b.len() {
        return Err(FilterError::DimMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(FilterError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub tau_clip: f64,
    pub tau_dino: f64,
    pub bypass_categories: BTreeSet<ContrastType>,
    /// Fraction of each bypass category to keep. `None` keeps the same
    /// fraction that survived the predicates among non-bypass records, which
    /// preserves the source category ratio.
    pub bypass_rate: Option<f64>,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau_clip: 0.7,
            tau_dino: 0.5,
            bypass_categories: BTreeSet::from([ContrastType::Position]),
            bypass_rate: None,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        for (name, value) in [("tau_clip", self.tau_clip), ("tau_dino", self.tau_dino)] {
            if !(value > -1.0 && value < 1.0) {
                return Err(FilterError::BadThreshold { name, value });
            }
        }
        if let Some(r) = self.bypass_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(FilterError::BadRate(r));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    /// CLIP similarity at or below `tau_clip`.
    TooDifferentSemantically,
    /// DINO similarity at or above `tau_dino`.
    TooSimilarInDetail,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeepReason {
    Passed,
    Bypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Keep(KeepReason),
    Reject(RejectReason),
}

/// Per-record decision, ignoring bypass subsampling.
pub fn filter_pair(rec: &EmbeddingRecord, cfg: &FilterConfig) -> Result<Decision, FilterError> {
    let clip = cosine(&rec.clip_a, &rec.clip_b)?;
    let dino = cosine(&rec.dino_a, &rec.dino_b)?;
    Ok(decide(rec.category, clip, dino, cfg))
}

fn decide(category: ContrastType, clip: f64, dino: f64, cfg: &FilterConfig) -> Decision {
    if cfg.bypass_categories.contains(&category) {
        return Decision::Keep(KeepReason::Bypass);
    }
    match (clip > cfg.tau_clip, dino < cfg.tau_dino) {
        (true, true) => Decision::Keep(KeepReason::Passed),
        (false, true) => Decision::Reject(RejectReason::TooDifferentSemantically),
        (true, false) => Decision::Reject(RejectReason::TooSimilarInDetail),
        (false, false) => Decision::Reject(RejectReason::Both),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptRecord {
    pub pair_id: String,
    pub category: ContrastType,
    pub clip_sim: f64,
    pub dino_sim: f64,
    pub reason: KeepReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub total: usize,
    pub kept: usize,
    /// Bypass records dropped by the subsample.
    pub bypass_dropped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub kept: usize,
    pub per_category: BTreeMap<ContrastType, CategoryCounts>,
    pub rejected: BTreeMap<RejectReason, usize>,
    pub bypass_rate_used: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub report: FilterReport,
    /// Sorted by pair id.
    pub kept: Vec<KeptRecord>,
}

/// Seeded rank key for bypass subsampling; depends only on `(seed, id)`.
fn rank_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

pub fn run_filter(records: &[EmbeddingRecord], cfg: &FilterConfig) -> Result<FilterOutcome, FilterError> {
    cfg.validate()?;
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.pair_id.as_str()) {
            return Err(FilterError::DuplicateId(r.pair_id.clone()));
        }
    }

    let mut report = FilterReport {
        total: records.len(),
        ..FilterReport::default()
    };
    let mut kept = Vec::new();
    let mut bypass: BTreeMap<ContrastType, Vec<KeptRecord>> = BTreeMap::new();
    let (mut screened, mut passed) = (0usize, 0usize);

    for r in records {
        let clip_sim = cosine(&r.clip_a, &r.clip_b)?;
        let dino_sim = cosine(&r.dino_a, &r.dino_b)?;
        report.per_category.entry(r.category).or_default().total += 1;
        let k = |reason| KeptRecord {
            pair_id: r.pair_id.clone(),
            category: r.category,
            clip_sim,
            dino_sim,
            reason,
        };
        match decide(r.category, clip_sim, dino_sim, cfg) {
            Decision::Keep(KeepReason::Bypass) => {
                bypass.entry(r.category).or_default().push(k(KeepReason::Bypass))
            }
            Decision::Keep(KeepReason::Passed) => {
                screened += 1;
                passed += 1;
                kept.push(k(KeepReason::Passed));
            }
            Decision::Reject(reason) => {
                screened += 1;
                *report.rejected.entry(reason).or_default() += 1;
            }
        }
    }

    if !bypass.is_empty() {
        let rate = cfg.bypass_rate.unwrap_or(if screened == 0 {
            1.0
        } else {
            passed as f64 / screened as f64
        });
        report.bypass_rate_used = Some(rate);
        for (cat, mut group) in bypass {
            let n = group.len();
            let take = ((rate * n as f64).round() as usize).min(n);
            group.sort_by_cached_key(|k| (rank_key(cfg.seed, &k.pair_id), k.pair_id.clone()));
            group.truncate(take);
            report.per_category.entry(cat).or_default().bypass_dropped = n - take;
            kept.extend(group);
        }
    }

    kept.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    for k in &kept {
        report.per_category.entry(k.category).or_default().kept += 1;
    }
    report.kept = kept.len();
    Ok(FilterOutcome { report, kept })
}

pub fn run_filter_path(
    store: impl AsRef<std::path::Path>,
    cfg: &FilterConfig,
) -> Result<FilterOutcome, FilterError> {
    let records = super::store::load(store)?;
    run_filter(&records, cfg)
}

pub const KEPT_FORMAT: &str = "mvc-kept";

#[derive(Debug, Serialize, Deserialize)]
struct KeptHeader {
    format: String,
    version: u32,
    count: usize,
}

pub fn write_kept(kept: &[KeptRecord], mut w: impl Write) -> std::io::Result<()> {
    let header = KeptHeader {
        format: KEPT_FORMAT.into(),
        version: 1,
        count: kept.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for k in kept {
        serde_json::to_writer(&mut w, k)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_kept(r: impl BufRead) -> Result<Vec<KeptRecord>, FilterError> {
    let mut out = Vec::new();
    let mut declared = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let err = |message: String| FilterError::KeptSet { line: i + 1, message };
        if i == 0 {
            let h: KeptHeader = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            if h.format != KEPT_FORMAT || h.version != 1 {
                return Err(err(format!("unsupported format {} v{}", h.format, h.version)));
            }
            declared = Some(h.count);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
    }
    match declared {
        Some(n) if n == out.len() => Ok(out),
        Some(n) => Err(FilterError::KeptSet {
            line: 1,
            message: format!("header declares {n} records, found {}", out.len()),
        }),
        None => Err(FilterError::KeptSet {
            line: 1,
            message: "missing header".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, clip: (Vec<f32>, Vec<f32>), dino: (Vec<f32>, Vec<f32>), cat: ContrastType) -> EmbeddingRecord {
        EmbeddingRecord {
            pair_id: id.into(),
            clip_a: clip.0,
            clip_b: clip.1,
            dino_a: dino.0,
            dino_b: dino.1,
            category: cat,
        }
    }

    /// Vector pair in 4-D with cosine exactly 0.7, 0.5, or 1.0.
    fn exact(c: &str) -> (Vec<f32>, Vec<f32>) {
        let a = vec![1.0, 0.0, 0.0, 0.0];
        let b = match c {
            "0.7" => vec![7.0, 7.0, 1.0, 1.0],
            "0.5" => vec![1.0, 1.0, 1.0, 1.0],
            "1" => vec![2.0, 0.0, 0.0, 0.0],
            _ => unreachable!(),
        };
        (a, b)
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((v - 0.707_106_781_186_547_5).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(FilterError::ZeroNorm)));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(FilterError::DimMismatch(1, 2))));
        let (a, b) = exact("0.7");
        assert_eq!(cosine(&a, &b).unwrap(), 0.7);
        let (a, b) = exact("0.5");
        assert_eq!(cosine(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn decisions() {
        let cfg = FilterConfig::default();
        assert_eq!(decide(ContrastType::Object, 0.9, 0.3, &cfg), Decision::Keep(KeepReason::Passed));
        assert_eq!(
            decide(ContrastType::Object, 1.0, 1.0, &cfg),
            Decision::Reject(RejectReason::TooSimilarInDetail)
        );
        assert_eq!(
            decide(ContrastType::Count, 0.7, 0.3, &cfg),
            Decision::Reject(RejectReason::TooDifferentSemantically)
        );
        assert_eq!(
            decide(ContrastType::Count, 0.9, 0.5, &cfg),
            Decision::Reject(RejectReason::TooSimilarInDetail)
        );
        assert_eq!(decide(ContrastType::Count, 0.1, 0.9, &cfg), Decision::Reject(RejectReason::Both));
        assert_eq!(decide(ContrastType::Position, 0.1, 0.9, &cfg), Decision::Keep(KeepReason::Bypass));
    }

    #[test]
    fn boundary_records() {
        let cfg = FilterConfig::default();
        let r = rec("x", exact("0.7"), (vec![1.0, 0.0], vec![0.0, 1.0]), ContrastType::Attribute);
        assert_eq!(filter_pair(&r, &cfg).unwrap(), Decision::Reject(RejectReason::TooDifferentSemantically));
        let r = rec("y", exact("1"), exact("0.5"), ContrastType::Attribute);
        assert_eq!(filter_pair(&r, &cfg).unwrap(), Decision::Reject(RejectReason::TooSimilarInDetail));
        let r = rec("z", exact("1"), exact("1"), ContrastType::Object);
        assert_eq!(filter_pair(&r, &cfg).unwrap(), Decision::Reject(RejectReason::TooSimilarInDetail));
    }

    #[test]
    fn empty_store() {
        let out = run_filter(&[], &FilterConfig::default()).unwrap();
        assert_eq!(out.report.total, 0);
        assert!(out.kept.is_empty());
    }

    #[test]
    fn bypass_rate_and_seed_stability() {
        let recs: Vec<_> = (0..101)
            .map(|i| rec(&format!("p{i:03}"), exact("1"), exact("1"), ContrastType::Position))
            .collect();
        let cfg = FilterConfig {
            bypass_rate: Some(0.5),
            seed: 7,
            ..FilterConfig::default()
        };
        let a = run_filter(&recs, &cfg).unwrap();
        assert_eq!(a.kept.len(), (0.5f64 * 101.0).round() as usize);
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(run_filter(&rev, &cfg).unwrap(), a);
        let other = run_filter(&recs, &FilterConfig { seed: 8, ..cfg.clone() }).unwrap();
        assert_ne!(other.kept, a.kept);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = rec("d", exact("1"), exact("1"), ContrastType::Object);
        assert!(matches!(
            run_filter(&[r.clone(), r], &FilterConfig::default()),
            Err(FilterError::DuplicateId(_))
        ));
    }

    #[test]
    fn kept_file_roundtrip() {
        let recs = vec![rec("a", exact("1"), exact("0.5"), ContrastType::Position)];
        let out = run_filter(&recs, &FilterConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_kept(&out.kept, &mut buf).unwrap();
        assert_eq!(read_kept(&buf[..]).unwrap(), out.kept);
    }
}
