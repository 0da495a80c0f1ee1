//! Evaluation diagnostics: perplexity neglect probe, pair accuracy, visual
//! dependency, improvement aggregation and the dependency trend slope.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{log_prob, ImageCondition, ModelError, ModelParams};
use crate::synth::{ContrastPair, Corpus};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("report CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

/// `exp(-(1/T) Σ log p)` over response tokens only.
pub fn perplexity(
    params: &ModelParams,
    cond: &ImageCondition,
    query: &[usize],
    response: &[usize],
) -> Result<f64> {
    let lp = log_prob(params, cond, query, response)?;
    Ok((-lp.total / response.len() as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub ppl_match: f64,
    pub ppl_mismatch: f64,
    pub ppl_noimage: f64,
}

pub const TIE: &str = "tie";

impl ProbeSample {
    /// Ascending order such as `match<noimage<mismatch`, or [`TIE`] when any
    /// two perplexities are equal.
    pub fn ordering(&self) -> &'static str {
        let (m, x, n) = (self.ppl_match, self.ppl_mismatch, self.ppl_noimage);
        if m == x || m == n || x == n {
            return TIE;
        }
        match (m < x, m < n, x < n) {
            (true, true, true) => "match<mismatch<noimage",
            (true, true, false) => "match<noimage<mismatch",
            (false, true, _) => "mismatch<match<noimage",
            (true, false, _) => "noimage<match<mismatch",
            (false, false, true) => "mismatch<noimage<match",
            (false, false, false) => "noimage<mismatch<match",
        }
    }
}

pub const ORDERINGS: [&str; 6] = [
    "match<mismatch<noimage",
    "match<noimage<mismatch",
    "mismatch<match<noimage",
    "mismatch<noimage<match",
    "noimage<match<mismatch",
    "noimage<mismatch<match",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n: usize,
    pub mean_ppl_match: f64,
    pub mean_ppl_mismatch: f64,
    pub mean_ppl_noimage: f64,
    /// Six strict orderings plus the tie bucket; sums to `n`.
    pub histogram: BTreeMap<String, usize>,
    /// Strict `ppl_match < ppl_mismatch`; exact ties do not count.
    pub frac_match_lt_mismatch: f64,
    pub samples: Vec<ProbeSample>,
}

impl ProbeReport {
    pub fn from_samples(samples: Vec<ProbeSample>) -> Self {
        let n = samples.len();
        let mut histogram: BTreeMap<String, usize> = ORDERINGS
            .iter()
            .chain([&TIE])
            .map(|k| (k.to_string(), 0))
            .collect();
        let mut sums = [0.0; 3];
        let mut wins = 0usize;
        for s in &samples {
            *histogram.get_mut(s.ordering()).expect("known bucket") += 1;
            sums[0] += s.ppl_match;
            sums[1] += s.ppl_mismatch;
            sums[2] += s.ppl_noimage;
            wins += usize::from(s.ppl_match < s.ppl_mismatch);
        }
        let mean = |x: f64| if n == 0 { f64::NAN } else { x / n as f64 };
        Self {
            n,
            mean_ppl_match: mean(sums[0]),
            mean_ppl_mismatch: mean(sums[1]),
            mean_ppl_noimage: mean(sums[2]),
            histogram,
            frac_match_lt_mismatch: mean(wins as f64),
            samples,
        }
    }

    /// Whether mean no-image perplexity lies strictly between the other two.
    pub fn noimage_between(&self) -> bool {
        let (lo, hi) = if self.mean_ppl_match < self.mean_ppl_mismatch {
            (self.mean_ppl_match, self.mean_ppl_mismatch)
        } else {
            (self.mean_ppl_mismatch, self.mean_ppl_match)
        };
        lo < self.mean_ppl_noimage && self.mean_ppl_noimage < hi
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = vec![
            MetricRow::new("n", self.n as f64),
            MetricRow::new("mean_ppl_match", self.mean_ppl_match),
            MetricRow::new("mean_ppl_mismatch", self.mean_ppl_mismatch),
            MetricRow::new("mean_ppl_noimage", self.mean_ppl_noimage),
            MetricRow::new("frac_match_lt_mismatch", self.frac_match_lt_mismatch),
        ];
        for (k, v) in &self.histogram {
            rows.push(MetricRow::new(&format!("order:{k}"), *v as f64));
        }
        rows
    }
}

pub fn probe_sample(params: &ModelParams, pair: &ContrastPair) -> Result<ProbeSample> {
    let [iw, il, none] = pair.conditions();
    Ok(ProbeSample {
        ppl_match: perplexity(params, &iw, &pair.query, &pair.y_w)?,
        ppl_mismatch: perplexity(params, &il, &pair.query, &pair.y_w)?,
        ppl_noimage: perplexity(params, &none, &pair.query, &pair.y_w)?,
    })
}

/// Perplexity of `y_w` under the matching, mismatching and absent image.
pub fn neglect_probe(params: &ModelParams, corpus: &Corpus) -> Result<ProbeReport> {
    let samples = corpus
        .pairs
        .iter()
        .map(|p| probe_sample(params, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport::from_samples(samples))
}

/// `(log p(y_w | i_w, q), log p(y_w | i_l, q))` for each pair.
pub fn pair_log_probs(params: &ModelParams, corpus: &Corpus) -> Result<Vec<(f64, f64)>> {
    corpus
        .pairs
        .iter()
        .map(|p| {
            let [iw, il, _] = p.conditions();
            Ok((
                log_prob(params, &iw, &p.query, &p.y_w)?.total,
                log_prob(params, &il, &p.query, &p.y_w)?.total,
            ))
        })
        .collect()
}

/// Fraction of pairs scoring the matching image higher; ties count one half.
pub fn accuracy_from_log_probs(scores: &[(f64, f64)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(ProbeError::Input("pair accuracy needs at least one pair".into()));
    }
    let credit: f64 = scores
        .iter()
        .map(|&(m, x)| if m > x { 1.0 } else if m == x { 0.5 } else { 0.0 })
        .sum();
    Ok(credit / scores.len() as f64)
}

pub fn pair_accuracy(params: &ModelParams, corpus: &Corpus) -> Result<f64> {
    accuracy_from_log_probs(&pair_log_probs(params, corpus)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyPoint {
    pub metric: String,
    pub score_with_images: f64,
    pub score_without_images: f64,
    pub dependency: f64,
}

/// Relative drop `(with - without) / with`; negative when images hurt.
pub fn visual_dependency(with: f64, without: f64) -> Result<f64> {
    if !with.is_finite() || with <= 0.0 || !without.is_finite() {
        return Err(ProbeError::Input(format!(
            "visual dependency needs a positive finite score with images, got {with}"
        )));
    }
    Ok((with - without) / with)
}

impl DependencyPoint {
    pub fn new(metric: &str, with: f64, without: f64) -> Result<Self> {
        Ok(Self {
            metric: metric.into(),
            score_with_images: with,
            score_without_images: without,
            dependency: visual_dependency(with, without)?,
        })
    }
}

/// Mean signed relative change over metrics, in percent. The base value is
/// the denominator throughout; lower-better metrics have their sign flipped.
pub fn avg_improvement(
    base: &BTreeMap<String, f64>,
    tuned: &BTreeMap<String, f64>,
    lower_better: &BTreeSet<String>,
) -> Result<f64> {
    if base.is_empty() {
        return Err(ProbeError::Input("no metrics to aggregate".into()));
    }
    if !base.keys().eq(tuned.keys()) {
        let b: Vec<_> = base.keys().collect();
        let t: Vec<_> = tuned.keys().collect();
        return Err(ProbeError::Input(format!("metric keys differ: base {b:?}, tuned {t:?}")));
    }
    if let Some(k) = lower_better.iter().find(|k| !base.contains_key(*k)) {
        return Err(ProbeError::Input(format!("lower-better metric {k} is not reported")));
    }
    let mut sum = 0.0;
    for (k, &b) in base {
        if b == 0.0 || !b.is_finite() {
            return Err(ProbeError::Input(format!("base value of {k} must be non-zero and finite")));
        }
        let change = (tuned[k] - b) / b;
        sum += if lower_better.contains(k) { -change } else { change };
    }
    Ok(100.0 * sum / base.len() as f64)
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(ProbeError::Input("slope needs at least two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(ProbeError::Input("all x values are equal".into()));
    }
    Ok(sxy / sxx)
}

/// Metrics of the held-out evaluation battery, plus which are lower-better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub metrics: BTreeMap<String, f64>,
    pub lower_better: BTreeSet<String>,
}

pub fn eval_battery(params: &ModelParams, corpus: &Corpus) -> Result<Battery> {
    let report = neglect_probe(params, corpus)?;
    let acc = pair_accuracy(params, corpus)?;
    let metrics = BTreeMap::from([
        ("pair_accuracy".to_string(), acc),
        ("frac_match_lt_mismatch".to_string(), report.frac_match_lt_mismatch),
        ("mean_ppl_match".to_string(), report.mean_ppl_match),
    ]);
    Ok(Battery {
        metrics,
        lower_better: BTreeSet::from(["mean_ppl_match".to_string()]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(name: &str, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Flat `name,value` table for external plotting.
pub fn write_rows_csv(rows: &[MetricRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, mut w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}
