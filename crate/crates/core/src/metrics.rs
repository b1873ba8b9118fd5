//! Contrastive entropy, binary-relevance ranking metrics and metric correlation.
//!
//! Contrastive entropy is the negative log-probability the model assigns to the
//! positive passage under a softmax over the positive and a fixed set of sampled
//! negatives. Unlike NDCG or MAP it moves with every change in the scores, which
//! is what makes it usable as the response variable of a scaling law.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: query has {query} entries, document has {doc}")]
    DimensionMismatch { query: usize, doc: usize },
    #[error("empty vector")]
    EmptyVector,
    #[error("sample has no negative scores")]
    NoNegatives,
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("no samples to aggregate")]
    NoSamples,
    #[error("cutoff k must be at least 1")]
    ZeroCutoff,
    #[error("query has no relevant documents; metric undefined")]
    NoRelevant,
    #[error("relevance judgments must be 0 or 1, found {0}")]
    NonBinary(u8),
    #[error("total_relevant {total} is smaller than the {seen} relevant items in the list")]
    RelevantUndercount { total: usize, seen: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Scores of one test query: its positive passage and the sampled negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub positive_score: f64,
    pub negative_scores: Vec<f64>,
}

impl EvalSample {
    pub fn new(positive_score: f64, negative_scores: Vec<f64>) -> Result<Self> {
        let sample = Self {
            positive_score,
            negative_scores,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        if self.negative_scores.is_empty() {
            return Err(MetricsError::NoNegatives);
        }
        if let Some(&bad) = std::iter::once(&self.positive_score)
            .chain(self.negative_scores.iter())
            .find(|s| !s.is_finite())
        {
            return Err(MetricsError::NonFinite(bad));
        }
        Ok(())
    }
}

/// Binary relevance labels in ranked order (best first).
#[derive(Debug, Clone, PartialEq)]
pub struct RankedJudgments {
    relevance: Vec<u8>,
    total_relevant: usize,
}

impl RankedJudgments {
    pub fn new(relevance: Vec<u8>, total_relevant: usize) -> Result<Self> {
        if let Some(&bad) = relevance.iter().find(|&&r| r > 1) {
            return Err(MetricsError::NonBinary(bad));
        }
        let seen = relevance.iter().filter(|&&r| r == 1).count();
        if total_relevant < seen {
            return Err(MetricsError::RelevantUndercount {
                total: total_relevant,
                seen,
            });
        }
        Ok(Self {
            relevance,
            total_relevant,
        })
    }

    /// Ranks `scores` descending (ties by ascending document id) and labels
    /// each position by membership in `relevant_ids`.
    pub fn from_scores(scores: &[f64], relevant_ids: &[usize]) -> Result<Self> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let relevance = order.iter().map(|id| u8::from(relevant_ids.contains(id))).collect();
        let mut distinct = relevant_ids.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        Self::new(relevance, distinct.len())
    }

    pub fn relevance(&self) -> &[u8] {
        &self.relevance
    }

    pub fn total_relevant(&self) -> usize {
        self.total_relevant
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(MetricsError::ZeroCutoff);
        }
        if self.total_relevant == 0 {
            return Err(MetricsError::NoRelevant);
        }
        Ok(())
    }

    fn top(&self, k: usize) -> &[u8] {
        &self.relevance[..k.min(self.relevance.len())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub n_points: usize,
    pub critical_entropy_hint: Option<f64>,
}

pub fn inner_product_score(query_vec: &[f64], doc_vec: &[f64]) -> Result<f64> {
    if query_vec.len() != doc_vec.len() {
        return Err(MetricsError::DimensionMismatch {
            query: query_vec.len(),
            doc: doc_vec.len(),
        });
    }
    if query_vec.is_empty() {
        return Err(MetricsError::EmptyVector);
    }
    if let Some(&bad) = query_vec.iter().chain(doc_vec).find(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite(bad));
    }
    Ok(dot(query_vec, doc_vec))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-ln softmax(positive)` over the positive followed by `others`, max-shifted.
pub(crate) fn softmax_nll(positive: f64, others: &[f64]) -> f64 {
    // ln(1 + sum exp(s - positive)), shifted by the largest other score when
    // that one beats the positive
    let max = others.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= positive {
        others.iter().map(|s| (s - positive).exp()).sum::<f64>().ln_1p()
    } else {
        let sum: f64 = (positive - max).exp() + others.iter().map(|s| (s - max).exp()).sum::<f64>();
        (max - positive) + sum.ln()
    }
}

pub fn contrastive_entropy(sample: &EvalSample) -> Result<f64> {
    sample.validate()?;
    Ok(softmax_nll(sample.positive_score, &sample.negative_scores))
}

pub fn mean_contrastive_entropy(samples: &[EvalSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let mut total = 0.0;
    for s in samples {
        total += contrastive_entropy(s)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn ndcg_at_k(judgments: &RankedJudgments, k: usize) -> Result<f64> {
    judgments.check(k)?;
    let dcg: f64 = judgments
        .top(k)
        .iter()
        .enumerate()
        .filter(|(_, &r)| r == 1)
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=k.min(judgments.total_relevant)).map(discount).sum();
    Ok(dcg / ideal)
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

pub fn map_at_k(judgments: &RankedJudgments, k: usize) -> Result<f64> {
    judgments.check(k)?;
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (i, &r) in judgments.top(k).iter().enumerate() {
        if r == 1 {
            hits += 1;
            precision_sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(precision_sum / k.min(judgments.total_relevant) as f64)
}

pub fn recall_at_k(judgments: &RankedJudgments, k: usize) -> Result<f64> {
    judgments.check(k)?;
    let hits = judgments.top(k).iter().filter(|&&r| r == 1).count();
    Ok(hits as f64 / judgments.total_relevant as f64)
}

/// Pearson and Spearman correlation between entropies and a ranking metric.
///
/// The critical-entropy hint is the entropy at which the metric makes its
/// largest single jump when points are ordered by entropy, reported only when
/// that jump exceeds a quarter of the metric's range.
pub fn correlate(entropies: &[f64], metric_values: &[f64]) -> Result<CorrelationReport> {
    if entropies.len() != metric_values.len() {
        return Err(MetricsError::LengthMismatch {
            left: entropies.len(),
            right: metric_values.len(),
        });
    }
    let n = entropies.len();
    if n < 2 {
        return Err(MetricsError::TooFewPoints(n));
    }
    if let Some(&bad) = entropies.iter().chain(metric_values).find(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite(bad));
    }
    let linear = pearson(entropies, metric_values, "entropies", "metric_values")?;
    let spearman = pearson(
        &average_ranks(entropies),
        &average_ranks(metric_values),
        "entropies",
        "metric_values",
    )?;

    // sort by entropy, ties by metric value so the order is input-independent
    let mut pts: Vec<(f64, f64)> = entropies.iter().copied().zip(metric_values.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (lo, hi) = metric_values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mut best: Option<(f64, f64)> = None;
    for w in pts.windows(2) {
        let jump = (w[1].1 - w[0].1).abs();
        if best.is_none_or(|(j, _)| jump > j) {
            best = Some((jump, 0.5 * (w[0].0 + w[1].0)));
        }
    }
    let critical_entropy_hint = best.filter(|(j, _)| *j > 0.25 * (hi - lo)).map(|(_, e)| e);

    Ok(CorrelationReport {
        pearson: linear,
        spearman,
        n_points: n,
        critical_entropy_hint,
    })
}

fn pearson(x: &[f64], y: &[f64], x_name: &'static str, y_name: &'static str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance(x_name));
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance(y_name));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties share the average of the positions they span.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}
