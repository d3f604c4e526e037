use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::types::Span;

/// A predicted span with its probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub score: f64,
}

impl ScoredSpan {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end, self.label.clone())
    }
}

/// Materialized span probabilities `p(k | s_ij)` in type-registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanProbs {
    pub n: usize,
    pub labels: Vec<String>,
    pub probs: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Keep the best-scoring span among overlapping candidates.
    #[default]
    Flat,
    /// Keep every candidate above threshold (nested and multi-label output).
    Nested,
}

impl std::str::FromStr for DecodeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flat" => Ok(DecodeMode::Flat),
            "nested" => Ok(DecodeMode::Nested),
            _ => Err(format!("unknown decode mode `{s}` (expected flat|nested)")),
        }
    }
}

/// Candidates above `threshold` in the upper triangle, ordered by score
/// descending with ties broken by smaller start, smaller end, then type order.
fn candidates(p: &SpanProbs, threshold: f64) -> Vec<(usize, ScoredSpan)> {
    let mut out = Vec::new();
    for (k, (label, m)) in p.labels.iter().zip(&p.probs).enumerate() {
        for i in 0..p.n {
            for j in i..p.n {
                let score = m.get(i, j);
                if score > threshold {
                    out.push((
                        k,
                        ScoredSpan {
                            start: i,
                            end: j,
                            label: label.clone(),
                            score,
                        },
                    ));
                }
            }
        }
    }
    out.sort_by(|(ka, a), (kb, b)| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
            .then(ka.cmp(kb))
    });
    out
}

/// Greedy flat decoding: accept candidates in order unless they overlap an
/// already accepted span. Output is sorted by position.
pub fn decode_flat(p: &SpanProbs, threshold: f64) -> Vec<ScoredSpan> {
    let mut kept: Vec<ScoredSpan> = Vec::new();
    for (_, c) in candidates(p, threshold) {
        if kept.iter().all(|k| c.end < k.start || k.end < c.start) {
            kept.push(c);
        }
    }
    kept.sort_by(|a, b| (a.start, a.end, &a.label).cmp(&(b.start, b.end, &b.label)));
    kept
}

pub fn decode_nested(p: &SpanProbs, threshold: f64) -> Vec<ScoredSpan> {
    let mut all: Vec<ScoredSpan> = candidates(p, threshold).into_iter().map(|(_, c)| c).collect();
    all.sort_by(|a, b| (a.start, a.end, &a.label).cmp(&(b.start, b.end, &b.label)));
    all
}

pub fn decode(p: &SpanProbs, threshold: f64, mode: DecodeMode) -> Vec<ScoredSpan> {
    match mode {
        DecodeMode::Flat => decode_flat(p, threshold),
        DecodeMode::Nested => decode_nested(p, threshold),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(n: usize, cells: &[(usize, usize, usize, f64)], types: usize) -> SpanProbs {
        let mut probs = vec![Tensor::zeros(&[n, n]); types];
        for &(k, i, j, v) in cells {
            probs[k].set(i, j, v);
        }
        SpanProbs {
            n,
            labels: (0..types).map(|k| ["PER", "ORG", "LOC"][k].to_string()).collect(),
            probs,
        }
    }

    #[test]
    fn nothing_above_threshold() {
        let p = probs(3, &[(0, 0, 1, 0.5), (1, 2, 2, 0.1)], 2);
        assert!(decode_flat(&p, 0.5).is_empty());
    }

    #[test]
    fn overlapping_keeps_best() {
        // 1-based (1,2,PER,.9) and (2,3,ORG,.8)
        let p = probs(4, &[(0, 0, 1, 0.9), (1, 1, 2, 0.8)], 2);
        let d = decode_flat(&p, 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].start, d[0].end, d[0].label.as_str()), (0, 1, "PER"));
    }

    #[test]
    fn disjoint_both_kept() {
        let p = probs(4, &[(0, 0, 0, 0.7), (1, 2, 3, 0.6)], 2);
        assert_eq!(decode_flat(&p, 0.5).len(), 2);
    }

    #[test]
    fn ties_prefer_earlier_then_type_order() {
        let p = probs(3, &[(1, 0, 1, 0.8), (0, 0, 1, 0.8), (0, 1, 2, 0.8)], 2);
        let d = decode_flat(&p, 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].label, "PER");
        assert_eq!((d[0].start, d[0].end), (0, 1));
    }

    #[test]
    fn lower_triangle_never_decoded() {
        let p = probs(3, &[(0, 2, 0, 0.99)], 1);
        assert!(decode_nested(&p, 0.5).is_empty());
    }

    #[test]
    fn nested_keeps_overlaps() {
        let p = probs(4, &[(0, 0, 3, 0.9), (1, 2, 2, 0.8)], 2);
        assert_eq!(decode_nested(&p, 0.5).len(), 2);
        assert_eq!(decode_flat(&p, 0.5).len(), 1);
    }
}
