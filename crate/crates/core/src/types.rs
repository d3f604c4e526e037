use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// A typed token range. Indices are 0-based and `end` is inclusive, so a
/// single-token mention has `start == end`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Span {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Token sequence with gold spans. Spans may nest or overlap, including the
/// same range under different labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub spans: Vec<Span>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, mut spans: Vec<Span>) -> Self {
        spans.sort();
        spans.dedup();
        Sentence { tokens, spans }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.spans.iter().map(|s| s.label.as_str()).collect()
    }

    pub fn has_any_label<'a>(&self, labels: impl IntoIterator<Item = &'a String>) -> bool {
        let wanted: BTreeSet<&str> = labels.into_iter().map(|s| s.as_str()).collect();
        self.spans.iter().any(|s| wanted.contains(s.label.as_str()))
    }

    /// Checks `start <= end < len` for every span.
    pub fn validate(&self) -> crate::Result<()> {
        for s in &self.spans {
            if s.start > s.end || s.end >= self.tokens.len() {
                return Err(crate::Error::Data(format!(
                    "span ({}, {}, {}) out of bounds for sentence of {} tokens",
                    s.start,
                    s.end,
                    s.label,
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }
}
