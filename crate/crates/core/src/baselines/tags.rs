use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::spankl::ScoredSpan;
use crate::types::{Sentence, Span};

/// One IOB tag over a head's type list.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    B(String),
    I(String),
}

impl Tag {
    pub fn is_o(&self) -> bool {
        matches!(self, Tag::O)
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Tag::O => None,
            Tag::B(l) | Tag::I(l) => Some(l),
        }
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tag::O => write!(f, "O"),
            Tag::B(l) => write!(f, "B-{l}"),
            Tag::I(l) => write!(f, "I-{l}"),
        }
    }
}

/// Tag layout of a head with `k` types: index 0 is O, `1 + 2t` is B of type
/// `t`, `2 + 2t` is I of type `t`.
pub fn tag_count(types: usize) -> usize {
    1 + 2 * types
}

pub fn tag_from_id(id: usize, types: &[String]) -> Result<Tag> {
    if id == 0 {
        return Ok(Tag::O);
    }
    let t = (id - 1) / 2;
    let label = types
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("tag id {id} outside a {}-type head", types.len())))?;
    Ok(if (id - 1).is_multiple_of(2) { Tag::B(label.clone()) } else { Tag::I(label.clone()) })
}

pub fn tag_id(tag: &Tag, types: &[String]) -> Result<usize> {
    let pos = |l: &str| {
        types
            .iter()
            .position(|t| t == l)
            .ok_or_else(|| Error::InvalidArgument(format!("type `{l}` not in head")))
    };
    Ok(match tag {
        Tag::O => 0,
        Tag::B(l) => 1 + 2 * pos(l)?,
        Tag::I(l) => 2 + 2 * pos(l)?,
    })
}

/// Gold spans of `types` reduced to a non-overlapping set: longer spans win,
/// ties go to the earlier start.
pub fn flatten_spans(sentence: &Sentence, types: &[String]) -> Result<Vec<Span>> {
    let n = sentence.len();
    let mut cands: Vec<&Span> = sentence.spans.iter().filter(|s| types.contains(&s.label)).collect();
    for s in &cands {
        if s.start > s.end || s.end >= n {
            return Err(Error::InvalidArgument(format!(
                "span ({}, {}, {}) outside a {n}-token sentence",
                s.start, s.end, s.label
            )));
        }
    }
    cands.sort_by(|a, b| b.len().cmp(&a.len()).then(a.start.cmp(&b.start)).then(a.label.cmp(&b.label)));
    let mut kept: Vec<Span> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| !k.overlaps(c)) {
            kept.push(c.clone());
        }
    }
    kept.sort();
    Ok(kept)
}

/// Per-token tag ids for the spans of `types`.
pub fn iob_encode(sentence: &Sentence, types: &[String]) -> Result<Vec<usize>> {
    let mut out = vec![0usize; sentence.len()];
    for s in flatten_spans(sentence, types)? {
        let t = types.iter().position(|x| *x == s.label).unwrap_or_default();
        out[s.start] = 1 + 2 * t;
        for slot in &mut out[s.start + 1..=s.end] {
            *slot = 2 + 2 * t;
        }
    }
    Ok(out)
}

/// Turn every I- that does not continue a same-type B-/I- into a B-.
pub fn repair(tags: &mut [Tag]) -> usize {
    let mut fixed = 0;
    for i in 0..tags.len() {
        if let Tag::I(l) = &tags[i] {
            let continues = i > 0 && tags[i - 1].label() == Some(l.as_str());
            if !continues {
                tags[i] = Tag::B(l.clone());
                fixed += 1;
            }
        }
    }
    fixed
}

/// Contiguous `B-X (I-X)*` groups as spans. Orphan I- tags start a new span.
pub fn tag_decode(tags: &[Tag]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, t) in tags.iter().enumerate() {
        let continues = matches!((t, &open), (Tag::I(l), Some((_, ol))) if l == ol);
        if !continues {
            if let Some((s, l)) = open.take() {
                out.push(Span::new(s, i - 1, l));
            }
            if let Tag::B(l) | Tag::I(l) = t {
                open = Some((i, l.clone()));
            }
        }
    }
    if let Some((s, l)) = open {
        out.push(Span::new(s, tags.len() - 1, l));
    }
    out
}

/// Decoded spans scored by the mean tag probability over their tokens.
pub fn scored_decode(tags: &[Tag], probs: &[f64]) -> Vec<ScoredSpan> {
    tag_decode(tags)
        .into_iter()
        .map(|s| {
            let score = probs[s.start..=s.end].iter().sum::<f64>() / s.len() as f64;
            ScoredSpan {
                start: s.start,
                end: s.end,
                label: s.label,
                score,
            }
        })
        .collect()
}

/// Per-token argmax over a probability matrix, returning tags and their probabilities.
pub fn argmax_tags(probs: &Tensor, types: &[String]) -> Result<(Vec<Tag>, Vec<f64>)> {
    let (n, k) = probs.require_matrix("argmax_tags")?;
    if k != tag_count(types.len()) {
        return Err(Error::shape("argmax_tags", &[n, tag_count(types.len())], probs.shape()));
    }
    let mut tags = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let row = probs.row(i);
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        tags.push(tag_from_id(best, types)?);
        scores.push(row[best]);
    }
    Ok((tags, scores))
}

/// Merge per-head predictions: O unless some head predicts a non-O tag, in
/// which case the most probable non-O tag across heads wins (ties go to the
/// earlier head). Inconsistent I- tags are then repaired to B-.
pub fn combine_heads(heads: &[(Vec<Tag>, Vec<f64>)]) -> (Vec<Tag>, Vec<f64>) {
    let n = heads.first().map(|h| h.0.len()).unwrap_or(0);
    let mut tags = vec![Tag::O; n];
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let mut best: Option<(f64, &Tag)> = None;
        for (t, p) in heads {
            if !t[i].is_o() && best.is_none_or(|(bp, _)| p[i] > bp) {
                best = Some((p[i], &t[i]));
            }
        }
        match best {
            Some((p, t)) => {
                tags[i] = t.clone();
                scores[i] = p;
            }
            None => {
                scores[i] = heads.iter().map(|h| h.1[i]).fold(f64::INFINITY, f64::min);
            }
        }
    }
    repair(&mut tags);
    (tags, scores)
}

/// Append `new_tags` entries of value `c` to a teacher distribution and renormalize.
pub fn pad_distribution(row: &[f64], new_tags: usize, c: f64) -> Vec<f64> {
    let mut out: Vec<f64> = row.iter().copied().chain(std::iter::repeat_n(c, new_tags)).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn types(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn sent(n: usize, spans: &[(usize, usize, &str)]) -> Sentence {
        Sentence::new(
            (0..n).map(|i| format!("w{i}")).collect(),
            spans.iter().map(|&(a, b, l)| Span::new(a, b, l)).collect(),
        )
    }

    fn b(l: &str) -> Tag {
        Tag::B(l.into())
    }

    fn i(l: &str) -> Tag {
        Tag::I(l.into())
    }

    #[test]
    fn encode_examples() {
        let t = types(&["PER"]);
        assert_eq!(iob_encode(&sent(3, &[]), &t).unwrap(), vec![0, 0, 0]);
        assert_eq!(iob_encode(&sent(3, &[(0, 1, "PER")]), &t).unwrap(), vec![1, 2, 0]);
        assert_eq!(iob_encode(&sent(3, &[(0, 2, "PER"), (1, 1, "PER")]), &t).unwrap(), vec![1, 2, 2]);
        assert!(iob_encode(&sent(2, &[(1, 2, "PER")]), &t).is_err());
        // types outside the head are ignored
        assert_eq!(iob_encode(&sent(2, &[(0, 0, "ORG")]), &t).unwrap(), vec![0, 0]);
    }

    #[test]
    fn flatten_tie_goes_to_earlier_start() {
        let s = sent(4, &[(1, 2, "PER"), (0, 1, "ORG")]);
        let f = flatten_spans(&s, &types(&["PER", "ORG"])).unwrap();
        assert_eq!(f, vec![Span::new(0, 1, "ORG")]);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(tag_decode(&[b("PER"), i("PER"), Tag::O]), vec![Span::new(0, 1, "PER")]);
        assert!(tag_decode(&[Tag::O, Tag::O]).is_empty());
        assert_eq!(
            tag_decode(&[b("PER"), b("PER")]),
            vec![Span::new(0, 0, "PER"), Span::new(1, 1, "PER")]
        );
        assert_eq!(
            tag_decode(&[b("PER"), i("ORG")]),
            vec![Span::new(0, 0, "PER"), Span::new(1, 1, "ORG")]
        );
    }

    #[test]
    fn encode_decode_roundtrip() {
        let t = types(&["PER", "ORG"]);
        let s = sent(7, &[(0, 1, "PER"), (2, 2, "ORG"), (4, 6, "PER")]);
        let tags: Vec<Tag> = iob_encode(&s, &t)
            .unwrap()
            .into_iter()
            .map(|id| tag_from_id(id, &t).unwrap())
            .collect();
        assert_eq!(tag_decode(&tags), s.spans);
        for id in 0..tag_count(2) {
            assert_eq!(tag_id(&tag_from_id(id, &t).unwrap(), &t).unwrap(), id);
        }
    }

    #[test]
    fn combine_examples() {
        let all_o = vec![(vec![Tag::O], vec![0.9]), (vec![Tag::O], vec![0.8])];
        assert_eq!(combine_heads(&all_o).0, vec![Tag::O]);
        let two = vec![(vec![b("PER")], vec![0.9]), (vec![b("ORG")], vec![0.6])];
        assert_eq!(combine_heads(&two).0, vec![b("PER")]);
        let orphan = vec![(vec![Tag::O, i("PER")], vec![0.9, 0.7]), (vec![Tag::O, Tag::O], vec![0.9, 0.9])];
        assert_eq!(combine_heads(&orphan).0, vec![Tag::O, b("PER")]);
    }

    #[test]
    fn padding_normalizes_and_keeps_argmax() {
        let row = [0.1, 0.7, 0.2];
        let p = pad_distribution(&row, 2, 1e-4);
        assert_eq!(p.len(), 5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[1] > p[0] && p[1] > p[2]);
        assert!(p[0] < p[2]);
    }
}
