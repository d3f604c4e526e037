//! Span-level evaluation: exact-boundary, exact-type matching.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Span;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl TypeCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn merge(&mut self, other: &TypeCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-type counts for one sentence. Duplicate spans are counted once.
pub fn span_counts(gold: &[Span], pred: &[Span]) -> BTreeMap<String, TypeCounts> {
    let gold: BTreeSet<&Span> = gold.iter().collect();
    let pred: BTreeSet<&Span> = pred.iter().collect();
    let mut out: BTreeMap<String, TypeCounts> = BTreeMap::new();
    for p in &pred {
        let c = out.entry(p.label.clone()).or_default();
        if gold.contains(p) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for g in gold.difference(&pred) {
        out.entry(g.label.clone()).or_default().fn_ += 1;
    }
    out
}

/// Per-type counts summed over a corpus of aligned gold/prediction lists.
pub fn corpus_counts(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<BTreeMap<String, TypeCounts>> {
    if gold.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gold sentences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut total: BTreeMap<String, TypeCounts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        for (label, c) in span_counts(g, p) {
            total.entry(label).or_default().merge(&c);
        }
    }
    Ok(total)
}

/// Unweighted mean of per-type F1 over `learned`. Types missing from
/// `per_type` contribute 0.
pub fn macro_f1(per_type: &BTreeMap<String, f64>, learned: &[String]) -> Result<f64> {
    if learned.is_empty() {
        return Err(Error::InvalidArgument("macro F1 over zero types".into()));
    }
    let s: f64 = learned.iter().map(|t| per_type.get(t).copied().unwrap_or(0.0)).sum();
    Ok(s / learned.len() as f64)
}

/// Pool fine-type counts into their coarse groups.
pub fn coarse_counts(
    fine: &BTreeMap<String, TypeCounts>,
    grouping: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, TypeCounts>> {
    let mut out: BTreeMap<String, TypeCounts> = BTreeMap::new();
    for (t, c) in fine {
        let coarse = grouping
            .get(t)
            .ok_or_else(|| Error::InvalidArgument(format!("fine type `{t}` has no coarse group")))?;
        out.entry(coarse.clone()).or_default().merge(c);
    }
    Ok(out)
}

/// Micro-averaged F1 per coarse group.
pub fn coarse_micro_f1(
    fine: &BTreeMap<String, TypeCounts>,
    grouping: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, f64>> {
    Ok(coarse_counts(fine, grouping)?
        .into_iter()
        .map(|(k, c)| (k, c.f1()))
        .collect())
}

pub fn gap(cl: f64, noncl: f64) -> f64 {
    cl - noncl
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub label: String,
    pub counts: TypeCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TypeScore {
    fn from_counts(label: &str, counts: TypeCounts) -> Self {
        TypeScore {
            label: label.to_string(),
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
        }
    }
}

/// Scores of one evaluation: per learned type, per coarse group (if any), and
/// the macro average over whichever level is the reporting unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub types: Vec<TypeScore>,
    pub groups: Vec<TypeScore>,
    pub macro_f1: f64,
}

/// Evaluate predictions restricted to `learned` types. With a grouping, the
/// macro is taken over coarse groups covering the learned types.
pub fn evaluate(
    gold: &[Vec<Span>],
    pred: &[Vec<Span>],
    learned: &[String],
    grouping: Option<&BTreeMap<String, String>>,
) -> Result<Evaluation> {
    let keep: BTreeSet<&str> = learned.iter().map(String::as_str).collect();
    let filter = |v: &[Vec<Span>]| -> Vec<Vec<Span>> {
        v.iter()
            .map(|s| s.iter().filter(|sp| keep.contains(sp.label.as_str())).cloned().collect())
            .collect()
    };
    let counts = corpus_counts(&filter(gold), &filter(pred))?;
    let types: Vec<TypeScore> = learned
        .iter()
        .map(|t| TypeScore::from_counts(t, counts.get(t).copied().unwrap_or_default()))
        .collect();
    match grouping {
        None => {
            let per: BTreeMap<String, f64> = types.iter().map(|t| (t.label.clone(), t.f1)).collect();
            Ok(Evaluation {
                macro_f1: macro_f1(&per, learned)?,
                types,
                groups: Vec::new(),
            })
        }
        Some(map) => {
            let full: BTreeMap<String, TypeCounts> =
                types.iter().map(|t| (t.label.clone(), t.counts)).collect();
            let pooled = coarse_counts(&full, map)?;
            let groups: Vec<TypeScore> = pooled.iter().map(|(k, c)| TypeScore::from_counts(k, *c)).collect();
            let names: Vec<String> = groups.iter().map(|g| g.label.clone()).collect();
            let per: BTreeMap<String, f64> = groups.iter().map(|g| (g.label.clone(), g.f1)).collect();
            Ok(Evaluation {
                macro_f1: macro_f1(&per, &names)?,
                types,
                groups,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(a: usize, b: usize, l: &str) -> Span {
        Span::new(a, b, l)
    }

    #[test]
    fn perfect_predictions() {
        let g = vec![s(0, 1, "PER"), s(3, 3, "ORG")];
        for c in span_counts(&g, &g).values() {
            assert_eq!(c.f1(), 1.0);
        }
    }

    #[test]
    fn no_predictions_gives_zero() {
        let c = span_counts(&[s(0, 0, "PER")], &[]);
        assert_eq!(c["PER"].f1(), 0.0);
        assert_eq!(c["PER"].precision(), 0.0);
    }

    #[test]
    fn half_right() {
        // 1-based (1,2),(4,4) vs (1,2),(3,4) shifted to 0-based
        let c = span_counts(&[s(0, 1, "PER"), s(3, 3, "PER")], &[s(0, 1, "PER"), s(2, 3, "PER")]);
        let per = c["PER"];
        assert_eq!((per.precision(), per.recall(), per.f1()), (0.5, 0.5, 0.5));
    }

    #[test]
    fn macro_examples() {
        let mut m = BTreeMap::new();
        m.insert("A".to_string(), 1.0);
        m.insert("B".to_string(), 0.0);
        assert_eq!(macro_f1(&m, &["A".into()]).unwrap(), 1.0);
        assert_eq!(macro_f1(&m, &["A".into(), "B".into()]).unwrap(), 0.5);
        // C never appears in gold or predictions: contributes 0
        assert!((macro_f1(&m, &["A".into(), "B".into(), "C".into()]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(macro_f1(&m, &[]).is_err());
    }

    #[test]
    fn coarse_pooling() {
        let mut fine = BTreeMap::new();
        fine.insert("person-actor".to_string(), TypeCounts { tp: 1, fp: 0, fn_: 1 });
        fine.insert("person-artist".to_string(), TypeCounts { tp: 1, fp: 1, fn_: 0 });
        let grouping: BTreeMap<String, String> = fine.keys().map(|k| (k.clone(), "person".to_string())).collect();
        let f = coarse_micro_f1(&fine, &grouping).unwrap();
        assert!((f["person"] - 2.0 / 3.0).abs() < 1e-15);

        let single: BTreeMap<String, TypeCounts> =
            [("a-x".to_string(), TypeCounts { tp: 3, fp: 1, fn_: 2 })].into();
        let g1: BTreeMap<String, String> = [("a-x".to_string(), "a".to_string())].into();
        assert_eq!(coarse_micro_f1(&single, &g1).unwrap()["a"], single["a-x"].f1());

        let zero: BTreeMap<String, TypeCounts> = [("a-x".to_string(), TypeCounts::default())].into();
        assert_eq!(coarse_micro_f1(&zero, &g1).unwrap()["a"], 0.0);
        assert!(coarse_micro_f1(&single, &BTreeMap::new()).is_err());
    }

    #[test]
    fn gap_examples() {
        assert!((gap(88.98, 89.74) + 0.76).abs() < 1e-9);
        assert!((gap(79.31, 86.48) + 7.17).abs() < 1e-9);
        assert_eq!(gap(85.6, 85.6), 0.0);
    }

    #[test]
    fn evaluate_ignores_unlearned_labels() {
        let gold = vec![vec![s(0, 0, "PER"), s(2, 2, "LOC")]];
        let pred = vec![vec![s(0, 0, "PER"), s(1, 1, "LOC")]];
        let e = evaluate(&gold, &pred, &["PER".into()], None).unwrap();
        assert_eq!(e.macro_f1, 1.0);
        assert_eq!(e.types.len(), 1);
    }
}
