use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, CorpusSplits};
use crate::error::{Error, Result};
use crate::types::{Sentence, Span};

/// A mention template whose `{TYPE}` slot is filled by an inner mention,
/// producing a nested gold pair (outer type, inner type).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestingRule {
    pub outer: String,
    /// Tokens of the outer mention; exactly one of them is `{INNER}`.
    pub template: Vec<String>,
    pub inner: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    /// Entity type → mention phrases (space-separated tokens).
    pub lexicons: BTreeMap<String, Vec<String>>,
    pub fillers: Vec<String>,
    pub nesting: Vec<NestingRule>,
    pub sentences: usize,
    /// Chance that an outer-type mention uses a nesting rule when one exists.
    pub nesting_prob: f64,
    /// Chance that a sentence has no mention at all.
    pub non_entity_prob: f64,
    pub max_mentions: usize,
    /// Filler words between mentions, inclusive range.
    pub gap: (usize, usize),
}

fn words(s: &str) -> Vec<String> {
    s.split(' ').map(str::to_string).collect()
}

fn phrases(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl ToyCorpusSpec {
    /// Six types with disjoint lexicons and two nesting rules
    /// (ORG over GPE, DATE over CARD).
    pub fn six_types(sentences: usize) -> Self {
        let mut lexicons = BTreeMap::new();
        lexicons.insert(
            "PER".to_string(),
            phrases(&[
                "john smith", "mary jones", "alice", "bob brown", "carol white", "david", "emma stone", "frank lee",
                "grace kim", "henry ford", "irene adler", "jack",
            ]),
        );
        lexicons.insert(
            "ORG".to_string(),
            phrases(&[
                "acme corp", "globex", "initech", "umbrella group", "stark industries", "wayne enterprises",
                "hooli", "vandelay imports", "cyberdyne", "tyrell corp",
            ]),
        );
        lexicons.insert(
            "GPE".to_string(),
            phrases(&[
                "paris", "london", "berlin", "new york", "tokyo", "madrid", "rome", "cairo", "lima", "oslo",
                "san diego", "vienna",
            ]),
        );
        lexicons.insert(
            "DATE".to_string(),
            phrases(&[
                "monday", "last year", "january", "next week", "tuesday", "this spring", "december", "last month",
                "friday", "the weekend",
            ]),
        );
        lexicons.insert(
            "CARD".to_string(),
            phrases(&["two", "three", "seven", "twelve", "forty", "nine", "five", "eighty", "sixteen", "a dozen"]),
        );
        lexicons.insert(
            "NORP".to_string(),
            phrases(&[
                "french", "german", "republicans", "democrats", "buddhists", "italians", "japanese", "catholics",
                "socialists", "spanish",
            ]),
        );
        ToyCorpusSpec {
            lexicons,
            fillers: phrases(&[
                "the", "said", "that", "met", "with", "in", "on", "visited", "reported", "a", "and", "about",
                "from", "after", "before", "will", "was", "near", "for", "by", "told", "people", "news", "plan",
            ]),
            nesting: vec![
                NestingRule {
                    outer: "ORG".into(),
                    template: words("bank of {INNER}"),
                    inner: "GPE".into(),
                },
                NestingRule {
                    outer: "ORG".into(),
                    template: words("university of {INNER}"),
                    inner: "GPE".into(),
                },
                NestingRule {
                    outer: "DATE".into(),
                    template: words("{INNER} days ago"),
                    inner: "CARD".into(),
                },
            ],
            sentences,
            nesting_prob: 0.3,
            non_entity_prob: 0.15,
            max_mentions: 3,
            gap: (1, 3),
        }
    }

    /// Keep only the given types (lexicons and nesting rules).
    pub fn restrict(mut self, types: &[&str]) -> Self {
        self.lexicons.retain(|k, _| types.contains(&k.as_str()));
        self.nesting
            .retain(|r| types.contains(&r.outer.as_str()) && types.contains(&r.inner.as_str()));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.lexicons.is_empty() {
            errs.push("no entity types".to_string());
        }
        for (t, lex) in &self.lexicons {
            if lex.is_empty() || lex.iter().any(|p| p.trim().is_empty()) {
                errs.push(format!("empty lexicon for `{t}`"));
            }
        }
        if self.fillers.is_empty() {
            errs.push("empty filler list".into());
        }
        for r in &self.nesting {
            if !self.lexicons.contains_key(&r.outer) || !self.lexicons.contains_key(&r.inner) {
                errs.push(format!("nesting rule {}⊃{} uses an unknown type", r.outer, r.inner));
            }
            if r.template.iter().filter(|t| *t == "{INNER}").count() != 1 {
                errs.push(format!("nesting rule for `{}` needs exactly one {{INNER}} slot", r.outer));
            }
        }
        if !(0.0..=1.0).contains(&self.nesting_prob) || !(0.0..=1.0).contains(&self.non_entity_prob) {
            errs.push("probabilities must lie in [0, 1]".into());
        }
        if self.max_mentions == 0 {
            errs.push("max_mentions must be >= 1".into());
        }
        if self.gap.0 > self.gap.1 {
            errs.push("gap range is empty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &'a [String]) -> &'a String {
    &xs[rng.gen_range(0..xs.len())]
}

fn push_mention<R: Rng>(spec: &ToyCorpusSpec, ty: &str, rng: &mut R, tokens: &mut Vec<String>, spans: &mut Vec<Span>) {
    let rules: Vec<&NestingRule> = spec.nesting.iter().filter(|r| r.outer == ty).collect();
    let start = tokens.len();
    if !rules.is_empty() && rng.gen_bool(spec.nesting_prob) {
        let rule = rules[rng.gen_range(0..rules.len())];
        for part in &rule.template {
            if part == "{INNER}" {
                let s = tokens.len();
                tokens.extend(words(pick(rng, &spec.lexicons[&rule.inner])));
                spans.push(Span::new(s, tokens.len() - 1, rule.inner.clone()));
            } else {
                tokens.push(part.clone());
            }
        }
    } else {
        tokens.extend(words(pick(rng, &spec.lexicons[ty])));
    }
    spans.push(Span::new(start, tokens.len() - 1, ty));
}

/// Seeded synthetic corpus with known (possibly nested) gold spans.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types: Vec<String> = spec.lexicons.keys().cloned().collect();
    let mut sentences = Vec::with_capacity(spec.sentences);
    for _ in 0..spec.sentences {
        let mentions = if rng.gen_bool(spec.non_entity_prob) {
            0
        } else {
            rng.gen_range(1..=spec.max_mentions)
        };
        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        let fill = |rng: &mut ChaCha8Rng, tokens: &mut Vec<String>| {
            for _ in 0..rng.gen_range(spec.gap.0..=spec.gap.1) {
                tokens.push(pick(rng, &spec.fillers).clone());
            }
        };
        fill(&mut rng, &mut tokens);
        for _ in 0..mentions {
            let ty = pick(&mut rng, &types).clone();
            push_mention(spec, &ty, &mut rng, &mut tokens, &mut spans);
            fill(&mut rng, &mut tokens);
        }
        if mentions == 0 {
            fill(&mut rng, &mut tokens);
        }
        sentences.push(Sentence::new(tokens, spans));
    }
    let mut corpus = Corpus::from_sentences(sentences)?;
    corpus.types = types;
    corpus.grouping = super::corpus::coarse_grouping(&corpus.types);
    Ok(corpus)
}

/// Seeded shuffle of a corpus into train/dev/test by fractions of `train`
/// and `dev` (the rest is test).
pub fn split_corpus(corpus: &Corpus, train: f64, dev: f64, seed: u64) -> Result<CorpusSplits> {
    if !(train > 0.0 && dev >= 0.0 && train + dev < 1.0) {
        return Err(Error::InvalidArgument(format!("bad split fractions {train}/{dev}")));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (corpus.len() as f64 * train).round() as usize;
    let n_dev = (corpus.len() as f64 * dev).round() as usize;
    let take = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        Corpus {
            sentences: ids.iter().map(|&i| corpus.sentences[i].clone()).collect(),
            types: corpus.types.clone(),
            grouping: corpus.grouping.clone(),
        }
    };
    Ok(CorpusSplits {
        train: take(&idx[..n_train]),
        dev: take(&idx[n_train..n_train + n_dev]),
        test: take(&idx[n_train + n_dev..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = ToyCorpusSpec::six_types(50);
        assert_eq!(generate_toy_corpus(&spec, 4).unwrap(), generate_toy_corpus(&spec, 4).unwrap());
        assert_ne!(generate_toy_corpus(&spec, 4).unwrap(), generate_toy_corpus(&spec, 5).unwrap());
    }

    #[test]
    fn no_nesting_means_no_overlaps() {
        let mut spec = ToyCorpusSpec::six_types(200);
        spec.nesting_prob = 0.0;
        let c = generate_toy_corpus(&spec, 1).unwrap();
        for s in &c.sentences {
            for (i, a) in s.spans.iter().enumerate() {
                for b in &s.spans[i + 1..] {
                    assert!(!a.overlaps(b));
                }
            }
        }
    }

    #[test]
    fn every_type_is_frequent() {
        let c = generate_toy_corpus(&ToyCorpusSpec::six_types(500), 0).unwrap();
        assert_eq!(c.types.len(), 6);
        for (t, n) in c.type_counts() {
            assert!(n >= 20, "{t}: {n}");
        }
        assert!(c.sentences.iter().any(|s| s.spans.is_empty()));
    }

    #[test]
    fn empty_lexicon_rejected() {
        let mut spec = ToyCorpusSpec::six_types(5);
        spec.lexicons.insert("X".into(), vec![]);
        assert!(generate_toy_corpus(&spec, 0).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let c = generate_toy_corpus(&ToyCorpusSpec::six_types(100), 2).unwrap();
        let s = split_corpus(&c, 0.7, 0.1, 9).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (70, 10, 20));
    }
}
