use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Sentence, Span};

/// Sentences with their type inventory and, for fine-grained inventories
/// whose labels look like `coarse-fine`, the fine → coarse grouping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub types: Vec<String>,
    pub grouping: Option<BTreeMap<String, String>>,
}

impl Corpus {
    /// Build a corpus whose inventory is every label present.
    pub fn from_sentences(sentences: Vec<Sentence>) -> Result<Self> {
        for s in &sentences {
            s.validate()?;
        }
        let types: BTreeSet<String> = sentences.iter().flat_map(|s| s.spans.iter().map(|x| x.label.clone())).collect();
        let types: Vec<String> = types.into_iter().collect();
        let grouping = coarse_grouping(&types);
        Ok(Corpus {
            sentences,
            types,
            grouping,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Mention count per type.
    pub fn type_counts(&self) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> = self.types.iter().map(|t| (t.clone(), 0)).collect();
        for s in &self.sentences {
            for sp in &s.spans {
                *out.entry(sp.label.clone()).or_default() += 1;
            }
        }
        out
    }
}

/// `person-actor` → `person` when every label has a `-`; `None` otherwise.
pub fn coarse_grouping(types: &[String]) -> Option<BTreeMap<String, String>> {
    if types.is_empty() || !types.iter().all(|t| t.contains('-')) {
        return None;
    }
    Some(
        types
            .iter()
            .map(|t| (t.clone(), t.split('-').next().unwrap_or_default().to_string()))
            .collect(),
    )
}

/// Result of parsing a column file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseReport {
    pub corpus: Corpus,
    /// I- tags that did not continue a same-type mention and were read as B-.
    pub repaired: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Piece<'a> {
    O,
    B(&'a str),
    I(&'a str),
    /// Bare IO-style label: consecutive equal labels form one mention.
    Bare(&'a str),
}

fn piece(tag: &str) -> Piece<'_> {
    if tag == "O" {
        Piece::O
    } else if let Some(l) = tag.strip_prefix("B-") {
        Piece::B(l)
    } else if let Some(l) = tag.strip_prefix("I-") {
        Piece::I(l)
    } else {
        Piece::Bare(tag)
    }
}

/// Spans of one tag column.
fn column_spans(tags: &[&str], repaired: &mut usize) -> Vec<Span> {
    let mut out = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, t) in tags.iter().enumerate() {
        let p = piece(t);
        let cont = match (p, open) {
            (Piece::I(l), Some((_, ol))) | (Piece::Bare(l), Some((_, ol))) => l == ol,
            _ => false,
        };
        if cont {
            continue;
        }
        if let Some((s, l)) = open.take() {
            out.push(Span::new(s, i - 1, l));
        }
        match p {
            Piece::O => {}
            Piece::B(l) | Piece::Bare(l) => open = Some((i, l)),
            Piece::I(l) => {
                *repaired += 1;
                open = Some((i, l));
            }
        }
    }
    if let Some((s, l)) = open {
        out.push(Span::new(s, tags.len() - 1, l));
    }
    out
}

/// Parse token-per-line column text: `token<TAB>tag[<TAB>tag...]`, blank line
/// between sentences. Each tag column is one IOB (or IO) layer, so nested
/// mentions use extra columns. `-DOCSTART-` lines are skipped.
pub fn parse_str(text: &str, origin: &str) -> Result<ParseReport> {
    let mut sentences = Vec::new();
    let mut repaired = 0;
    let mut columns: Option<usize> = None;
    let mut tokens: Vec<String> = Vec::new();
    let mut layers: Vec<Vec<&str>> = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, layers: &mut Vec<Vec<&str>>, repaired: &mut usize| {
        if tokens.is_empty() {
            return;
        }
        let mut spans = Vec::new();
        for layer in layers.iter() {
            spans.extend(column_spans(layer, repaired));
        }
        sentences.push(Sentence::new(std::mem::take(tokens), spans));
        layers.clear();
    };

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut layers, &mut repaired);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: ln + 1,
            message,
        };
        if fields.len() < 2 {
            return Err(err(format!("expected `token<TAB>tag`, found {} column(s)", fields.len())));
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(err(format!("expected {c} columns, found {}", fields.len())));
            }
            _ => {}
        }
        if fields[0].is_empty() {
            return Err(err("empty token".into()));
        }
        if fields[1..].iter().any(|t| t.is_empty()) {
            return Err(err("empty tag".into()));
        }
        if layers.is_empty() {
            layers = vec![Vec::new(); fields.len() - 1];
        }
        tokens.push(fields[0].to_string());
        for (layer, tag) in layers.iter_mut().zip(&fields[1..]) {
            layer.push(tag);
        }
    }
    flush(&mut tokens, &mut layers, &mut repaired);
    Ok(ParseReport {
        corpus: Corpus::from_sentences(sentences)?,
        repaired,
    })
}

pub fn parse_corpus(path: &Path) -> Result<ParseReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text, &path.display().to_string())
}

/// Assign spans to the fewest non-overlapping layers, earliest start first
/// and longer spans first at equal start.
fn layers(s: &Sentence) -> Vec<Vec<&Span>> {
    let mut order: Vec<&Span> = s.spans.iter().collect();
    order.sort_by(|a, b| a.start.cmp(&b.start).then(b.len().cmp(&a.len())).then(a.label.cmp(&b.label)));
    let mut out: Vec<Vec<&Span>> = Vec::new();
    for sp in order {
        match out.iter_mut().find(|l| l.iter().all(|x| !x.overlaps(sp))) {
            Some(l) => l.push(sp),
            None => out.push(vec![sp]),
        }
    }
    out
}

/// Column text for `sentences`, using as many tag columns as the most nested
/// sentence needs (at least one).
pub fn to_column_text(sentences: &[Sentence]) -> String {
    let width = sentences.iter().map(|s| layers(s).len()).max().unwrap_or(0).max(1);
    let mut out = String::new();
    for s in sentences {
        let ls = layers(s);
        let mut cols = vec![vec!["O".to_string(); s.len()]; width];
        for (c, layer) in ls.iter().enumerate() {
            for sp in layer {
                cols[c][sp.start] = format!("B-{}", sp.label);
                for cell in &mut cols[c][sp.start + 1..=sp.end] {
                    *cell = format!("I-{}", sp.label);
                }
            }
        }
        for (i, tok) in s.tokens.iter().enumerate() {
            out.push_str(tok);
            for col in &cols {
                out.push('\t');
                out.push_str(&col[i]);
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, sentences: &[Sentence]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_column_text(sentences)).map_err(|e| Error::io(path, e))
}

/// A corpus split into the usual train/dev/test portions.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl CorpusSplits {
    /// Union of the three inventories.
    pub fn types(&self) -> Vec<String> {
        let all: BTreeSet<&String> = self.train.types.iter().chain(&self.dev.types).chain(&self.test.types).collect();
        all.into_iter().cloned().collect()
    }

    pub fn grouping(&self) -> Option<BTreeMap<String, String>> {
        coarse_grouping(&self.types())
    }

    /// Read `train.txt`, `dev.txt`, `test.txt` from a directory.
    pub fn read_dir(dir: &Path) -> Result<(Self, usize)> {
        let mut repaired = 0;
        let mut read = |name: &str| -> Result<Corpus> {
            let r = parse_corpus(&dir.join(name))?;
            repaired += r.repaired;
            Ok(r.corpus)
        };
        let splits = CorpusSplits {
            train: read("train.txt")?,
            dev: read("dev.txt")?,
            test: read("test.txt")?,
        };
        Ok((splits, repaired))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        write_corpus(&dir.join("train.txt"), &self.train.sentences)?;
        write_corpus(&dir.join("dev.txt"), &self.dev.sentences)?;
        write_corpus(&dir.join("test.txt"), &self.test.sentences)
    }
}
