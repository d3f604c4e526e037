use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::Sentence;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Token ↔ id map. Ids 0 and 1 are reserved for padding and unknown tokens;
/// the remaining ids follow sorted token order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;

    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let mut set = BTreeSet::new();
        for s in sentences {
            for t in &s.tokens {
                set.insert(t.as_str());
            }
        }
        Self::from_tokens(set.into_iter().map(str::to_string))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec![PAD.to_string(), UNK.to_string()];
        all.extend(tokens.into_iter().filter(|t| t != PAD && t != UNK));
        let ids = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens: all, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; the id is the line index.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 2 || lines[0] != PAD || lines[1] != UNK {
            return Err(Error::Data("vocabulary must start with <pad> and <unk>".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, l) in lines.iter().enumerate().skip(2) {
            if l.is_empty() || !seen.insert(*l) {
                return Err(Error::Parse {
                    path: "vocab".into(),
                    line: i + 1,
                    message: format!("empty or duplicate token `{l}`"),
                });
            }
        }
        Ok(Self::from_tokens(lines[2..].iter().map(|s| s.to_string())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(words: &str) -> Sentence {
        Sentence::new(words.split_whitespace().map(str::to_string).collect(), vec![])
    }

    #[test]
    fn reserved_ids_and_unknowns() {
        let v = Vocab::build(&[sent("b a c a")]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("zzz"), Vocab::UNK_ID);
        assert_eq!(v.token(0), Some(PAD));
        // bijective over non-reserved entries
        for id in 2..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
    }

    #[test]
    fn text_roundtrip() {
        let v = Vocab::build(&[sent("John runs to Paris")]);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }
}
