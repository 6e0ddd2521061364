use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{RammError, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

/// Token ids with a leading `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(RammError::Contract("token sequence must start with [CLS]".into()));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

fn splitter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{L}\p{N}]+|[^\s\p{L}\p{N}]").expect("static pattern"))
}

/// Lowercase, then split into runs of letters/digits; every other
/// non-space character is a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    splitter()
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

impl Vocab {
    /// Specials first, then `words` in order, skipping repeats.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    /// Vocabulary of every token appearing in `texts`, in first-seen order.
    pub fn from_texts<S: AsRef<str>>(texts: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocab::new(std::iter::empty::<&str>());
        for t in texts {
            for w in split_words(t.as_ref()) {
                v.push(&w);
            }
        }
        v
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len() as u32);
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend(
            split_words(text)
                .iter()
                .map(|w| self.id(w).unwrap_or(UNK))
                .take(max_len.saturating_sub(1)),
        );
        TokenSequence { ids }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => RammError::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(RammError::format("vocabulary", "missing special tokens"));
        }
        Ok(Vocab::new(lines[SPECIALS.len()..].iter().copied()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(["ct", "scan", "!"])
    }

    #[test]
    fn empty_text_is_cls_only() {
        assert_eq!(vocab().tokenize("", 16).ids(), &[CLS]);
    }

    #[test]
    fn simple_words() {
        let v = vocab();
        assert_eq!(v.tokenize("ct scan", 16).ids(), &[CLS, 4, 5]);
    }

    #[test]
    fn case_spacing_and_punctuation_golden() {
        let v = vocab();
        // frozen: punctuation is its own token, whitespace runs collapse
        assert_eq!(v.tokenize("CT   Scan!", 16).ids(), &[CLS, 4, 5, 6]);
        assert_eq!(v.tokenize("CT, scan?", 16).ids(), &[CLS, 4, UNK, 5, UNK]);
        assert_eq!(split_words("Left-sided  mass (3cm)."), ["left", "-", "sided", "mass", "(", "3cm", ")", "."]);
    }

    #[test]
    fn truncation_and_oov() {
        let v = vocab();
        assert_eq!(v.tokenize("ct mri scan ct", 3).ids(), &[CLS, 4, UNK]);
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        vocab().save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), vocab());
        std::fs::write(&p, "a\nb\n").unwrap();
        assert!(Vocab::load(&p).is_err());
    }

    #[test]
    fn sequence_requires_cls() {
        assert!(TokenSequence::new(vec![4, 5]).is_err());
        assert!(TokenSequence::new(vec![CLS, 4]).is_ok());
    }
}
