//! Token vocabulary with reserved UNK/PAD indices and plain-text file I/O.

use crate::error::{Result, TceError};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const UNK: usize = 0;
pub const PAD: usize = 1;
const RESERVED: usize = 2;

/// Token -> dense index map. Index 0 is UNK, index 1 is PAD; file tokens
/// start at 2 in line order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut vocab = Vocabulary { index: BTreeMap::new(), tokens: Vec::new() };
        for t in tokens {
            if vocab.index.contains_key(&t) {
                return Err(TceError::Config(format!("duplicate vocabulary token {t}")));
            }
            let id = RESERVED + vocab.tokens.len();
            vocab.index.insert(t.clone(), id);
            vocab.tokens.push(t);
        }
        Ok(vocab)
    }

    /// One token per line; line number (0-based) + 2 = index.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Self::from_tokens(text.lines().map(str::to_string).filter(|l| !l.is_empty()))
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path.as_ref(), out)?;
        Ok(())
    }

    /// Total index space including the two reserved slots.
    pub fn len(&self) -> usize {
        RESERVED + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Lowercase, split on whitespace, strip punctuation; drops tokens that
    /// become empty.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                w.chars()
                    .filter(|c| !c.is_ascii_punctuation())
                    .flat_map(char::to_lowercase)
                    .collect::<String>()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }

    /// Tokenizes and maps to indices; unknown surface forms map to UNK.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let tokens = Self::tokenize(text);
        if tokens.is_empty() {
            return Err(TceError::EmptyQuery);
        }
        Ok(tokens.iter().map(|t| self.lookup(t)).collect())
    }
}
