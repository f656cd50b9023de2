use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::UNK;

/// Reserved tokens at ids 0..4: padding, begin, end, unknown.
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from the non-special tokens; ids start after the specials.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIAL_TOKENS {
            vocab.push(t.to_string())?;
        }
        for t in tokens {
            let t = t.into();
            if SPECIAL_TOKENS.contains(&t.as_str()) {
                return Err(Error::Data(format!("`{t}` is a reserved token")));
            }
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {t:?}")));
            }
            vocab.push(t)?;
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> Result<()> {
        if self.index.contains_key(&token) {
            return Err(Error::Data(format!("duplicate token `{token}`")));
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        Ok(())
    }

    /// Total size including the specials.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, line: &str) -> Vec<usize> {
        tokenize(line, self)
    }

    /// Space-joined tokens; unknown ids render as `<unk>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the first line gets the first id after the specials.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens[SPECIAL_TOKENS.len()..].join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Whitespace split; tokens missing from `vocab` map to UNK.
pub fn tokenize(line: &str, vocab: &Vocabulary) -> Vec<usize> {
    line.split_whitespace()
        .map(|t| vocab.id(t).unwrap_or(UNK))
        .collect()
}
