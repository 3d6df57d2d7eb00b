use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const NUM_RESERVED: u32 = 5;

const RESERVED: [&str; NUM_RESERVED as usize] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Maps one word to one token id. Special tokens use the fixed reserved ids
/// above regardless of implementation.
pub trait WordTokenizer {
    fn token_id(&self, word: &str) -> u32;
    /// Total id space, reserved ids included.
    fn size(&self) -> usize;
    /// Number of non-reserved entries.
    fn word_count(&self) -> usize {
        self.size().saturating_sub(NUM_RESERVED as usize)
    }
}

/// Word-level vocabulary. Ids `0..5` are `[PAD] [CLS] [SEP] [MASK] [UNK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order; duplicates are dropped.
    pub fn from_tokens<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len() as u32);
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    /// Most frequent words first (ties lexicographic), capped at `max_size`
    /// ids including the reserved ones.
    pub fn build<'a, I>(words: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.saturating_sub(NUM_RESERVED as usize);
        Self::from_tokens(ranked.into_iter().take(room).map(|(w, _)| w.to_string()))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when only the reserved tokens are present.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= NUM_RESERVED as usize
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(&VocabFile { tokens: self.tokens.clone() })
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if file.tokens.len() < RESERVED.len() || file.tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format(format!("{}: reserved tokens missing or reordered", path.display())));
        }
        Ok(Self::from_tokens(file.tokens.into_iter().skip(RESERVED.len())))
    }
}

impl WordTokenizer for Vocabulary {
    fn token_id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    fn size(&self) -> usize {
        self.tokens.len()
    }
}
