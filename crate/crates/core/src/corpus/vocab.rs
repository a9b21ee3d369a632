use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::objectives::MaskingVocab;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[PAD]", "[BOS]", "[EOS]", "[SEP]", "[MASK]"];

/// Dense token table; ids `0..NUM_SPECIALS` are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    freq: Vec<u64>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            freq: Vec::new(),
        };
        for s in SPECIAL_NAMES {
            v.add(s).expect("specials are distinct");
        }
        v
    }

    pub fn add(&mut self, token: &str) -> Result<usize> {
        if self.index.contains_key(token) {
            return Err(Error::Corpus(format!("duplicate token `{token}`")));
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        self.freq.push(0);
        Ok(id)
    }

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

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.freq.get(id).copied().unwrap_or(0)
    }

    /// Adds the occurrences in `ids` to the frequency table.
    pub fn count<'a>(&mut self, sentences: impl IntoIterator<Item = &'a [usize]>) -> Result<()> {
        for s in sentences {
            for &t in s {
                let f = self
                    .freq
                    .get_mut(t)
                    .ok_or_else(|| Error::Index(format!("token id {t} outside vocabulary")))?;
                *f += 1;
            }
        }
        Ok(())
    }

    pub fn masking_vocab(&self) -> MaskingVocab {
        MaskingVocab {
            mask_id: MASK,
            replacements: (NUM_SPECIALS..self.len()).collect(),
        }
    }
}
