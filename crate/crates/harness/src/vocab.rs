//! Word-level vocabulary shared by every synthetic task.

use maskdiff_core::{SpecialTokens, TokenId};

pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";

const WORDS: &[&str] = &[
    "copy:", "extract:", "calc:", "date", "time", "date:", "time:", ",", "+", "=", "the", "answer", "is",
    "\\box{", "}",
];

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut words: Vec<String> = [MASK, PAD, BOS, EOS].iter().map(|s| s.to_string()).collect();
        words.extend((0..10).map(|d| d.to_string()));
        words.extend(('a'..='z').map(|c| c.to_string()));
        words.extend(WORDS.iter().map(|s| s.to_string()));
        Vocab { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens { mask: 0, pad: 1, bos: 2, eos: 3 }
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.words.iter().position(|w| w == word).map(|i| i as TokenId)
    }

    /// Id of a word known to be in the vocabulary.
    pub fn tok(&self, word: &str) -> TokenId {
        self.id(word).unwrap_or_else(|| panic!("{word:?} is not in the vocabulary"))
    }

    pub fn digit(&self, d: u32) -> TokenId {
        4 + d
    }

    pub fn letter(&self, i: u32) -> TokenId {
        14 + i
    }

    pub fn is_digit(&self, t: TokenId) -> bool {
        (4..14).contains(&t)
    }

    pub fn text(&self, t: TokenId) -> String {
        self.words.get(t as usize).cloned().unwrap_or_else(|| format!("<{t}>"))
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, text: &str) -> Option<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&t| self.text(t)).collect::<Vec<_>>().join(" ")
    }
}
