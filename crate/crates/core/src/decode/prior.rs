use serde::{Deserialize, Serialize};

use crate::config::TokenId;
use crate::error::{Error, Result};

/// Tokens pinned at answer-window positions before decoding starts. Negative
/// positions count from the end of the window (`-1` is the last slot).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructurePrior {
    pub entries: Vec<(i64, TokenId)>,
}

impl StructurePrior {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(entries: Vec<(i64, TokenId)>) -> Self {
        StructurePrior { entries }
    }

    /// Place `tokens` so the run ends `from_end` slots before the window end
    /// (`from_end = 0` makes the run the window's suffix).
    pub fn suffix(tokens: &[TokenId], from_end: usize) -> Self {
        let n = tokens.len() as i64;
        let base = -(n + from_end as i64);
        StructurePrior { entries: tokens.iter().enumerate().map(|(i, &t)| (base + i as i64, t)).collect() }
    }

    /// Place `tokens` starting at absolute slot `start`.
    pub fn at(start: usize, tokens: &[TokenId]) -> Self {
        StructurePrior { entries: tokens.iter().enumerate().map(|(i, &t)| ((start + i) as i64, t)).collect() }
    }

    pub fn merged(mut self, other: StructurePrior) -> Self {
        self.entries.extend(other.entries);
        self
    }

    /// Absolute `(slot, token)` pairs sorted by slot; positions must be distinct
    /// and inside `[0, response_length)`.
    pub fn resolve(&self, response_length: usize, vocab_size: usize) -> Result<Vec<(usize, TokenId)>> {
        let r = response_length as i64;
        let mut out = Vec::with_capacity(self.entries.len());
        for &(pos, tok) in &self.entries {
            let abs = if pos < 0 { r + pos } else { pos };
            if abs < 0 || abs >= r {
                return Err(Error::InvalidArgument(format!(
                    "prior position {pos} outside a window of {response_length}"
                )));
            }
            if tok as usize >= vocab_size {
                return Err(Error::TokenOutOfRange { id: tok, pos: abs as usize, vocab: vocab_size });
            }
            out.push((abs as usize, tok));
        }
        out.sort_by_key(|&(s, _)| s);
        if out.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("two priors resolve to the same slot".into()));
        }
        Ok(out)
    }
}
