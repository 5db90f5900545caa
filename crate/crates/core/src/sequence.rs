use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::{SpecialTokens, TokenId};
use crate::error::{Error, Result};

/// Role of a token inside a training or decoding sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    /// Conditioning context: never masked, never supervised.
    Prompt,
    /// Response content (including the terminating EOS in autoregressive form).
    Answer,
    /// Padding that fills a response window after the content.
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub span: Range<usize>,
}

/// Token ids with a segment label per token and the turn structure they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
    pub turns: Vec<Turn>,
}

/// A dialogue as stored in a corpus: alternating user/assistant token runs,
/// without any special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub turns: Vec<(Role, Vec<TokenId>)>,
}

impl Dialogue {
    pub fn single(prompt: Vec<TokenId>, answer: Vec<TokenId>) -> Self {
        Dialogue { turns: vec![(Role::User, prompt), (Role::Assistant, answer)] }
    }

    /// Autoregressive training form: every turn is `[BOS] tokens [EOS]`. The
    /// assistant's BOS is context; its content and EOS are the supervised answer.
    pub fn to_sequence(&self, sp: SpecialTokens) -> Sequence {
        let mut seq = Sequence::empty();
        for (role, toks) in &self.turns {
            let start = seq.len();
            match role {
                Role::User => {
                    seq.push(sp.bos, Segment::Prompt);
                    seq.extend(toks, Segment::Prompt);
                    seq.push(sp.eos, Segment::Prompt);
                }
                Role::Assistant => {
                    seq.push(sp.bos, Segment::Prompt);
                    seq.extend(toks, Segment::Answer);
                    seq.push(sp.eos, Segment::Answer);
                }
            }
            seq.turns.push(Turn { role: *role, span: start..seq.len() });
        }
        seq
    }

    /// The conditioning context for generating the final assistant turn: every
    /// turn before it, then the assistant's BOS.
    pub fn prompt_for_last_answer(&self, sp: SpecialTokens) -> Result<(Sequence, Vec<TokenId>)> {
        let Some((Role::Assistant, answer)) = self.turns.last() else {
            return Err(Error::MalformedSequence("dialogue does not end with an assistant turn".into()));
        };
        let head = Dialogue { turns: self.turns[..self.turns.len() - 1].to_vec() };
        let mut seq = head.to_sequence(sp);
        seq.segments.iter_mut().for_each(|s| *s = Segment::Prompt);
        let start = seq.len();
        seq.push(sp.bos, Segment::Prompt);
        seq.turns.push(Turn { role: Role::Assistant, span: start..seq.len() });
        Ok((seq, answer.clone()))
    }
}

impl Sequence {
    pub fn empty() -> Self {
        Sequence { tokens: Vec::new(), segments: Vec::new(), turns: Vec::new() }
    }

    /// A sequence consisting of a single user-side prompt run.
    pub fn prompt(tokens: Vec<TokenId>) -> Self {
        let n = tokens.len();
        Sequence {
            segments: vec![Segment::Prompt; n],
            tokens,
            turns: vec![Turn { role: Role::User, span: 0..n }],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, tok: TokenId, seg: Segment) {
        self.tokens.push(tok);
        self.segments.push(seg);
    }

    pub fn extend(&mut self, toks: &[TokenId], seg: Segment) {
        self.tokens.extend_from_slice(toks);
        self.segments.extend(std::iter::repeat_n(seg, toks.len()));
    }

    pub fn count(&self, seg: Segment) -> usize {
        self.segments.iter().filter(|&&s| s == seg).count()
    }

    /// Positions the forward noising process may mask.
    pub fn maskable(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Segment::Answer | Segment::Pad))
            .map(|(i, _)| i)
    }

    /// Checks token range, label/token parallelism, and that Pad labels only
    /// follow the last Answer token within each turn.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.len() != self.segments.len() {
            return Err(Error::MalformedSequence("tokens and segments differ in length".into()));
        }
        if let Some((pos, &id)) = self.tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, pos, vocab: vocab_size });
        }
        let spans: Vec<Range<usize>> = if self.turns.is_empty() {
            vec![0..self.len()]
        } else {
            self.turns.iter().map(|t| t.span.clone()).collect()
        };
        for span in spans {
            if span.end > self.len() {
                return Err(Error::MalformedSequence("turn span past end of sequence".into()));
            }
            let mut seen_pad = false;
            for &seg in &self.segments[span] {
                match seg {
                    Segment::Pad => seen_pad = true,
                    Segment::Answer if seen_pad => {
                        return Err(Error::MalformedSequence("answer token after padding".into()))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar_form_labels_answer_and_eos_only() {
        let sp = SpecialTokens::default();
        let seq = Dialogue::single(vec![10, 11], vec![20, 21, 22]).to_sequence(sp);
        assert_eq!(seq.tokens, vec![2, 10, 11, 3, 2, 20, 21, 22, 3]);
        assert_eq!(seq.count(Segment::Answer), 4);
        assert_eq!(seq.turns.len(), 2);
        assert_eq!(seq.turns[1].span, 4..9);
        seq.validate(32).unwrap();
    }

    #[test]
    fn prompt_for_last_answer_ends_with_bos() {
        let sp = SpecialTokens::default();
        let d = Dialogue {
            turns: vec![
                (Role::User, vec![10]),
                (Role::Assistant, vec![11]),
                (Role::User, vec![12]),
                (Role::Assistant, vec![13, 14]),
            ],
        };
        let (p, ans) = d.prompt_for_last_answer(sp).unwrap();
        assert_eq!(p.tokens, vec![2, 10, 3, 2, 11, 3, 2, 12, 3, 2]);
        assert!(p.segments.iter().all(|&s| s == Segment::Prompt));
        assert_eq!(ans, vec![13, 14]);
    }

    #[test]
    fn answer_after_pad_is_rejected() {
        let mut s = Sequence::prompt(vec![5]);
        s.push(6, Segment::Pad);
        s.push(7, Segment::Answer);
        s.turns.clear();
        assert!(s.validate(16).is_err());
    }
}
