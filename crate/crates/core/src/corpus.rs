//! Line-delimited JSON corpus records.
//!
//! Each line is one dialogue:
//!
//! ```json
//! {"prompt_tokens":[..],"answer_tokens":[..],"turn_boundaries":[[p1,a1],[p2,a2]]}
//! ```
//!
//! Turn `i` consists of the user run `prompt_tokens[p_{i-1}..p_i]` followed by
//! the assistant run `answer_tokens[a_{i-1}..a_i]` (with `p_0 = a_0 = 0`). Token
//! runs carry no special tokens; BOS/EOS/padding are added when a record is
//! turned into a training sequence. `turn_boundaries` may be omitted for
//! single-turn records.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::TokenId;
use crate::error::{Error, Result};
use crate::sequence::{Dialogue, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub prompt_tokens: Vec<TokenId>,
    pub answer_tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turn_boundaries: Vec<[usize; 2]>,
}

impl CorpusRecord {
    pub fn from_dialogue(d: &Dialogue) -> Result<Self> {
        let mut rec = CorpusRecord { prompt_tokens: vec![], answer_tokens: vec![], turn_boundaries: vec![] };
        let mut expect_user = true;
        for (role, toks) in &d.turns {
            match (role, expect_user) {
                (Role::User, true) => rec.prompt_tokens.extend_from_slice(toks),
                (Role::Assistant, false) => {
                    rec.answer_tokens.extend_from_slice(toks);
                    rec.turn_boundaries.push([rec.prompt_tokens.len(), rec.answer_tokens.len()]);
                }
                _ => return Err(Error::MalformedSequence("turns must alternate user/assistant".into())),
            }
            expect_user = !expect_user;
        }
        if !expect_user {
            return Err(Error::MalformedSequence("dialogue ends with a user turn".into()));
        }
        Ok(rec)
    }

    pub fn to_dialogue(&self) -> Result<Dialogue> {
        let bounds = if self.turn_boundaries.is_empty() {
            vec![[self.prompt_tokens.len(), self.answer_tokens.len()]]
        } else {
            self.turn_boundaries.clone()
        };
        let (mut p0, mut a0) = (0, 0);
        let mut turns = Vec::with_capacity(bounds.len() * 2);
        for [p, a] in bounds {
            if p < p0 || a < a0 || p > self.prompt_tokens.len() || a > self.answer_tokens.len() {
                return Err(Error::MalformedSequence(format!("bad turn boundary [{p}, {a}]")));
            }
            turns.push((Role::User, self.prompt_tokens[p0..p].to_vec()));
            turns.push((Role::Assistant, self.answer_tokens[a0..a].to_vec()));
            (p0, a0) = (p, a);
        }
        if p0 != self.prompt_tokens.len() || a0 != self.answer_tokens.len() {
            return Err(Error::MalformedSequence("turn boundaries do not cover all tokens".into()));
        }
        Ok(Dialogue { turns })
    }
}

pub fn write_corpus<W: Write>(mut w: W, records: &[CorpusRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
