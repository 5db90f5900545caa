//! Per-slot generation history and its line-delimited file format.
//!
//! One JSON object per answer slot, in slot order:
//!
//! ```json
//! {"slot":0,"token_id":17,"token_text":"date:","iteration":3}
//! {"slot":1,"token_id":5,"token_text":"1","iteration":"prior"}
//! {"slot":7,"token_id":1,"token_text":"[PAD]","iteration":"pad"}
//! ```
//!
//! followed by one summary object
//! `{"response_length":8,"remaining_tokens":7,"actual_iterations":3,"interior_pad_slots":[]}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::TokenId;
use crate::error::{Error, Result};

/// How a slot got its token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotOrigin {
    /// Committed at this 1-based decoding iteration.
    Iteration(usize),
    /// Marker: `"prior"` (pinned by a structure prior) or `"pad"` (decoded padding).
    Marker(Marker),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    Prior,
    Pad,
}

impl SlotOrigin {
    pub const PRIOR: SlotOrigin = SlotOrigin::Marker(Marker::Prior);
    pub const PAD: SlotOrigin = SlotOrigin::Marker(Marker::Pad);

    pub fn iteration(self) -> Option<usize> {
        match self {
            SlotOrigin::Iteration(i) => Some(i),
            SlotOrigin::Marker(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: usize,
    pub token_id: TokenId,
    pub token_text: String,
    pub iteration: SlotOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub response_length: usize,
    pub remaining_tokens: usize,
    pub actual_iterations: usize,
    #[serde(default)]
    pub interior_pad_slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationHistory {
    pub slots: Vec<SlotRecord>,
    pub summary: HistorySummary,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Slot(SlotRecord),
    Summary(HistorySummary),
}

impl GenerationHistory {
    /// Checks the accounting invariants: every decoded non-pad slot carries an
    /// iteration in `[1, actual_iterations]` and there were no more iterations
    /// than slots to decode.
    pub fn validate(&self) -> Result<()> {
        let s = &self.summary;
        if self.slots.len() != s.response_length {
            return Err(Error::InvalidArgument("slot count differs from response length".into()));
        }
        let priors = self.slots.iter().filter(|r| r.iteration == SlotOrigin::PRIOR).count();
        if s.remaining_tokens + priors != s.response_length {
            return Err(Error::InvalidArgument("remaining tokens do not add up".into()));
        }
        if s.actual_iterations > s.remaining_tokens {
            return Err(Error::InvalidArgument("more iterations than decoded slots".into()));
        }
        for (i, r) in self.slots.iter().enumerate() {
            if r.slot != i {
                return Err(Error::InvalidArgument(format!("slot records out of order at {i}")));
            }
            if let Some(it) = r.iteration.iteration() {
                if it == 0 || it > s.actual_iterations {
                    return Err(Error::InvalidArgument(format!("slot {i} has iteration {it}")));
                }
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.slots {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &self.summary)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_string_lines(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut slots = Vec::new();
        let mut summary = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(Error::InvalidArgument(format!("record after summary on line {}", n + 1)));
            }
            match serde_json::from_str::<Line>(&line) {
                Ok(Line::Slot(s)) => slots.push(s),
                Ok(Line::Summary(s)) => summary = Some(s),
                Err(e) => return Err(Error::InvalidArgument(format!("line {}: {e}", n + 1))),
            }
        }
        let summary = summary.ok_or_else(|| Error::InvalidArgument("missing summary record".into()))?;
        let h = GenerationHistory { slots, summary };
        h.validate()?;
        Ok(h)
    }
}
