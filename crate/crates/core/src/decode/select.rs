//! Which masked slots to commit in one iteration.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Confidence of one still-masked answer slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotConfidence {
    pub slot: usize,
    pub confidence: f64,
}

/// What to commit when no slot clears the threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// The single most confident slot.
    #[default]
    HighestConfidence,
    /// `k` slots drawn uniformly without replacement.
    Random { k: usize },
}

fn by_confidence(a: &SlotConfidence, b: &SlotConfidence) -> std::cmp::Ordering {
    b.confidence.total_cmp(&a.confidence).then(a.slot.cmp(&b.slot))
}

/// The `min(k, n)` most confident slots, ties to the lower slot index.
/// Returned in ascending slot order.
pub fn select_maskgit(candidates: &[SlotConfidence], k: usize) -> Vec<usize> {
    let mut sorted = candidates.to_vec();
    let k = k.min(sorted.len());
    if k < sorted.len() {
        sorted.select_nth_unstable_by(k, by_confidence);
    }
    let mut out: Vec<usize> = sorted[..k].iter().map(|c| c.slot).collect();
    out.sort_unstable();
    out
}

/// Every slot with confidence ≥ `gamma`; if none, the fallback's choice.
/// Returned in ascending slot order.
pub fn select_confident<R: Rng + ?Sized>(
    candidates: &[SlotConfidence],
    gamma: f64,
    fallback: Fallback,
    rng: &mut R,
) -> Vec<usize> {
    let mut out: Vec<usize> =
        candidates.iter().filter(|c| c.confidence >= gamma).map(|c| c.slot).collect();
    if out.is_empty() && !candidates.is_empty() {
        out = match fallback {
            Fallback::HighestConfidence => select_maskgit(candidates, 1),
            Fallback::Random { k } => {
                let k = k.min(candidates.len());
                index::sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i].slot).collect()
            }
        };
    }
    out.sort_unstable();
    out
}
