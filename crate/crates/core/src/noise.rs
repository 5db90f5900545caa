use rand::Rng;

use crate::config::TokenId;
use crate::error::{Error, Result};
use crate::schedule::MaskSchedule;
use crate::sequence::{Segment, Sequence};

/// `x_t` drawn from `q(x_t | x_0)`, with the indicator of which positions were absorbed.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSample {
    pub tokens: Vec<TokenId>,
    pub masked: Vec<bool>,
    pub t: f64,
}

impl CorruptedSample {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Replace each Answer/Pad position of `x0` by `mask` independently with
/// probability `1 - α(t)`. Prompt positions are never touched.
pub fn corrupt<R: Rng + ?Sized>(
    x0: &Sequence,
    t: f64,
    schedule: MaskSchedule,
    mask: TokenId,
    rng: &mut R,
) -> Result<CorruptedSample> {
    let p = schedule.mask_probability(t)?;
    if x0.maskable().next().is_none() {
        return Err(Error::InvalidArgument("sequence has no answer or pad positions".into()));
    }
    let mut tokens = x0.tokens.clone();
    let mut masked = vec![false; x0.len()];
    for (i, seg) in x0.segments.iter().enumerate() {
        if *seg == Segment::Prompt {
            continue;
        }
        // Always draw, so the random stream does not depend on t.
        let u: f64 = rng.gen();
        if u < p {
            tokens[i] = mask;
            masked[i] = true;
        }
    }
    Ok(CorruptedSample { tokens, masked, t })
}

/// Training-time diffusion time: uniform on `(eps, 1]`.
pub fn sample_time<R: Rng + ?Sized>(eps: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen(); // [0, 1)
    1.0 - u * (1.0 - eps)
}
