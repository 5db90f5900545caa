//! EOS → padding replacement for diffusion training samples.

use rand::Rng;

use crate::config::SpecialTokens;
use crate::error::{Error, Result};
use crate::sequence::{Role, Segment, Sequence, Turn};

/// Inclusive range `(n_min, n_max)` of response-window sizes for an answer of
/// `l` content tokens. The window always holds at least one pad; below 16 it
/// rounds up to a power of two, otherwise to a multiple of 16.
pub fn pad_window_bounds(l: usize) -> Result<(usize, usize)> {
    if l == 0 {
        return Err(Error::InvalidArgument("answer length must be at least 1".into()));
    }
    let n_min = l + 1;
    let n_max = if n_min < 16 { n_min.next_power_of_two() } else { n_min.div_ceil(16) * 16 };
    Ok((n_min, n_max))
}

/// Draw the response-window size `n ~ U{n_min..=n_max}` for an answer of length `l`.
pub fn pad_expansion<R: Rng + ?Sized>(l: usize, rng: &mut R) -> Result<usize> {
    let (lo, hi) = pad_window_bounds(l)?;
    Ok(rng.gen_range(lo..=hi))
}

/// Convert an autoregressive-form sequence (each assistant turn ending in EOS)
/// into diffusion form: the EOS of every assistant turn is dropped and the
/// turn's answer is padded out to a window of `pad_expansion(l)` slots. User
/// turns are copied verbatim.
pub fn prepare_diffusion_sample<R: Rng + ?Sized>(raw: &Sequence, sp: SpecialTokens, rng: &mut R) -> Result<Sequence> {
    if raw.turns.is_empty() {
        return Err(Error::MalformedSequence("sequence carries no turn structure".into()));
    }
    let mut out = Sequence::empty();
    for turn in &raw.turns {
        let start = out.len();
        let toks = &raw.tokens[turn.span.clone()];
        let segs = &raw.segments[turn.span.clone()];
        if turn.role == Role::User {
            out.tokens.extend_from_slice(toks);
            out.segments.extend_from_slice(segs);
        } else {
            let first_answer = segs.iter().position(|&s| s == Segment::Answer).ok_or_else(|| {
                Error::MalformedSequence("assistant turn without answer tokens".into())
            })?;
            if toks.last() != Some(&sp.eos) || segs[first_answer..].iter().any(|&s| s != Segment::Answer) {
                return Err(Error::MalformedSequence("assistant turn must end with an answer EOS".into()));
            }
            let content = &toks[first_answer..toks.len() - 1];
            let n = pad_expansion(content.len(), rng)?;
            out.tokens.extend_from_slice(&toks[..first_answer]);
            out.segments.extend_from_slice(&segs[..first_answer]);
            out.extend(content, Segment::Answer);
            for _ in content.len()..n {
                out.push(sp.pad, Segment::Pad);
            }
        }
        out.turns.push(Turn { role: turn.role, span: start..out.len() });
    }
    Ok(out)
}
