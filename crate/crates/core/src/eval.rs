//! Exact-match evaluation of decoding runs.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::TokenId;
use crate::decode::{decode, DecodeConfig, StructurePrior};
use crate::error::Result;
use crate::params::ModelParams;
use crate::prefill;

/// One prompt with its reference answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub priors: StructurePrior,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub items: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_iterations: f64,
    pub mean_remaining: f64,
    /// Mean of `actual_iterations / response_length`.
    pub iteration_ratio: f64,
    pub committed_tokens: usize,
    pub forward_passes: u64,
    /// Score entries per attention map, summed over every step of every decode.
    pub score_entries: u64,
    pub wall: Duration,
    /// Committed tokens per second of decode-loop wall-clock.
    pub tokens_per_second: f64,
}

/// Decode every item with `cfg` (the item's own priors apply) and count exact
/// matches of the padding-stripped answer.
pub fn evaluate(
    params: &ModelParams,
    items: &[EvalItem],
    cfg: &DecodeConfig,
    detok: &dyn Fn(TokenId) -> String,
) -> Result<EvalStats> {
    let mut s = EvalStats { items: items.len(), ..Default::default() };
    let (mut iters, mut remaining, mut ratio) = (0usize, 0usize, 0f64);
    for item in items {
        let d = decode(params, &item.prompt, cfg, &item.priors, detok)?;
        if d.answer == item.answer {
            s.correct += 1;
        }
        let h = &d.history.summary;
        iters += h.actual_iterations;
        remaining += h.remaining_tokens;
        ratio += h.actual_iterations as f64 / h.response_length as f64;
        s.committed_tokens += h.remaining_tokens;
        s.forward_passes += d.report.counters.forward_passes;
        s.score_entries += d.report.counters.score_entries;
        s.wall += d.report.wall;
    }
    let n = items.len().max(1) as f64;
    s.accuracy = s.correct as f64 / n;
    s.mean_iterations = iters as f64 / n;
    s.mean_remaining = remaining as f64 / n;
    s.iteration_ratio = ratio / n;
    s.tokens_per_second = s.committed_tokens as f64 / s.wall.as_secs_f64().max(1e-12);
    Ok(s)
}

/// Paired comparison of the same decodes with and without prompt caching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillReport {
    pub without_cache: EvalStats,
    pub with_cache: EvalStats,
    /// `(L_prompt + L_answer)^2 / (L_answer * (L_prompt + L_answer))` averaged over items.
    pub predicted_step_ratio: f64,
    /// Measured uncached/cached score entries for a non-initial step, averaged over items.
    pub measured_step_ratio: f64,
    pub speedup: f64,
    pub accuracy_drop: f64,
}

pub fn measure_prefill_effect(
    params: &ModelParams,
    items: &[EvalItem],
    cfg: &DecodeConfig,
    detok: &dyn Fn(TokenId) -> String,
) -> Result<PrefillReport> {
    let plain = DecodeConfig { prefill: false, ..cfg.clone() };
    let cached = DecodeConfig { prefill: true, ..cfg.clone() };
    let without_cache = evaluate(params, items, &plain, detok)?;
    let with_cache = evaluate(params, items, &cached, detok)?;

    let r = cfg.response_length;
    let (mut predicted, mut measured, mut n) = (0.0, 0.0, 0usize);
    for item in items {
        let p = item.prompt.len();
        predicted += prefill::score_entry_ratio(p, r);
        let a = decode(params, &item.prompt, &plain, &item.priors, detok)?;
        let b = decode(params, &item.prompt, &cached, &item.priors, detok)?;
        if let (Some(&u), Some(&c)) = (a.report.score_entries_per_step.get(1), b.report.score_entries_per_step.get(1)) {
            measured += u as f64 / c as f64;
            n += 1;
        }
    }
    let m = items.len().max(1) as f64;
    Ok(PrefillReport {
        speedup: without_cache.wall.as_secs_f64() / with_cache.wall.as_secs_f64().max(1e-12),
        accuracy_drop: without_cache.accuracy - with_cache.accuracy,
        predicted_step_ratio: predicted / m,
        measured_step_ratio: if n == 0 { 1.0 } else { measured / n as f64 },
        without_cache,
        with_cache,
    })
}
