//! Prompt key/value caching for iterative decoding.
//!
//! The cache is taken from the first decoding pass (prompt followed by the
//! initial answer window) and reused unchanged by later steps, which then only
//! run the answer positions through the network. Under causal attention the
//! prompt states cannot see the answer, so reuse is exact. Under full
//! attention the prompt states were computed against the step-1 window and go
//! stale as answer slots are committed.

use crate::config::TokenId;
use crate::error::{Error, Result};
use crate::model::{self, AttentionMode, Counters, LayerKv, Logits};
use crate::params::ModelParams;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct KVCache<T: Scalar = f32> {
    layers: Vec<LayerKv<T>>,
    mode: AttentionMode,
    prompt_tokens: Vec<TokenId>,
    fingerprint: u64,
}

impl<T: Scalar> KVCache<T> {
    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    pub fn prompt_length(&self) -> usize {
        self.prompt_tokens.len()
    }

    pub fn prompt_tokens(&self) -> &[TokenId] {
        &self.prompt_tokens
    }

    pub fn layers(&self) -> &[LayerKv<T>] {
        &self.layers
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub(crate) fn check_compatible(&self, params: &ModelParams<T>, mode: AttentionMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::CacheModeMismatch { cached: self.mode, requested: mode });
        }
        if self.fingerprint != params.fingerprint() {
            return Err(Error::CacheMismatch("cache was built from different parameters".into()));
        }
        if self.layers.len() != params.config().n_layers {
            return Err(Error::CacheMismatch("layer count differs".into()));
        }
        Ok(())
    }
}

fn answer_rows<T: Scalar>(logits: Logits<T>, answer_len: usize) -> Logits<T> {
    let skip = logits.rows - answer_len;
    Logits { rows: answer_len, cols: logits.cols, data: logits.data[skip * logits.cols..].to_vec() }
}

/// Run the full first pass over `prompt ⊕ window`, keeping the prompt
/// positions' keys and values. Returns the cache and the answer-slot logits of
/// that same pass.
pub fn build_cache<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[TokenId],
    window: &[TokenId],
    mode: AttentionMode,
    counters: &mut Counters,
) -> Result<(KVCache<T>, Logits<T>)> {
    let tokens: Vec<TokenId> = prompt.iter().chain(window).copied().collect();
    let (logits, layers) = model::forward_retaining(params, &tokens, mode, prompt.len(), counters)?;
    let cache = KVCache { layers, mode, prompt_tokens: prompt.to_vec(), fingerprint: params.fingerprint() };
    Ok((cache, answer_rows(logits, window.len())))
}

/// Answer-slot logits computed from the cached prompt states plus fresh
/// states for `window`. Each attention map holds
/// `window.len() * (prompt_len + window.len())` scores.
pub fn step_with_cache<T: Scalar>(
    params: &ModelParams<T>,
    window: &[TokenId],
    cache: &KVCache<T>,
    counters: &mut Counters,
) -> Result<Logits<T>> {
    cache.check_compatible(params, cache.mode)?;
    if window.is_empty() {
        return Err(Error::InvalidArgument("empty answer window".into()));
    }
    model::forward_suffix(params, window, cache.prompt_length(), cache.mode, &cache.layers, counters)
}

/// Score entries per attention map for one uncached decoding step.
pub fn uncached_score_entries(prompt_len: usize, answer_len: usize) -> u64 {
    let l = (prompt_len + answer_len) as u64;
    l * l
}

/// Score entries per attention map for one cached decoding step.
pub fn cached_score_entries(prompt_len: usize, answer_len: usize) -> u64 {
    (answer_len * (prompt_len + answer_len)) as u64
}

/// Predicted per-step reduction in attention-score work from prefilling.
pub fn score_entry_ratio(prompt_len: usize, answer_len: usize) -> f64 {
    uncached_score_entries(prompt_len, answer_len) as f64 / cached_score_entries(prompt_len, answer_len) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> ModelParams<f32> {
        let cfg = ModelConfig {
            vocab_size: 16,
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 32,
            special_tokens: Default::default(),
        };
        ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(score_entry_ratio(120, 8), 16.0);
        assert_eq!(score_entry_ratio(0, 8), 1.0);
    }

    #[test]
    fn causal_cached_step_matches_recompute() {
        let p = params(0);
        let prompt = [2u32, 5, 6, 7, 8, 3, 2];
        let (cache, first) = build_cache(&p, &prompt, &[0; 4], AttentionMode::Causal, &mut Counters::default()).unwrap();
        let full0 = model::forward(&p, &[&prompt[..], &[0; 4]].concat(), AttentionMode::Causal, None).unwrap();
        assert_eq!(first.data, full0.data[prompt.len() * 16..]);
        let window = [9u32, 0, 11, 1];
        let mut c = Counters::default();
        let cached = step_with_cache(&p, &window, &cache, &mut c).unwrap();
        assert_eq!(c.last_score_entries, cached_score_entries(7, 4));
        let full = model::forward(&p, &[&prompt[..], &window[..]].concat(), AttentionMode::Causal, None).unwrap();
        for (a, b) in cached.data.iter().zip(&full.data[prompt.len() * 16..]) {
            assert!((a - b).abs() < 1e-5);
        }
        let via_forward = model::forward(&p, &[&prompt[..], &window[..]].concat(), AttentionMode::Causal, Some(&cache)).unwrap();
        assert_eq!(via_forward, cached);
    }

    #[test]
    fn full_mode_unchanged_window_reproduces_build_pass() {
        let p = params(1);
        let prompt = [2u32, 5, 6, 3, 2];
        let window = [0u32; 3];
        let (cache, first) = build_cache(&p, &prompt, &window, AttentionMode::Full, &mut Counters::default()).unwrap();
        let again = step_with_cache(&p, &window, &cache, &mut Counters::default()).unwrap();
        for (a, b) in again.data.iter().zip(&first.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn full_mode_prompt_states_depend_on_window() {
        let p = params(2);
        let prompt = [2u32, 5, 6, 3, 2];
        let (a, _) = build_cache(&p, &prompt, &[0, 0, 0], AttentionMode::Full, &mut Counters::default()).unwrap();
        let (b, _) = build_cache(&p, &prompt, &[0, 9, 0], AttentionMode::Full, &mut Counters::default()).unwrap();
        // First layer sees only embeddings of the prompt itself.
        assert_eq!(a.layers()[0], b.layers()[0]);
        assert_ne!(a.layers()[1], b.layers()[1]);
    }

    #[test]
    fn mismatches_are_rejected() {
        let p = params(3);
        let q = params(4);
        let prompt = [2u32, 5, 3];
        let (cache, _) = build_cache(&p, &prompt, &[0, 0], AttentionMode::Full, &mut Counters::default()).unwrap();
        assert!(step_with_cache(&q, &[0, 0], &cache, &mut Counters::default()).is_err());
        assert!(matches!(
            model::forward(&p, &[2, 5, 3, 0], AttentionMode::Causal, Some(&cache)),
            Err(Error::CacheModeMismatch { .. })
        ));
        assert!(model::forward(&p, &[2, 6, 3, 0], AttentionMode::Full, Some(&cache)).is_err());
        assert!(model::forward(&p, &[2, 5, 3], AttentionMode::Full, Some(&cache)).is_err());
    }
}
