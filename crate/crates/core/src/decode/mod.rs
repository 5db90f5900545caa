//! Iterative parallel unmasking of a fixed-size answer window.
//!
//! Every iteration runs the model over `prompt ⊕ window` with full attention,
//! scores each still-masked slot, commits a subset of slots, and repeats until
//! no MASK remains. Committed slots are never revisited.

mod history;
mod prior;
mod revise;
mod select;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use history::{GenerationHistory, HistorySummary, Marker, SlotOrigin, SlotRecord};
pub use prior::StructurePrior;
pub use revise::{confidence, revise_probs, softmax, ConfidenceMeasure};
pub use select::{select_confident, select_maskgit, Fallback, SlotConfidence};

use crate::config::TokenId;
use crate::error::{Error, Result};
use crate::model::{self, AttentionMode, Counters, Logits};
use crate::params::ModelParams;
use crate::prefill::{self, KVCache};

/// Slot-selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Commit the `k` most confident masked slots per iteration.
    MaskGit { k: usize },
    /// Commit every slot whose confidence is at least `gamma`, else fall back.
    Confident {
        gamma: f64,
        #[serde(default)]
        fallback: Fallback,
    },
}

/// Which distribution confidences are computed from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Raw model probabilities, before temperature or nucleus truncation.
    #[default]
    PreRevision,
    /// The revised distribution tokens are sampled from.
    PostRevision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub response_length: usize,
    pub max_steps: usize,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default)]
    pub confidence_measure: ConfidenceMeasure,
    #[serde(default)]
    pub confidence_source: ConfidenceSource,
    #[serde(default)]
    pub prefill: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_top_p() -> f64 {
    1.0
}

impl DecodeConfig {
    /// One token per step with as many steps as slots, temperature 0.
    pub fn one_per_step(response_length: usize) -> Self {
        DecodeConfig {
            response_length,
            max_steps: response_length,
            algorithm: Algorithm::MaskGit { k: 1 },
            temperature: 0.0,
            top_p: 1.0,
            confidence_measure: ConfidenceMeasure::MaxProb,
            confidence_source: ConfidenceSource::PreRevision,
            prefill: false,
            seed: 0,
        }
    }

    /// Threshold decoding with the highest-confidence fallback.
    pub fn confident(response_length: usize, gamma: f64) -> Self {
        DecodeConfig {
            algorithm: Algorithm::Confident { gamma, fallback: Fallback::HighestConfidence },
            ..Self::one_per_step(response_length)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.response_length == 0 || self.max_steps == 0 {
            return Err(Error::InvalidArgument("response_length and max_steps must be positive".into()));
        }
        match self.algorithm {
            Algorithm::MaskGit { k: 0 } | Algorithm::Confident { fallback: Fallback::Random { k: 0 }, .. } => {
                return Err(Error::InvalidArgument("k must be at least 1".into()))
            }
            Algorithm::Confident { gamma, .. } if !(gamma >= 0.0) => {
                return Err(Error::InvalidArgument(format!("gamma {gamma} must be non-negative")))
            }
            _ => {}
        }
        if !(self.temperature >= 0.0) || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument("temperature must be >= 0 and top_p in (0, 1]".into()));
        }
        Ok(())
    }
}

/// The evolving answer window. `None` marks a slot still holding MASK.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub slots: Vec<Option<TokenId>>,
    pub origins: Vec<Option<SlotOrigin>>,
    pub iteration: usize,
}

impl DecodeState {
    fn new(response_length: usize, priors: &[(usize, TokenId)]) -> Self {
        let mut s = DecodeState {
            slots: vec![None; response_length],
            origins: vec![None; response_length],
            iteration: 0,
        };
        for &(slot, tok) in priors {
            s.slots[slot] = Some(tok);
            s.origins[slot] = Some(SlotOrigin::PRIOR);
        }
        s
    }

    pub fn masked_slots(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|&i| self.slots[i].is_none()).collect()
    }

    /// Token ids of the window, with MASK in undecided slots.
    pub fn window(&self, mask: TokenId) -> Vec<TokenId> {
        self.slots.iter().map(|s| s.unwrap_or(mask)).collect()
    }
}

/// Slots chosen in one iteration and the tokens sampled for them.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub commits: Vec<(usize, TokenId)>,
}

impl StepPlan {
    pub fn slots(&self) -> Vec<usize> {
        self.commits.iter().map(|&(s, _)| s).collect()
    }
}

/// Random streams used by the decoder. Slot selection and token sampling draw
/// from separate streams so that changing the sampling temperature cannot
/// perturb which slots are chosen.
#[derive(Debug, Clone)]
pub struct DecodeRng {
    select: ChaCha8Rng,
    sample: ChaCha8Rng,
}

impl DecodeRng {
    pub fn new(seed: u64) -> Self {
        let mut select = ChaCha8Rng::seed_from_u64(seed);
        select.set_stream(1);
        let mut sample = ChaCha8Rng::seed_from_u64(seed);
        sample.set_stream(2);
        DecodeRng { select, sample }
    }
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Decide one iteration: score every masked slot, select, and sample tokens.
/// `logits` holds one row per answer slot. MASK is never proposed as a token.
pub fn plan_step(
    logits: &Logits<f32>,
    state: &DecodeState,
    cfg: &DecodeConfig,
    mask: TokenId,
    rng: &mut DecodeRng,
) -> Result<StepPlan> {
    let masked = state.masked_slots();
    let mut revised = Vec::with_capacity(masked.len());
    let mut candidates = Vec::with_capacity(masked.len());
    let mut row = vec![0f32; logits.cols];
    for &slot in &masked {
        row.copy_from_slice(logits.row(slot));
        row[mask as usize] = f32::NEG_INFINITY;
        let post = revise_probs(&row, cfg.temperature, cfg.top_p)?;
        let c = match cfg.confidence_source {
            ConfidenceSource::PreRevision => confidence(&softmax(&row)?, cfg.confidence_measure),
            ConfidenceSource::PostRevision => confidence(&post, cfg.confidence_measure),
        };
        candidates.push(SlotConfidence { slot, confidence: c });
        revised.push(post);
    }
    let chosen = match cfg.algorithm {
        Algorithm::MaskGit { k } => select_maskgit(&candidates, k),
        Algorithm::Confident { gamma, fallback } => select_confident(&candidates, gamma, fallback, &mut rng.select),
    };
    let commits = chosen
        .into_iter()
        .map(|slot| {
            let idx = masked.binary_search(&slot).expect("selected slot is masked");
            // One draw per committed slot regardless of temperature.
            let u: f64 = rng.sample.gen();
            (slot, sample_index(&revised[idx], u) as TokenId)
        })
        .collect();
    Ok(StepPlan { commits })
}

/// Timing and work counters of one decode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub counters: Counters,
    /// Score entries per attention map, one entry per iteration.
    pub score_entries_per_step: Vec<u64>,
    pub iteration_wall: Vec<Duration>,
    pub wall: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Full answer window.
    pub window: Vec<TokenId>,
    /// Window with the trailing padding run removed.
    pub answer: Vec<TokenId>,
    pub history: GenerationHistory,
    /// Slot picks per iteration, in order.
    pub plans: Vec<StepPlan>,
    pub report: DecodeReport,
}

/// State at the point a decode ran out of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialDecode {
    pub state: DecodeState,
    pub plans: Vec<StepPlan>,
}

/// Decode a response window of `cfg.response_length` slots after `prompt`.
///
/// `detok` renders token ids for the history records.
pub fn decode(
    params: &ModelParams<f32>,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    priors: &StructurePrior,
    detok: &dyn Fn(TokenId) -> String,
) -> Result<Decoded> {
    cfg.validate()?;
    let mc = params.config();
    let sp = mc.special_tokens;
    let r = cfg.response_length;
    if prompt.len() + r > mc.max_seq_len {
        return Err(Error::LengthOverflow { len: prompt.len() + r, max: mc.max_seq_len });
    }
    let resolved = priors.resolve(r, mc.vocab_size)?;
    let mut state = DecodeState::new(r, &resolved);
    let mut rng = DecodeRng::new(cfg.seed);
    let mut report = DecodeReport::default();
    let mut plans = Vec::new();
    let mut cache: Option<KVCache<f32>> = None;
    let mut tokens: Vec<TokenId> = prompt.to_vec();
    let start = Instant::now();

    while !state.masked_slots().is_empty() {
        if state.iteration == cfg.max_steps {
            return Err(Error::IncompleteDecode(Box::new(PartialDecode { state, plans })));
        }
        let t0 = Instant::now();
        state.iteration += 1;
        let window = state.window(sp.mask);
        let logits = if cfg.prefill {
            match &cache {
                None => {
                    let (c, lg) =
                        prefill::build_cache(params, prompt, &window, AttentionMode::Full, &mut report.counters)?;
                    cache = Some(c);
                    lg
                }
                Some(c) => prefill::step_with_cache(params, &window, c, &mut report.counters)?,
            }
        } else {
            tokens.truncate(prompt.len());
            tokens.extend_from_slice(&window);
            let lg = model::forward_instrumented(params, &tokens, AttentionMode::Full, None, &mut report.counters)?;
            Logits { rows: r, cols: lg.cols, data: lg.data[prompt.len() * lg.cols..].to_vec() }
        };
        report.score_entries_per_step.push(report.counters.last_score_entries);
        let plan = plan_step(&logits, &state, cfg, sp.mask, &mut rng)?;
        for &(slot, tok) in &plan.commits {
            debug_assert!(state.slots[slot].is_none());
            state.slots[slot] = Some(tok);
            state.origins[slot] = Some(SlotOrigin::Iteration(state.iteration));
        }
        plans.push(plan);
        report.iteration_wall.push(t0.elapsed());
    }
    report.wall = start.elapsed();

    let window: Vec<TokenId> = state.slots.iter().map(|s| s.expect("all slots decoded")).collect();
    let mut end = window.len();
    while end > 0 && window[end - 1] == sp.pad && state.origins[end - 1] != Some(SlotOrigin::PRIOR) {
        end -= 1;
    }
    let answer = window[..end].to_vec();
    let mut interior_pad_slots = Vec::new();
    let slots = window
        .iter()
        .enumerate()
        .map(|(slot, &token_id)| {
            let mut origin = state.origins[slot].expect("every slot has an origin");
            if token_id == sp.pad && origin != SlotOrigin::PRIOR {
                origin = SlotOrigin::PAD;
                if slot < end {
                    interior_pad_slots.push(slot);
                }
            }
            SlotRecord { slot, token_id, token_text: detok(token_id), iteration: origin }
        })
        .collect();
    let history = GenerationHistory {
        slots,
        summary: HistorySummary {
            response_length: r,
            remaining_tokens: r - resolved.len(),
            actual_iterations: state.iteration,
            interior_pad_slots,
        },
    };
    Ok(Decoded { window, answer, history, plans, report })
}
