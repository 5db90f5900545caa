//! Autoregressive-then-diffusion training.
//!
//! Phase `Ar` trains next-token prediction under causal attention on
//! EOS-terminated answers. Phase `Diffusion` switches to full attention and the
//! masked-token objective on padded answer windows. A recipe chains phases.

mod optim;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::loss::{self, LossSpec};
use crate::model::AttentionMode;
use crate::noise::{corrupt, sample_time};
use crate::padding::prepare_diffusion_sample;
use crate::params::{Gradients, ModelParams};
use crate::schedule::MaskSchedule;
use crate::sequence::{Dialogue, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ar,
    Diffusion,
}

impl Phase {
    pub fn attention(self) -> AttentionMode {
        match self {
            Phase::Ar => AttentionMode::Causal,
            Phase::Diffusion => AttentionMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub epochs: usize,
    /// Overrides `epochs`: run exactly this many updates, cycling the corpus.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub max_grad_norm: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Lower bound of the diffusion time draw, `t ~ U(eps, 1]`.
    #[serde(default = "default_t_eps")]
    pub t_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_t_eps() -> f64 {
    0.01
}

impl TrainConfig {
    /// Causal next-token phase with clip norm 1.0.
    pub fn ar(lr: f64, batch_size: usize, max_steps: usize, seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Ar,
            lr,
            batch_size,
            epochs: 1,
            max_steps: Some(max_steps),
            warmup_ratio: 0.03,
            lr_schedule: LrSchedule::LinearDecay,
            max_grad_norm: 1.0,
            optimizer: AdamWConfig::default(),
            t_epsilon: default_t_eps(),
            seed,
        }
    }

    /// Masked-diffusion phase with clip norm 0.1.
    pub fn diffusion(lr: f64, batch_size: usize, max_steps: usize, seed: u64) -> Self {
        TrainConfig { phase: Phase::Diffusion, max_grad_norm: 0.1, ..Self::ar(lr, batch_size, max_steps, seed) }
    }

    pub fn total_steps(&self, corpus_len: usize) -> usize {
        self.max_steps.unwrap_or_else(|| self.epochs * corpus_len.div_ceil(self.batch_size.max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup ratio must be in [0, 1)");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max grad norm must be positive");
        }
        if !(self.t_epsilon > 0.0 && self.t_epsilon < 1.0) {
            return bad("t_epsilon must be in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Option<Phase>,
    pub steps: usize,
    pub warmup_steps: usize,
    pub losses: Vec<f32>,
    pub lrs: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub clipped_norms: Vec<f64>,
    pub wall: Duration,
    pub checkpoint: Option<PathBuf>,
}

/// Sequences for one draw of a sample. Diffusion form is re-padded each time
/// the sample is visited so window sizes vary across epochs.
fn phase_sequence(d: &Dialogue, phase: Phase, params: &ModelParams, rng: &mut ChaCha8Rng) -> Result<Sequence> {
    let sp = params.config().special_tokens;
    let ar = d.to_sequence(sp);
    match phase {
        Phase::Ar => Ok(ar),
        Phase::Diffusion => prepare_diffusion_sample(&ar, sp, rng),
    }
}

/// Loss and gradient of one sample under the phase's objective. A diffusion
/// draw that masks nothing contributes zero loss and zero gradient.
pub fn sample_loss(
    params: &ModelParams,
    seq: &Sequence,
    phase: Phase,
    t_epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(f32, Gradients)>> {
    match phase {
        Phase::Ar => loss::backward(params, seq, AttentionMode::Causal, &LossSpec::Autoregressive).map(Some),
        Phase::Diffusion => {
            let t = sample_time(t_epsilon, rng);
            let cs = corrupt(seq, t, MaskSchedule::Linear, params.config().special_tokens.mask, rng)?;
            if cs.masked_count() == 0 {
                return Ok(None);
            }
            loss::backward(params, seq, AttentionMode::Full, &LossSpec::Diffusion(&cs)).map(Some)
        }
    }
}

/// Train one phase. Deterministic given `cfg.seed`; optimizer state starts fresh.
pub fn train_phase(params: &ModelParams, corpus: &[Dialogue], cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let start = Instant::now();
    let total = cfg.total_steps(corpus.len());
    let warmup = (cfg.warmup_ratio * total as f64).floor() as usize;
    let mut params = params.clone();
    let mut opt = AdamW::new(cfg.optimizer, params.data().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut report = TrainReport { phase: Some(cfg.phase), steps: total, warmup_steps: warmup, ..Default::default() };
    let inv_batch = 1.0 / cfg.batch_size as f32;

    for step in 0..total {
        let mut grads = Gradients::zeros_like(&params);
        let mut batch_loss = 0f32;
        let mut ids = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let id = order[cursor];
            cursor += 1;
            ids.push(id);
            let seq = phase_sequence(&corpus[id], cfg.phase, &params, &mut rng)?;
            let diverged = |detail: String| Error::Diverged { step, samples: vec![id], detail };
            match sample_loss(&params, &seq, cfg.phase, cfg.t_epsilon, &mut rng) {
                Ok(Some((l, g))) => {
                    batch_loss += l;
                    grads.add(&g);
                }
                Ok(None) => {}
                Err(Error::NonFinite(what)) => return Err(diverged(format!("non-finite {what}"))),
                Err(e) => return Err(e),
            }
        }
        batch_loss *= inv_batch;
        grads.scale(inv_batch);
        if !batch_loss.is_finite() {
            return Err(Error::Diverged { step, samples: ids, detail: format!("loss = {batch_loss}") });
        }
        let (before, after) = clip_grad_norm(&mut grads.data, cfg.max_grad_norm);
        let lr = cfg.lr_schedule.lr_at(cfg.lr, step, warmup, total);
        opt.step(params.data_mut(), &grads.data, lr);
        if !params.is_finite() {
            return Err(Error::Diverged { step, samples: ids, detail: "non-finite parameters".into() });
        }
        report.losses.push(batch_loss);
        report.lrs.push(lr);
        report.grad_norms.push(before);
        report.clipped_norms.push(after);
    }
    report.wall = start.elapsed();
    Ok((params, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// Autoregressive phase, then diffusion phase.
    Hybrid,
    /// Diffusion phase only.
    PureDiffusion,
}

/// Per-phase configs of a recipe. `PureDiffusion` only reads `diffusion`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub ar: TrainConfig,
    pub diffusion: TrainConfig,
}

impl PipelineConfig {
    /// Diffusion-only config spending the same number of updates as the hybrid
    /// recipe over `corpus_len` samples, at the autoregressive phase's
    /// from-scratch learning rate.
    pub fn equal_budget_pure(&self, corpus_len: usize) -> TrainConfig {
        let steps = self.ar.total_steps(corpus_len) + self.diffusion.total_steps(corpus_len);
        TrainConfig {
            max_steps: Some(steps),
            lr: self.ar.lr,
            warmup_ratio: self.ar.warmup_ratio,
            ..self.diffusion.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub params: ModelParams,
    pub reports: Vec<TrainReport>,
}

/// Run a recipe from `init`, writing a checkpoint after each phase when
/// `checkpoint_dir` is given.
pub fn run_pipeline(
    recipe: Recipe,
    init: &ModelParams,
    corpus: &[Dialogue],
    cfg: &PipelineConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PipelineResult> {
    if cfg.ar.phase != Phase::Ar || cfg.diffusion.phase != Phase::Diffusion {
        return Err(Error::InvalidArgument("phase configs are swapped".into()));
    }
    let phases: Vec<&TrainConfig> = match recipe {
        Recipe::Hybrid => {
            if cfg.diffusion.lr > cfg.ar.lr {
                return Err(Error::InvalidArgument("diffusion lr must not exceed autoregressive lr".into()));
            }
            vec![&cfg.ar, &cfg.diffusion]
        }
        Recipe::PureDiffusion => vec![&cfg.diffusion],
    };
    let mut params = init.clone();
    let mut reports = Vec::new();
    for (i, phase_cfg) in phases.into_iter().enumerate() {
        let (next, mut report) = if phase_cfg.total_steps(corpus.len()) == 0 {
            (params.clone(), TrainReport { phase: Some(phase_cfg.phase), ..Default::default() })
        } else {
            train_phase(&params, corpus, phase_cfg)?
        };
        params = next;
        if let Some(dir) = checkpoint_dir {
            let name = match phase_cfg.phase {
                Phase::Ar => format!("phase{}-ar.ckpt", i + 1),
                Phase::Diffusion => format!("phase{}-diffusion.ckpt", i + 1),
            };
            let path = dir.join(name);
            checkpoint::save(&path, &params)?;
            report.checkpoint = Some(path);
        }
        reports.push(report);
    }
    Ok(PipelineResult { params, reports })
}
