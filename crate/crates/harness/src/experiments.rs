//! Training recipes and decoding sweeps over the synthetic tasks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use maskdiff_core::decode::{decode, Algorithm, DecodeConfig, Fallback, StructurePrior};
use maskdiff_core::eval::{evaluate, measure_prefill_effect, EvalItem, EvalStats, PrefillReport};
use maskdiff_core::train::{run_pipeline, PipelineConfig, PipelineResult, Recipe, TrainConfig};
use maskdiff_core::{ModelConfig, ModelParams, Result, TokenId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tasks::{gen_corpus, Corpus, TaskKind, TaskSpec};
use crate::vocab::Vocab;

/// Network shape; vocabulary and special tokens come from [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelShape {
    pub fn config(&self, v: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: v.len(),
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            special_tokens: v.specials(),
        }
    }
}

/// Everything needed to reproduce a trained model: corpus, shape, recipe
/// hyperparameters and the init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelShape,
    pub tasks: Vec<TaskSpec>,
    pub train_per_task: usize,
    pub heldout_per_task: usize,
    pub pipeline: PipelineConfig,
}

impl ExperimentConfig {
    /// Copy plus extraction at a size that trains in a few minutes on one core.
    pub fn desk() -> Self {
        ExperimentConfig {
            seed: 0,
            model: ModelShape { n_layers: 2, n_heads: 4, d_model: 64, d_ff: 128, max_seq_len: 128 },
            tasks: vec![
                TaskSpec::new(TaskKind::Copy { min_len: 2, max_len: 15 }, 1),
                TaskSpec { letters: 13, ..TaskSpec::new(TaskKind::KeyValueExtract { min_filler: 75, max_filler: 75 }, 2) },
            ],
            train_per_task: 2000,
            heldout_per_task: 100,
            pipeline: PipelineConfig {
                ar: TrainConfig::ar(3e-3, 16, 3000, 11),
                diffusion: TrainConfig::diffusion(3e-4, 16, 6000, 12),
            },
        }
    }

    pub fn corpus(&self, v: &Vocab) -> Corpus {
        gen_corpus(v, &self.tasks, self.train_per_task, self.heldout_per_task)
    }

    pub fn init_params(&self, v: &Vocab) -> Result<ModelParams> {
        ModelParams::init(&self.model.config(v), &mut ChaCha8Rng::seed_from_u64(self.seed))
    }

    /// Train `recipe` from the seeded init. The pure-diffusion arm spends the
    /// same number of updates as the hybrid one.
    pub fn train(&self, v: &Vocab, recipe: Recipe, corpus: &Corpus, checkpoint_dir: Option<&Path>) -> Result<PipelineResult> {
        let init = self.init_params(v)?;
        let pipeline = match recipe {
            Recipe::Hybrid => self.pipeline.clone(),
            Recipe::PureDiffusion => PipelineConfig {
                diffusion: self.pipeline.equal_budget_pure(corpus.train.len()),
                ..self.pipeline.clone()
            },
        };
        run_pipeline(recipe, &init, &corpus.train, &pipeline, checkpoint_dir)
    }
}

/// Response length with exactly one pad after the true answer.
pub fn natural_length(item: &EvalItem) -> usize {
    item.answer.len() + 1
}

/// Sum counts and recompute averages, weighting by item count.
pub fn merge_stats(parts: &[EvalStats]) -> EvalStats {
    let mut s = EvalStats::default();
    let (mut iters, mut remaining, mut ratio) = (0.0, 0.0, 0.0);
    for p in parts {
        s.items += p.items;
        s.correct += p.correct;
        s.committed_tokens += p.committed_tokens;
        s.forward_passes += p.forward_passes;
        s.score_entries += p.score_entries;
        s.wall += p.wall;
        iters += p.mean_iterations * p.items as f64;
        remaining += p.mean_remaining * p.items as f64;
        ratio += p.iteration_ratio * p.items as f64;
    }
    let n = s.items.max(1) as f64;
    s.accuracy = s.correct as f64 / n;
    s.mean_iterations = iters / n;
    s.mean_remaining = remaining / n;
    s.iteration_ratio = ratio / n;
    s.tokens_per_second = s.committed_tokens as f64 / s.wall.as_secs_f64().max(1e-12);
    s
}

fn group_by_length(items: &[EvalItem], length: impl Fn(&EvalItem) -> usize) -> BTreeMap<usize, Vec<EvalItem>> {
    let mut groups: BTreeMap<usize, Vec<EvalItem>> = BTreeMap::new();
    for it in items {
        groups.entry(length(it)).or_default().push(it.clone());
    }
    groups
}

/// Evaluate each item at its natural length with `cfg(response_length)`.
pub fn evaluate_natural(
    params: &ModelParams,
    items: &[EvalItem],
    v: &Vocab,
    cfg: impl Fn(usize) -> DecodeConfig,
) -> Result<EvalStats> {
    let detok = |t| v.text(t);
    let parts = group_by_length(items, natural_length)
        .into_iter()
        .map(|(r, group)| evaluate(params, &group, &cfg(r), &detok))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_stats(&parts))
}

/// Run `f` over `inputs` on up to `threads` scoped threads, preserving order.
fn fan_out<I: Sync, O: Send>(inputs: &[I], threads: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    if threads <= 1 || inputs.len() <= 1 {
        return inputs.iter().map(&f).collect();
    }
    let chunk = inputs.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = inputs.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthPoint {
    pub response_length: usize,
    pub stats: EvalStats,
}

/// Accuracy of one-token-per-step decoding at each fixed response length.
/// Every item's answer must fit, with at least one pad, in the shortest length.
pub fn sweep_length_bias(
    params: &ModelParams,
    items: &[EvalItem],
    lengths: &[usize],
    v: &Vocab,
    threads: usize,
) -> Result<Vec<LengthPoint>> {
    let shortest = lengths.iter().copied().min().unwrap_or(0);
    if let Some(it) = items.iter().find(|it| natural_length(it) > shortest) {
        return Err(maskdiff_core::Error::InvalidArgument(format!(
            "answer of {} tokens does not fit a window of {shortest}",
            it.answer.len()
        )));
    }
    let detok = |t| v.text(t);
    fan_out(lengths, threads, |&r| {
        evaluate(params, items, &DecodeConfig::one_per_step(r), &detok).map(|stats| LengthPoint { response_length: r, stats })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub gamma: f64,
    pub stats: EvalStats,
}

/// Confident decoding at each threshold, natural response lengths.
pub fn sweep_confident_threshold(
    params: &ModelParams,
    items: &[EvalItem],
    gammas: &[f64],
    v: &Vocab,
    threads: usize,
) -> Result<Vec<ThresholdPoint>> {
    fan_out(gammas, threads, |&gamma| {
        evaluate_natural(params, items, v, |r| DecodeConfig::confident(r, gamma))
            .map(|stats| ThresholdPoint { gamma, stats })
    })
    .into_iter()
    .collect()
}

/// Best threshold that keeps `min_retained` of the baseline accuracy, by
/// fewest iterations per remaining token.
pub fn best_threshold(points: &[ThresholdPoint], baseline_accuracy: f64, min_retained: f64) -> Option<&ThresholdPoint> {
    points
        .iter()
        .filter(|p| p.stats.accuracy >= min_retained * baseline_accuracy)
        .min_by(|a, b| a.stats.iteration_ratio.total_cmp(&b.stats.iteration_ratio))
}

/// Prefill comparison per natural response length.
pub fn sweep_prefill(params: &ModelParams, items: &[EvalItem], v: &Vocab, cfg: &DecodeConfig) -> Result<Vec<PrefillReport>> {
    let detok = |t| v.text(t);
    group_by_length(items, natural_length)
        .into_iter()
        .map(|(r, group)| measure_prefill_effect(params, &group, &DecodeConfig { response_length: r, max_steps: r, ..cfg.clone() }, &detok))
        .collect()
}

/// Schema prior for extraction answers: `date:` `_` `,` `time:` `_`.
pub fn extraction_schema(v: &Vocab) -> StructurePrior {
    StructurePrior::new(vec![(0, v.tok("date:")), (2, v.tok(",")), (3, v.tok("time:"))])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorReport {
    pub items: usize,
    /// Decodes whose window holds every prior token at its resolved slot.
    pub preserved: usize,
    pub accuracy: f64,
    pub mean_iterations: f64,
}

/// Decode with `priors` and count verbatim preservation.
pub fn structure_prior_experiment(
    params: &ModelParams,
    items: &[EvalItem],
    priors: &StructurePrior,
    cfg: &DecodeConfig,
    v: &Vocab,
) -> Result<PriorReport> {
    let detok = |t| v.text(t);
    let resolved = priors.resolve(cfg.response_length, v.len())?;
    let (mut preserved, mut correct, mut iters) = (0, 0, 0);
    for it in items {
        let d = decode(params, &it.prompt, cfg, priors, &detok)?;
        if resolved.iter().all(|&(s, t)| d.window[s] == t) {
            preserved += 1;
        }
        if d.answer == it.answer {
            correct += 1;
        }
        iters += d.history.summary.actual_iterations;
    }
    let n = items.len().max(1) as f64;
    Ok(PriorReport { items: items.len(), preserved, accuracy: correct as f64 / n, mean_iterations: iters as f64 / n })
}

/// When the boxed result committed, relative to the whole decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyAnswer {
    /// Iteration at which the last result token committed.
    pub answer_iteration: usize,
    pub actual_iterations: usize,
    pub correct: bool,
}

/// Decode boxed-arithmetic items with the `the answer is \box{` lead-in as a
/// prior and record when the result digits commit.
pub fn early_answer_probe(
    params: &ModelParams,
    items: &[EvalItem],
    cfg: &DecodeConfig,
    v: &Vocab,
) -> Result<Vec<EarlyAnswer>> {
    let detok = |t| v.text(t);
    let lead: Vec<TokenId> = ["the", "answer", "is", "\\box{"].iter().map(|w| v.tok(w)).collect();
    let priors = StructurePrior::at(0, &lead);
    let close = v.tok("}");
    items
        .iter()
        .map(|it| {
            let d = decode(params, &it.prompt, cfg, &priors, &detok)?;
            let end = d.window.iter().position(|&t| t == close).unwrap_or(d.window.len());
            let answer_iteration = d.history.slots[lead.len().min(end)..end]
                .iter()
                .filter_map(|r| r.iteration.iteration())
                .max()
                .unwrap_or(0);
            Ok(EarlyAnswer {
                answer_iteration,
                actual_iterations: d.history.summary.actual_iterations,
                correct: d.answer == it.answer,
            })
        })
        .collect()
}

/// Decoding rule shorthand used in report rows.
pub fn describe(cfg: &DecodeConfig) -> String {
    let alg = match cfg.algorithm {
        Algorithm::MaskGit { k } => format!("maskgit k={k}"),
        Algorithm::Confident { gamma, fallback: Fallback::HighestConfidence } => format!("confident gamma={gamma}"),
        Algorithm::Confident { gamma, fallback: Fallback::Random { k } } => format!("confident gamma={gamma} random-k={k}"),
    };
    if cfg.prefill {
        format!("{alg} prefill")
    } else {
        alg
    }
}

/// One measured condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub condition: String,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_iterations: f64,
    pub iteration_ratio: f64,
    pub tokens_per_second: f64,
    pub items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_length: Option<usize>,
}

impl ReportRow {
    pub fn from_stats(model: &str, condition: String, seed: u64, s: &EvalStats) -> Self {
        ReportRow {
            model: model.to_string(),
            condition,
            seed,
            accuracy: s.accuracy,
            mean_iterations: s.mean_iterations,
            iteration_ratio: s.iteration_ratio,
            tokens_per_second: s.tokens_per_second,
            items: s.items,
            response_length: None,
        }
    }
}

/// Rows of one experiment with the seed and config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
}

#[derive(Serialize)]
struct Header<'a> {
    experiment: &'a str,
    seed: u64,
    config: &'a serde_json::Value,
}

impl ExperimentReport {
    pub fn new(experiment: &str, seed: u64, config: &impl Serialize) -> Self {
        ExperimentReport {
            experiment: experiment.to_string(),
            seed,
            config: serde_json::to_value(config).expect("configs serialize"),
            rows: Vec::new(),
        }
    }

    /// Header line (experiment, seed, config) followed by one line per row.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header { experiment: &self.experiment, seed: self.seed, config: &self.config };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!("{} (seed {})\n", self.experiment, self.seed);
        out.push_str(&format!(
            "{:<16} {:<28} {:>6} {:>9} {:>10} {:>9} {:>10}\n",
            "model", "condition", "items", "accuracy", "mean_iter", "iter/len", "tok/s"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:<28} {:>6} {:>8.1}% {:>10.2} {:>9.3} {:>10.0}\n",
                r.model,
                r.condition,
                r.items,
                100.0 * r.accuracy,
                r.mean_iterations,
                r.iteration_ratio,
                r.tokens_per_second
            ));
        }
        out
    }

    /// Same rows ignoring wall-clock derived fields.
    pub fn same_metrics(&self, other: &ExperimentReport) -> bool {
        let strip = |r: &ReportRow| ReportRow { tokens_per_second: 0.0, ..r.clone() };
        self.experiment == other.experiment
            && self.seed == other.seed
            && self.config == other.config
            && self.rows.iter().map(strip).eq(other.rows.iter().map(strip))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskdiff_core::decode::SlotOrigin;

    fn tiny() -> (Vocab, ModelParams, Vec<EvalItem>) {
        let v = Vocab::new();
        let mut cfg = ExperimentConfig::desk();
        cfg.model = ModelShape { n_layers: 1, n_heads: 2, d_model: 16, d_ff: 32, max_seq_len: 128 };
        let params = cfg.init_params(&v).unwrap();
        let corpus = cfg.corpus(&v);
        let items = crate::tasks::eval_items(&v, &corpus.heldout[..6]);
        (v, params, items)
    }

    #[test]
    fn merge_matches_single_evaluation() {
        let (v, p, items) = tiny();
        let items: Vec<_> = items.into_iter().filter(|i| i.answer.len() < 7).collect();
        let detok = |t| v.text(t);
        let whole = evaluate(&p, &items, &DecodeConfig::one_per_step(8), &detok).unwrap();
        let a = evaluate(&p, &items[..1], &DecodeConfig::one_per_step(8), &detok).unwrap();
        let b = evaluate(&p, &items[1..], &DecodeConfig::one_per_step(8), &detok).unwrap();
        let m = merge_stats(&[a, b]);
        assert_eq!(m.correct, whole.correct);
        assert!((m.mean_iterations - whole.mean_iterations).abs() < 1e-12);
        assert!((m.iteration_ratio - whole.iteration_ratio).abs() < 1e-12);
    }

    #[test]
    fn threshold_extremes_on_untrained_model() {
        let (v, p, items) = tiny();
        let pts = sweep_confident_threshold(&p, &items, &[0.0, 1.5], &v, 2).unwrap();
        assert_eq!(pts[0].stats.mean_iterations, 1.0);
        assert!((pts[1].stats.mean_iterations - pts[1].stats.mean_remaining).abs() < 1e-12);
    }

    #[test]
    fn length_sweep_rejects_items_that_do_not_fit() {
        let (v, p, items) = tiny();
        assert!(sweep_length_bias(&p, &items, &[2, 8], &v, 1).is_err());
    }

    #[test]
    fn reports_are_line_delimited_with_header() {
        let mut r = ExperimentReport::new("demo", 7, &ExperimentConfig::desk());
        r.rows.push(ReportRow::from_stats("hybrid", "L=8".into(), 7, &EvalStats { items: 3, ..Default::default() }));
        let mut buf = Vec::new();
        r.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(header["seed"], 7);
        assert!(r.summary_table().contains("L=8"));
    }

    #[test]
    fn prior_experiment_counts_preservation() {
        let (v, p, items) = tiny();
        let cfg = DecodeConfig::one_per_step(8);
        let rep = structure_prior_experiment(&p, &items, &StructurePrior::suffix(&[v.tok("}")], 0), &cfg, &v).unwrap();
        assert_eq!(rep.preserved, rep.items);
        let d = decode(&p, &items[0].prompt, &cfg, &extraction_schema(&v), &|t| v.text(t)).unwrap();
        assert_eq!(d.history.slots[0].iteration, SlotOrigin::PRIOR);
    }
}
