use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskdiff::experiments::{
    default_threads, describe, early_answer_probe, evaluate_natural, sweep_confident_threshold, sweep_length_bias,
    sweep_prefill, ExperimentConfig, ExperimentReport, ReportRow,
};
use maskdiff::render::render_history;
use maskdiff::tasks::{eval_items, prompt_for, spec_for, Corpus};
use maskdiff::vocab::Vocab;
use maskdiff_core::checkpoint;
use maskdiff_core::corpus::{read_corpus, write_corpus, CorpusRecord};
use maskdiff_core::decode::{decode, DecodeConfig, GenerationHistory, StructurePrior};
use maskdiff_core::eval::EvalItem;
use maskdiff_core::train::Recipe;
use maskdiff_core::{Dialogue, ModelParams};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "maskdiff", version, about = "Train and decode masked-diffusion models on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default experiment config (copy plus extraction).
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write train.jsonl and heldout.jsonl for an experiment config.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a recipe, writing one checkpoint per phase plus final.ckpt.
    Train {
        #[arg(long, value_enum)]
        recipe: RecipeArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory from gen-corpus; regenerated from the config when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Decode one prompt and print its generation history.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Whitespace-separated user words, e.g. "copy: a b c".
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        decoding: DecodeArgs,
        /// Structure prior `POS=WORD`; negative positions count from the end.
        #[arg(long = "prior", allow_hyphen_values = true)]
        priors: Vec<String>,
        /// Also write the history as line-delimited JSON.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        no_color: bool,
    },
    /// Exact-match accuracy on the held-out split, per task, at natural lengths.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        decoding: DecodeArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and iteration sweeps over trained checkpoints.
    #[command(subcommand)]
    Sweep(Sweep),
    /// Render a history file with an early-to-late colour gradient.
    RenderHistory {
        file: PathBuf,
        #[arg(long)]
        no_color: bool,
    },
}

#[derive(Subcommand)]
enum Sweep {
    /// Accuracy against fixed response length, one row per model and length.
    LengthBias {
        #[arg(long)]
        config: PathBuf,
        /// `NAME=CHECKPOINT`, repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        lengths: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Iterations and accuracy of threshold decoding across thresholds.
    Threshold {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.7,0.8,0.9,0.95,0.99,1.01")]
        gammas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired decodes with and without prompt caching.
    Prefill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        decoding: DecodeArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Iteration at which boxed arithmetic results commit.
    EarlyAnswer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        decoding: DecodeArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DecodeArgs {
    /// JSON decode config; defaults to one token per step at temperature 0.
    #[arg(long)]
    decode_config: Option<PathBuf>,
    /// Override the config's response length.
    #[arg(long)]
    response_length: Option<usize>,
}

impl DecodeArgs {
    fn load(&self, fallback_length: usize) -> Result<DecodeConfig> {
        let mut cfg = match &self.decode_config {
            Some(p) => read_json::<DecodeConfig>(p)?,
            None => DecodeConfig::one_per_step(fallback_length),
        };
        if let Some(r) = self.response_length {
            cfg.max_steps = cfg.max_steps.max(r);
            cfg.response_length = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config for a given natural length, keeping every other field.
    fn at_length(&self, base: &DecodeConfig, r: usize) -> DecodeConfig {
        DecodeConfig { response_length: r, max_steps: r, ..base.clone() }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RecipeArg {
    Hybrid,
    PureDiffusion,
}

impl From<RecipeArg> for Recipe {
    fn from(r: RecipeArg) -> Self {
        match r {
            RecipeArg::Hybrid => Recipe::Hybrid,
            RecipeArg::PureDiffusion => Recipe::PureDiffusion,
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_params(path: &Path, v: &Vocab) -> Result<ModelParams> {
    let p = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if p.config().vocab_size != v.len() {
        bail!("checkpoint vocabulary has {} entries, expected {}", p.config().vocab_size, v.len());
    }
    Ok(p)
}

fn write_dialogues(path: &Path, ds: &[Dialogue]) -> Result<()> {
    let records = ds.iter().map(CorpusRecord::from_dialogue).collect::<maskdiff_core::Result<Vec<_>>>()?;
    write_corpus(BufWriter::new(File::create(path)?), &records)?;
    Ok(())
}

fn read_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let records = read_corpus(BufReader::new(f))?;
    Ok(records.iter().map(CorpusRecord::to_dialogue).collect::<maskdiff_core::Result<Vec<_>>>()?)
}

fn emit(report: &ExperimentReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => report.write_jsonl(BufWriter::new(File::create(p)?))?,
        None => report.write_jsonl(std::io::stdout().lock())?,
    }
    eprint!("{}", report.summary_table());
    Ok(())
}

fn items_by_task(v: &Vocab, cfg: &ExperimentConfig) -> Vec<(String, Vec<EvalItem>)> {
    let corpus = cfg.corpus(v);
    cfg.tasks
        .iter()
        .map(|spec| {
            let ds: Vec<Dialogue> = corpus
                .heldout
                .iter()
                .filter(|d| spec_for(v, &cfg.tasks, &d.turns[0].1) == Some(spec))
                .cloned()
                .collect();
            let name = serde_json::to_value(spec.kind).ok().and_then(|k| k["kind"].as_str().map(String::from));
            (name.unwrap_or_default(), eval_items(v, &ds))
        })
        .collect()
}

fn task_items(v: &Vocab, cfg: &ExperimentConfig, kind: &str) -> Result<Vec<EvalItem>> {
    items_by_task(v, cfg)
        .into_iter()
        .find(|(name, _)| name == kind)
        .map(|(_, items)| items)
        .with_context(|| format!("config has no {kind} task"))
}

fn parse_prior(v: &Vocab, s: &str) -> Result<StructurePrior> {
    let (pos, word) = s.split_once('=').with_context(|| format!("prior {s:?} is not POS=WORD"))?;
    let pos: i64 = pos.parse().with_context(|| format!("prior position {pos:?}"))?;
    let tok = v.id(word).with_context(|| format!("{word:?} is not in the vocabulary"))?;
    Ok(StructurePrior::new(vec![(pos, tok)]))
}

fn run(cli: Cli) -> Result<()> {
    let v = Vocab::new();
    match cli.command {
        Command::InitConfig { out } => {
            fs::write(&out, serde_json::to_string_pretty(&ExperimentConfig::desk())? + "\n")?;
            println!("wrote {}", out.display());
        }
        Command::GenCorpus { config, out } => {
            let cfg: ExperimentConfig = read_json(&config)?;
            let c = cfg.corpus(&v);
            fs::create_dir_all(&out)?;
            write_dialogues(&out.join("train.jsonl"), &c.train)?;
            write_dialogues(&out.join("heldout.jsonl"), &c.heldout)?;
            println!("{} train, {} held-out samples in {}", c.train.len(), c.heldout.len(), out.display());
        }
        Command::Train { recipe, config, out, corpus } => {
            let cfg: ExperimentConfig = read_json(&config)?;
            let c = match corpus {
                Some(dir) => Corpus { train: read_dialogues(&dir.join("train.jsonl"))?, heldout: Vec::new() },
                None => cfg.corpus(&v),
            };
            fs::create_dir_all(&out)?;
            let res = cfg.train(&v, recipe.into(), &c, Some(&out))?;
            checkpoint::save(&out.join("final.ckpt"), &res.params)?;
            let mut log = BufWriter::new(File::create(out.join("train_report.jsonl"))?);
            for r in &res.reports {
                serde_json::to_writer(&mut log, r)?;
                log.write_all(b"\n")?;
                let tail = &r.losses[r.losses.len().saturating_sub(100)..];
                let mean = tail.iter().sum::<f32>() / tail.len().max(1) as f32;
                println!("{:?}: {} steps in {:.1?}, final loss {mean:.4}", r.phase.unwrap(), r.steps, r.wall);
            }
            println!("wrote {}", out.join("final.ckpt").display());
        }
        Command::Decode { checkpoint, prompt, decoding, priors, history, no_color } => {
            let params = load_params(&checkpoint, &v)?;
            let user = v.encode(&prompt).context("prompt contains words outside the vocabulary")?;
            let cfg = decoding.load(16)?;
            let mut prior = StructurePrior::none();
            for p in &priors {
                prior = prior.merged(parse_prior(&v, p)?);
            }
            let d = decode(&params, &prompt_for(&v, &user), &cfg, &prior, &|t| v.text(t))?;
            print!("{}", render_history(&d.history, !no_color));
            println!("answer: {}", v.decode(&d.answer));
            if let Some(path) = history {
                d.history.write(BufWriter::new(File::create(path)?))?;
            }
        }
        Command::Eval { checkpoint, config, decoding, out } => {
            let cfg: ExperimentConfig = read_json(&config)?;
            let params = load_params(&checkpoint, &v)?;
            let base = decoding.load(8)?;
            let mut report = ExperimentReport::new("eval", cfg.seed, &(&cfg, &base));
            for (task, items) in items_by_task(&v, &cfg) {
                let s = evaluate_natural(&params, &items, &v, |r| decoding.at_length(&base, r))?;
                report.rows.push(ReportRow::from_stats(&task, describe(&base), cfg.seed, &s));
            }
            emit(&report, out.as_deref())?;
        }
        Command::Sweep(Sweep::LengthBias { config, models, lengths, out }) => {
            let cfg: ExperimentConfig = read_json(&config)?;
            let shortest = lengths.iter().copied().min().context("no lengths")?;
            let items: Vec<EvalItem> = task_items(&v, &cfg, "copy")?.into_iter().filter(|i| i.answer.len() < shortest).collect();
            let mut report = ExperimentReport::new("length-bias", cfg.seed, &(&cfg, &lengths));
            for m in &models {
                let (name, path) = m.split_once('=').with_context(|| format!("model {m:?} is not NAME=CHECKPOINT"))?;
                let params = load_params(Path::new(path), &v)?;
                for p in sweep_length_bias(&params, &items, &lengths, &v, default_threads())? {
                    let mut row = ReportRow::from_stats(name, format!("L={}", p.response_length), cfg.seed, &p.stats);
                    row.response_length = Some(p.response_length);
                    report.rows.push(row);
                }
            }
            emit(&report, out.as_deref())?;
        }
        Command::Sweep(Sweep::Threshold { config, checkpoint, gammas, out }) => {
            let cfg: ExperimentConfig = read_json(&config)?;
            let params = load_params(&checkpoint, &v)?;
            let items: Vec<EvalItem> = items_by_task(&v, &cfg).into_iter().flat_map(|(_, i)| i).collect();
            let mut report = ExperimentReport::new("threshold", cfg.seed, &(&cfg, &gammas));
            let k1 = evaluate_natural(&params, &items, &v, DecodeConfig::one_per_step)?;
            report.rows.push(ReportRow::from_stats("model", "maskgit k=1".into(), cfg.seed, &k1));
            for p in sweep_confident_threshold(&params, &items, &gammas, &v, default_threads())? {
                report.rows.push(ReportRow::from_stats("model", format!("gamma={}", p.gamma), cfg.seed, &p.stats));
            }
            emit(&report, out.as_deref())?;
        }
        Command::Sweep(Sweep::Prefill { config, checkpoint, decoding, out }) => {
            let cfg: ExperimentConfig = read_json(&config)?;
            let params = load_params(&checkpoint, &v)?;
            let base = decoding.load(8)?;
            let items = task_items(&v, &cfg, "key_value_extract")?;
            let mut report = ExperimentReport::new("prefill", cfg.seed, &(&cfg, &base));
            for r in sweep_prefill(&params, &items, &v, &base)? {
                report.rows.push(ReportRow::from_stats("model", "no cache".into(), cfg.seed, &r.without_cache));
                report.rows.push(ReportRow::from_stats("model", "prefill".into(), cfg.seed, &r.with_cache));
                eprintln!(
                    "speedup {:.2}x, accuracy drop {:.1} points, score entries per step {:.2}x (predicted {:.2}x)",
                    r.speedup,
                    100.0 * r.accuracy_drop,
                    r.measured_step_ratio,
                    r.predicted_step_ratio
                );
            }
            emit(&report, out.as_deref())?;
        }
        Command::Sweep(Sweep::EarlyAnswer { config, checkpoint, decoding, out }) => {
            let cfg: ExperimentConfig = read_json(&config)?;
            let params = load_params(&checkpoint, &v)?;
            let base = decoding.load(12)?;
            let items = task_items(&v, &cfg, "arithmetic")?;
            let probes = early_answer_probe(&params, &items, &base, &v)?;
            let mut report = ExperimentReport::new("early-answer", cfg.seed, &(&cfg, &base));
            for (i, p) in probes.iter().enumerate() {
                report.rows.push(ReportRow {
                    model: "model".into(),
                    condition: format!("item {i}: answer@{}/{}", p.answer_iteration, p.actual_iterations),
                    seed: cfg.seed,
                    accuracy: if p.correct { 1.0 } else { 0.0 },
                    mean_iterations: p.actual_iterations as f64,
                    iteration_ratio: p.answer_iteration as f64 / p.actual_iterations.max(1) as f64,
                    tokens_per_second: 0.0,
                    items: 1,
                    response_length: Some(base.response_length),
                });
            }
            emit(&report, out.as_deref())?;
        }
        Command::RenderHistory { file, no_color } => {
            let f = File::open(&file).with_context(|| format!("opening {}", file.display()))?;
            let h = GenerationHistory::read(BufReader::new(f))?;
            print!("{}", render_history(&h, !no_color));
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
