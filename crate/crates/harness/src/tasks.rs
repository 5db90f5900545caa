//! Synthetic tasks with verifiable answers.
//!
//! - `Copy`: `copy: a b c` → `a b c`.
//! - `KeyValueExtract`: a run of filler letters hiding `date d` (a digit) and
//!   `time x` (a letter outside the filler alphabet) → `date: d , time: x`.
//! - `Arithmetic`: `calc: 3 + 4 =` → `7` (optionally `the answer is \box{ 7 }`).
//!
//! Every answer is recomputable from its prompt by [`reference_answer`].

use std::collections::HashSet;

use maskdiff_core::eval::EvalItem;
use maskdiff_core::{Dialogue, Role, TokenId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Copy { min_len: usize, max_len: usize },
    KeyValueExtract { min_filler: usize, max_filler: usize },
    Arithmetic { max_operand: u32, boxed: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    /// Letters `a..` available to copy and filler text. Extraction draws its
    /// time values from the remaining letters, so this must leave some.
    #[serde(default = "default_letters")]
    pub letters: u32,
    pub seed: u64,
}

fn default_letters() -> u32 {
    26
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        TaskSpec { kind, letters: default_letters(), seed }
    }
}

/// Train and held-out dialogues; no held-out prompt also occurs in training.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Vec<Dialogue>,
    pub heldout: Vec<Dialogue>,
}

fn letters(v: &Vocab, n: usize, alphabet: u32, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    (0..n).map(|_| v.letter(rng.gen_range(0..alphabet))).collect()
}

fn digits_of(v: &Vocab, mut x: u32) -> Vec<TokenId> {
    let mut out = vec![v.digit(x % 10)];
    x /= 10;
    while x > 0 {
        out.push(v.digit(x % 10));
        x /= 10;
    }
    out.reverse();
    out
}

/// Draw one prompt for `spec`.
pub fn sample_prompt(v: &Vocab, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    match spec.kind {
        TaskKind::Copy { min_len, max_len } => {
            let n = rng.gen_range(min_len..=max_len);
            let mut p = vec![v.tok("copy:")];
            p.extend(letters(v, n, spec.letters, rng));
            p
        }
        TaskKind::KeyValueExtract { min_filler, max_filler } => {
            let n = rng.gen_range(min_filler..=max_filler);
            let mut filler = letters(v, n, spec.letters, rng);
            let date = [v.tok("date"), v.digit(rng.gen_range(0..10))];
            let time = [v.tok("time"), v.letter(rng.gen_range(spec.letters..26))];
            let mut cut = [rng.gen_range(0..=n), rng.gen_range(0..=n)];
            cut.sort_unstable();
            let (first, second) = if rng.gen_bool(0.5) { (date, time) } else { (time, date) };
            let mut p = vec![v.tok("extract:")];
            p.extend_from_slice(&filler[..cut[0]]);
            p.extend(first);
            p.extend_from_slice(&filler[cut[0]..cut[1]]);
            p.extend(second);
            p.extend(filler.drain(cut[1]..));
            p
        }
        TaskKind::Arithmetic { max_operand, .. } => {
            let a = rng.gen_range(0..=max_operand);
            let b = rng.gen_range(0..=max_operand);
            let mut p = vec![v.tok("calc:")];
            p.extend(digits_of(v, a));
            p.push(v.tok("+"));
            p.extend(digits_of(v, b));
            p.push(v.tok("="));
            p
        }
    }
}

fn parse_number(v: &Vocab, toks: &[TokenId]) -> Option<u32> {
    if toks.is_empty() || !toks.iter().all(|&t| v.is_digit(t)) {
        return None;
    }
    Some(toks.iter().fold(0u32, |acc, &t| acc * 10 + (t - v.digit(0))))
}

/// The unique correct answer for a prompt, recomputed from the prompt alone.
pub fn reference_answer(v: &Vocab, kind: &TaskKind, prompt: &[TokenId]) -> Option<Vec<TokenId>> {
    match *kind {
        TaskKind::Copy { .. } => {
            (prompt.first() == Some(&v.tok("copy:"))).then(|| prompt[1..].to_vec())
        }
        TaskKind::KeyValueExtract { .. } => {
            if prompt.first() != Some(&v.tok("extract:")) {
                return None;
            }
            let field = |key: &str| {
                let k = v.tok(key);
                let at = prompt.iter().position(|&t| t == k)?;
                prompt.get(at + 1).copied()
            };
            let mut out = vec![v.tok("date:")];
            out.push(field("date")?);
            out.push(v.tok(","));
            out.push(v.tok("time:"));
            out.push(field("time")?);
            Some(out)
        }
        TaskKind::Arithmetic { boxed, .. } => {
            if prompt.first() != Some(&v.tok("calc:")) || prompt.last() != Some(&v.tok("=")) {
                return None;
            }
            let plus = prompt.iter().position(|&t| t == v.tok("+"))?;
            let a = parse_number(v, &prompt[1..plus])?;
            let b = parse_number(v, &prompt[plus + 1..prompt.len() - 1])?;
            let sum = digits_of(v, a + b);
            if boxed {
                let mut out: Vec<TokenId> = ["the", "answer", "is", "\\box{"].iter().map(|w| v.tok(w)).collect();
                out.extend(sum);
                out.push(v.tok("}"));
                Some(out)
            } else {
                Some(sum)
            }
        }
    }
}

/// Generate `n` samples of each spec, shuffle them together, and hold out
/// `heldout` samples per spec (prompts never seen in training).
pub fn gen_corpus(v: &Vocab, specs: &[TaskSpec], n: usize, heldout: usize) -> Corpus {
    let mut corpus = Corpus::default();
    let mut shuffle_seed = 0u64;
    for spec in specs {
        shuffle_seed = shuffle_seed.wrapping_mul(31).wrapping_add(spec.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut seen = HashSet::new();
        let mut train = Vec::with_capacity(n);
        while train.len() < n {
            let p = sample_prompt(v, spec, &mut rng);
            seen.insert(p.clone());
            let a = reference_answer(v, &spec.kind, &p).expect("generator output is well-formed");
            train.push(Dialogue::single(p, a));
        }
        let mut held = Vec::with_capacity(heldout);
        let mut guard = 0;
        while held.len() < heldout && guard < heldout * 1000 {
            guard += 1;
            let p = sample_prompt(v, spec, &mut rng);
            if !seen.insert(p.clone()) {
                continue;
            }
            let a = reference_answer(v, &spec.kind, &p).expect("generator output is well-formed");
            held.push(Dialogue::single(p, a));
        }
        corpus.train.extend(train);
        corpus.heldout.extend(held);
    }
    corpus.train.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    corpus
}

/// Classify a prompt back to the task that produced it, by its leading keyword.
pub fn spec_for<'a>(v: &Vocab, specs: &'a [TaskSpec], prompt: &[TokenId]) -> Option<&'a TaskSpec> {
    let head = *prompt.first()?;
    specs.iter().find(|s| match s.kind {
        TaskKind::Copy { .. } => head == v.tok("copy:"),
        TaskKind::KeyValueExtract { .. } => head == v.tok("extract:"),
        TaskKind::Arithmetic { .. } => head == v.tok("calc:"),
    })
}

/// Every sample's answer equals its reference answer.
pub fn self_check(v: &Vocab, specs: &[TaskSpec], dialogues: &[Dialogue]) -> Result<(), String> {
    for (i, d) in dialogues.iter().enumerate() {
        let [(Role::User, p), (Role::Assistant, a)] = d.turns.as_slice() else {
            return Err(format!("sample {i} is not a single exchange"));
        };
        let spec = spec_for(v, specs, p).ok_or_else(|| format!("sample {i}: unknown task"))?;
        if reference_answer(v, &spec.kind, p).as_deref() != Some(a.as_slice()) {
            return Err(format!("sample {i}: answer disagrees with reference"));
        }
    }
    Ok(())
}

/// Decoding context for a single user turn: `[BOS] user [EOS] [BOS]`.
pub fn prompt_for(v: &Vocab, user: &[TokenId]) -> Vec<TokenId> {
    let d = Dialogue::single(user.to_vec(), Vec::new());
    d.prompt_for_last_answer(v.specials()).expect("ends with an assistant turn").0.tokens
}

/// Decoding items for the held-out dialogues (prompt = user turn + assistant BOS).
pub fn eval_items(v: &Vocab, dialogues: &[Dialogue]) -> Vec<EvalItem> {
    dialogues
        .iter()
        .map(|d| {
            let (prompt, answer) = d.prompt_for_last_answer(v.specials()).expect("single-turn dialogue");
            EvalItem { prompt: prompt.tokens, answer, priors: Default::default() }
        })
        .collect()
}
