//! Pre-norm transformer with learned absolute positions.
//!
//! One code path serves training (with a [`Tape`] of activations for
//! [`backward`]), plain inference, and prefix-cached inference where the
//! attention keys/values of earlier positions come from a [`KVCache`].

use serde::{Deserialize, Serialize};

use crate::config::TokenId;
use crate::error::{Error, Result};
use crate::params::{Gradients, ModelParams};
use crate::prefill::KVCache;
use crate::tensor::{self, Scalar, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Position `i` attends only to positions `j <= i`.
    Causal,
    /// Every position attends to every position.
    Full,
}

/// One row of vocabulary scores per computed position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T: Scalar = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Work counters for instrumentation.
///
/// `score_entries` counts query-key pairs of one attention map (the same count
/// applies to every layer and head); `forward_passes` counts model invocations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub forward_passes: u64,
    pub score_entries: u64,
    pub last_score_entries: u64,
}

impl Counters {
    fn record(&mut self, queries: usize, keys: usize) {
        let n = (queries * keys) as u64;
        self.forward_passes += 1;
        self.score_entries += n;
        self.last_score_entries = n;
    }
}

/// Keys and values (post-projection, all heads) of a run of positions in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<T: Scalar = f32> {
    pub k: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Default, Clone)]
pub(crate) struct LayerTape<T: Scalar> {
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
    h2: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
}

/// Activations retained by a training forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape<T: Scalar> {
    tokens: Vec<TokenId>,
    mode: Option<AttentionMode>,
    layers: Vec<LayerTape<T>>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    hf: Vec<T>,
}

fn check_tokens<T: Scalar>(params: &ModelParams<T>, tokens: &[TokenId], start: usize) -> Result<()> {
    let cfg = params.config();
    let len = start + tokens.len();
    if len > cfg.max_seq_len {
        return Err(Error::LengthOverflow { len, max: cfg.max_seq_len });
    }
    for (i, &id) in tokens.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id, pos: start + i, vocab: cfg.vocab_size });
        }
    }
    Ok(())
}

/// Plain forward pass over `tokens`. With a cache, `tokens` is the full
/// sequence, the cached positions must be a strict prefix of it, and one logit
/// row is returned per non-cached position.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    mode: AttentionMode,
    cache: Option<&KVCache<T>>,
) -> Result<Logits<T>> {
    forward_instrumented(params, tokens, mode, cache, &mut Counters::default())
}

pub fn forward_instrumented<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    mode: AttentionMode,
    cache: Option<&KVCache<T>>,
    counters: &mut Counters,
) -> Result<Logits<T>> {
    match cache {
        None => {
            check_tokens(params, tokens, 0)?;
            Ok(run(params, tokens, 0, mode, None, None, None, counters))
        }
        Some(cache) => {
            cache.check_compatible(params, mode)?;
            let p = cache.prompt_length();
            if tokens.len() <= p || tokens[..p] != *cache.prompt_tokens() {
                return Err(Error::CacheMismatch(
                    "cached positions are not a strict prefix of the input".into(),
                ));
            }
            check_tokens(params, tokens, 0)?;
            Ok(run(params, &tokens[p..], p, mode, Some(cache.layers()), None, None, counters))
        }
    }
}

/// Forward pass that also returns the per-layer keys/values of the first
/// `retain` positions.
pub(crate) fn forward_retaining<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    mode: AttentionMode,
    retain: usize,
    counters: &mut Counters,
) -> Result<(Logits<T>, Vec<LayerKv<T>>)> {
    check_tokens(params, tokens, 0)?;
    let mut kept = Vec::with_capacity(params.config().n_layers);
    let logits = run(params, tokens, 0, mode, None, None, Some((retain, &mut kept)), counters);
    Ok((logits, kept))
}

/// Forward pass over the non-cached suffix starting at absolute position `start`.
pub(crate) fn forward_suffix<T: Scalar>(
    params: &ModelParams<T>,
    suffix: &[TokenId],
    start: usize,
    mode: AttentionMode,
    prefix: &[LayerKv<T>],
    counters: &mut Counters,
) -> Result<Logits<T>> {
    check_tokens(params, suffix, start)?;
    Ok(run(params, suffix, start, mode, Some(prefix), None, None, counters))
}

/// Forward pass recording everything [`backward`] needs.
pub fn forward_train<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    mode: AttentionMode,
) -> Result<(Logits<T>, Tape<T>)> {
    check_tokens(params, tokens, 0)?;
    let mut tape = Tape { tokens: tokens.to_vec(), mode: Some(mode), ..Default::default() };
    let logits = run(params, tokens, 0, mode, None, Some(&mut tape), None, &mut Counters::default());
    Ok((logits, tape))
}

#[allow(clippy::too_many_arguments)]
fn run<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    start: usize,
    mode: AttentionMode,
    prefix: Option<&[LayerKv<T>]>,
    mut tape: Option<&mut Tape<T>>,
    mut retain: Option<(usize, &mut Vec<LayerKv<T>>)>,
    counters: &mut Counters,
) -> Logits<T> {
    let cfg = params.config();
    let slots = &params.layout().slots;
    let (d, f, v, nh) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
    let l = tokens.len();
    let prefix_len = prefix.and_then(|p| p.first()).map_or(0, |kv| kv.k.len() / d);
    counters.record(l, prefix_len + l);

    let tok_emb = params.slot(slots.tok_emb);
    let pos_emb = params.slot(slots.pos_emb);
    let mut x = vec![T::zero(); l * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let te = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let pe = &pos_emb[(start + i) * d..(start + i + 1) * d];
        for c in 0..d {
            x[i * d + c] = te[c] + pe[c];
        }
    }

    let mut xhat = vec![T::zero(); l * d];
    let mut rstd = vec![T::zero(); l];
    let mut h = vec![T::zero(); l * d];
    let mut q = vec![T::zero(); l * d];
    let mut k = vec![T::zero(); l * d];
    let mut val = vec![T::zero(); l * d];
    let mut attn = vec![T::zero(); l * d];
    let mut proj = vec![T::zero(); l * d];
    let mut pre = vec![T::zero(); l * f];
    let mut act = vec![T::zero(); l * f];
    let mut probs = vec![T::zero(); nh * l * (prefix_len + l)];

    for (li, ls) in slots.layers.iter().enumerate() {
        tensor::layer_norm(&x, params.slot(ls.ln1_g), params.slot(ls.ln1_b), &mut h, &mut xhat, &mut rstd);
        tensor::matmul(&h, params.slot(ls.wq), &mut q, l, d, d);
        tensor::matmul(&h, params.slot(ls.wk), &mut k, l, d, d);
        tensor::matmul(&h, params.slot(ls.wv), &mut val, l, d, d);
        let pkv = prefix.map(|p| &p[li]);
        attention(cfg.n_heads, d, &q, &k, &val, pkv, start, mode, &mut probs, &mut attn);
        tensor::matmul(&attn, params.slot(ls.wo), &mut proj, l, d, d);

        if let Some((n, kept)) = retain.as_mut() {
            let n = (*n).min(l);
            kept.push(LayerKv { k: k[..n * d].to_vec(), v: val[..n * d].to_vec() });
        }
        if let Some(t) = tape.as_deref_mut() {
            t.layers.push(LayerTape {
                ln1_xhat: xhat.clone(),
                ln1_rstd: rstd.clone(),
                h1: h.clone(),
                q: q.clone(),
                k: k.clone(),
                v: val.clone(),
                probs: probs.clone(),
                attn: attn.clone(),
                ..Default::default()
            });
        }
        tensor::add_assign(&mut x, &proj);

        tensor::layer_norm(&x, params.slot(ls.ln2_g), params.slot(ls.ln2_b), &mut h, &mut xhat, &mut rstd);
        tensor::matmul(&h, params.slot(ls.w1), &mut pre, l, d, f);
        tensor::add_row_bias(&mut pre, params.slot(ls.b1));
        for (a, &p) in act.iter_mut().zip(&pre) {
            *a = tensor::gelu(p);
        }
        tensor::matmul(&act, params.slot(ls.w2), &mut proj, l, f, d);
        tensor::add_row_bias(&mut proj, params.slot(ls.b2));
        if let Some(t) = tape.as_deref_mut() {
            let lt = t.layers.last_mut().unwrap();
            lt.ln2_xhat = xhat.clone();
            lt.ln2_rstd = rstd.clone();
            lt.h2 = h.clone();
            lt.pre_act = pre.clone();
            lt.act = act.clone();
        }
        tensor::add_assign(&mut x, &proj);
    }

    tensor::layer_norm(&x, params.slot(slots.lnf_g), params.slot(slots.lnf_b), &mut h, &mut xhat, &mut rstd);
    let mut logits = vec![T::zero(); l * v];
    tensor::matmul(&h, params.slot(slots.out_w), &mut logits, l, d, v);
    tensor::add_row_bias(&mut logits, params.slot(slots.out_b));
    if let Some(t) = tape {
        t.lnf_xhat = xhat;
        t.lnf_rstd = rstd;
        t.hf = h;
    }
    Logits { rows: l, cols: v, data: logits }
}

/// Multi-head scaled dot-product attention for `lq` new queries at absolute
/// positions `start..start+lq`. Keys are the optional cached prefix (absolute
/// positions `0..p`) followed by the new keys. Writes per-head probabilities
/// (`heads × lq × (p+lq)`) into `probs` and the concatenated head outputs into `out`.
#[allow(clippy::too_many_arguments)]
fn attention<T: Scalar>(
    heads: usize,
    d: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    prefix: Option<&LayerKv<T>>,
    start: usize,
    mode: AttentionMode,
    probs: &mut [T],
    out: &mut [T],
) {
    let lq = q.len() / d;
    let p = prefix.map_or(0, |kv| kv.k.len() / d);
    let lk = p + lq;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    for hd in 0..heads {
        let c0 = hd * dh;
        let s = &mut probs[hd * lq * lk..(hd + 1) * lq * lk];
        let qv = View::cols_of(lq, d, c0, dh);
        if let Some(kv) = prefix {
            let kp = View::cols_of(p, d, c0, dh).t();
            let sv = View { offset: 0, rows: lq, cols: p, row_stride: lk, col_stride: 1 };
            tensor::gemm(scale, q, qv, &kv.k, kp, T::zero(), s, sv);
        }
        let kn = View::cols_of(lq, d, c0, dh).t();
        let sv = View { offset: p, rows: lq, cols: lq, row_stride: lk, col_stride: 1 };
        tensor::gemm(scale, q, qv, k, kn, T::zero(), s, sv);
        for (i, row) in s.chunks_exact_mut(lk).enumerate() {
            if mode == AttentionMode::Causal {
                for x in row.iter_mut().skip(start + i + 1) {
                    *x = T::neg_infinity();
                }
            }
            tensor::softmax_in_place(row);
        }
        let ov = View::cols_of(lq, d, c0, dh);
        if let Some(kv) = prefix {
            let pv = View { offset: 0, rows: lq, cols: p, row_stride: lk, col_stride: 1 };
            tensor::gemm(T::one(), s, pv, &kv.v, View::cols_of(p, d, c0, dh), T::zero(), out, ov);
        }
        let pv = View { offset: p, rows: lq, cols: lq, row_stride: lk, col_stride: 1 };
        let beta = if prefix.is_some() { T::one() } else { T::zero() };
        tensor::gemm(T::one(), s, pv, v, View::cols_of(lq, d, c0, dh), beta, out, ov);
    }
}

/// Reverse-mode pass: accumulates `∂loss/∂θ` into `grads` given `∂loss/∂logits`.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    tape: &Tape<T>,
    dlogits: &Logits<T>,
    grads: &mut Gradients<T>,
) {
    let cfg = params.config();
    let layout = params.layout();
    let slots = &layout.slots;
    let (d, f, v, nh) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
    let dh = d / nh;
    let l = tape.tokens.len();
    assert!(tape.mode.is_some(), "tape from forward_train");
    assert_eq!(dlogits.rows, l);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    // Separate borrows of individual gradient tensors.
    macro_rules! g {
        ($slot:expr) => {
            &mut grads.data[layout.range($slot)]
        };
    }

    tensor::matmul_at_acc(&tape.hf, &dlogits.data, g!(slots.out_w), l, d, v);
    tensor::col_sum_acc(&dlogits.data, g!(slots.out_b));
    let mut dh_buf = vec![T::zero(); l * d];
    tensor::matmul_bt_acc(&dlogits.data, params.slot(slots.out_w), &mut dh_buf, l, v, d);
    let mut dx = vec![T::zero(); l * d];
    {
        let (mut dg, mut db) = (vec![T::zero(); d], vec![T::zero(); d]);
        tensor::layer_norm_backward(
            &dh_buf,
            &tape.lnf_xhat,
            &tape.lnf_rstd,
            params.slot(slots.lnf_g),
            &mut dx,
            &mut dg,
            &mut db,
        );
        tensor::add_assign(g!(slots.lnf_g), &dg);
        tensor::add_assign(g!(slots.lnf_b), &db);
    }

    let mut dact = vec![T::zero(); l * f];
    let mut dattn = vec![T::zero(); l * d];
    let mut dq = vec![T::zero(); l * d];
    let mut dk = vec![T::zero(); l * d];
    let mut dv = vec![T::zero(); l * d];
    let mut dp = vec![T::zero(); l * l];
    let mut dvec = vec![T::zero(); d];
    let mut dvec2 = vec![T::zero(); d];

    for (ls, lt) in slots.layers.iter().zip(&tape.layers).rev() {
        // Feed-forward block; dx is the gradient flowing into its output.
        tensor::matmul_at_acc(&lt.act, &dx, g!(ls.w2), l, f, d);
        tensor::col_sum_acc(&dx, g!(ls.b2));
        dact.fill(T::zero());
        tensor::matmul_bt_acc(&dx, params.slot(ls.w2), &mut dact, l, d, f);
        for (da, &p) in dact.iter_mut().zip(&lt.pre_act) {
            *da = *da * tensor::gelu_grad(p);
        }
        tensor::matmul_at_acc(&lt.h2, &dact, g!(ls.w1), l, d, f);
        tensor::col_sum_acc(&dact, g!(ls.b1));
        dh_buf.fill(T::zero());
        tensor::matmul_bt_acc(&dact, params.slot(ls.w1), &mut dh_buf, l, f, d);
        dvec.fill(T::zero());
        dvec2.fill(T::zero());
        tensor::layer_norm_backward(
            &dh_buf,
            &lt.ln2_xhat,
            &lt.ln2_rstd,
            params.slot(ls.ln2_g),
            &mut dx,
            &mut dvec,
            &mut dvec2,
        );
        tensor::add_assign(g!(ls.ln2_g), &dvec);
        tensor::add_assign(g!(ls.ln2_b), &dvec2);

        // Attention block.
        tensor::matmul_at_acc(&lt.attn, &dx, g!(ls.wo), l, d, d);
        dattn.fill(T::zero());
        tensor::matmul_bt_acc(&dx, params.slot(ls.wo), &mut dattn, l, d, d);
        dq.fill(T::zero());
        dk.fill(T::zero());
        dv.fill(T::zero());
        for hd in 0..nh {
            let c0 = hd * dh;
            let pr = &lt.probs[hd * l * l..(hd + 1) * l * l];
            let hv = View::cols_of(l, d, c0, dh);
            // dP = dO_h · V_hᵀ
            tensor::gemm(T::one(), &dattn, hv, &lt.v, hv.t(), T::zero(), &mut dp, View::dense(l, l));
            // dV_h += Pᵀ · dO_h
            tensor::gemm(T::one(), pr, View::dense(l, l).t(), &dattn, hv, T::one(), &mut dv, hv);
            for (prow, dprow) in pr.chunks_exact(l).zip(dp.chunks_exact_mut(l)) {
                let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                for (ds, &pv) in dprow.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot) * scale;
                }
            }
            tensor::gemm(T::one(), &dp, View::dense(l, l), &lt.k, hv, T::one(), &mut dq, hv);
            tensor::gemm(T::one(), &dp, View::dense(l, l).t(), &lt.q, hv, T::one(), &mut dk, hv);
        }
        tensor::matmul_at_acc(&lt.h1, &dq, g!(ls.wq), l, d, d);
        tensor::matmul_at_acc(&lt.h1, &dk, g!(ls.wk), l, d, d);
        tensor::matmul_at_acc(&lt.h1, &dv, g!(ls.wv), l, d, d);
        dh_buf.fill(T::zero());
        tensor::matmul_bt_acc(&dq, params.slot(ls.wq), &mut dh_buf, l, d, d);
        tensor::matmul_bt_acc(&dk, params.slot(ls.wk), &mut dh_buf, l, d, d);
        tensor::matmul_bt_acc(&dv, params.slot(ls.wv), &mut dh_buf, l, d, d);
        dvec.fill(T::zero());
        dvec2.fill(T::zero());
        tensor::layer_norm_backward(
            &dh_buf,
            &lt.ln1_xhat,
            &lt.ln1_rstd,
            params.slot(ls.ln1_g),
            &mut dx,
            &mut dvec,
            &mut dvec2,
        );
        tensor::add_assign(g!(ls.ln1_g), &dvec);
        tensor::add_assign(g!(ls.ln1_b), &dvec2);
    }

    for (i, &tok) in tape.tokens.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let te = layout.range(slots.tok_emb).start + tok as usize * d;
        tensor::add_assign(&mut grads.data[te..te + d], row);
        let pe = layout.range(slots.pos_emb).start + i * d;
        tensor::add_assign(&mut grads.data[pe..pe + d], row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> ModelParams<f32> {
        let cfg = ModelConfig {
            vocab_size: 12,
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 10,
            special_tokens: Default::default(),
        };
        ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn single_token_gives_one_row() {
        let p = params(0);
        let lg = forward(&p, &[5], AttentionMode::Full, None).unwrap();
        assert_eq!((lg.rows, lg.cols), (1, 12));
        assert!(lg.is_finite());
    }

    #[test]
    fn causal_rows_ignore_later_tokens() {
        let p = params(1);
        let toks = [4u32, 7, 9, 2, 11, 5];
        let base = forward(&p, &toks, AttentionMode::Causal, None).unwrap();
        for j in 0..toks.len() {
            let mut edited = toks;
            edited[j] = (edited[j] + 1) % 12;
            let out = forward(&p, &edited, AttentionMode::Causal, None).unwrap();
            for r in 0..j {
                assert_eq!(base.row(r), out.row(r), "row {r} changed after editing {j}");
            }
        }
    }

    #[test]
    fn full_attention_sees_the_future() {
        let p = params(2);
        let a = forward(&p, &[4, 7, 9], AttentionMode::Full, None).unwrap();
        let b = forward(&p, &[4, 7, 10], AttentionMode::Full, None).unwrap();
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn rejects_overflow_and_bad_ids() {
        let p = params(3);
        assert!(matches!(
            forward(&p, &[4; 11], AttentionMode::Full, None),
            Err(Error::LengthOverflow { .. })
        ));
        assert!(matches!(
            forward(&p, &[4, 12], AttentionMode::Full, None),
            Err(Error::TokenOutOfRange { pos: 1, .. })
        ));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let p = params(4);
        let (_, tape) = forward_train(&p, &[1, 2, 3, 4, 5], AttentionMode::Causal).unwrap();
        for lt in &tape.layers {
            for row in lt.probs.chunks_exact(5) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn training_forward_matches_inference_forward() {
        let p = params(5);
        let toks = [3u32, 8, 1, 0, 6];
        for mode in [AttentionMode::Causal, AttentionMode::Full] {
            let (a, _) = forward_train(&p, &toks, mode).unwrap();
            let b = forward(&p, &toks, mode, None).unwrap();
            assert_eq!(a, b);
        }
    }
}
