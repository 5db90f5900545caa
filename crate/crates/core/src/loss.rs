//! Training objectives and their gradients with respect to the logits.

use crate::error::{Error, Result};
use crate::model::{self, AttentionMode, Logits};
use crate::noise::CorruptedSample;
use crate::params::{Gradients, ModelParams};
use crate::sequence::{Segment, Sequence};
use crate::tensor::{self, Scalar};

/// Which objective a gradient is taken of.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Next-token cross-entropy on the Answer positions of `x0`; the model reads `x0`.
    Autoregressive,
    /// `1/t`-weighted cross-entropy on the masked positions; the model reads `x_t`.
    Diffusion(&'a CorruptedSample),
}

impl LossSpec<'_> {
    /// Token ids the model is run on for this objective.
    pub fn input<'s>(&'s self, x0: &'s Sequence) -> &'s [u32] {
        match self {
            LossSpec::Autoregressive => &x0.tokens,
            LossSpec::Diffusion(s) => &s.tokens,
        }
    }
}

fn check_finite<T: Scalar>(logits: &Logits<T>) -> Result<()> {
    if logits.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("logits"))
    }
}

/// Cross-entropy of one row at `target`; optionally writes `(softmax - onehot) * w`.
fn row_xent<T: Scalar>(row: &[T], target: usize, grad: Option<(&mut [T], T)>) -> T {
    let lse = tensor::log_sum_exp(row);
    if let Some((g, w)) = grad {
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - lse).exp() * w;
        }
        g[target] = g[target] - w;
    }
    lse - row[target]
}

/// Reweighted masked cross-entropy: `(1/t) Σ_{n masked} -log softmax(z_n)[x0_n]`.
pub fn diffusion_loss<T: Scalar>(logits: &Logits<T>, sample: &CorruptedSample, x0: &Sequence) -> Result<T> {
    diffusion_loss_impl(logits, sample, x0, None)
}

fn diffusion_loss_impl<T: Scalar>(
    logits: &Logits<T>,
    sample: &CorruptedSample,
    x0: &Sequence,
    mut dlogits: Option<&mut Logits<T>>,
) -> Result<T> {
    if logits.rows != x0.len() || sample.masked.len() != x0.len() {
        return Err(Error::InvalidArgument(format!(
            "logits rows {} vs sequence length {}",
            logits.rows,
            x0.len()
        )));
    }
    check_finite(logits)?;
    let w = T::from_f64_lossy(1.0 / sample.t);
    let mut total = T::zero();
    for (n, &m) in sample.masked.iter().enumerate() {
        if !m {
            continue;
        }
        let g = dlogits.as_deref_mut().map(|d| (d.row_mut(n), w));
        total = total + row_xent(logits.row(n), x0.tokens[n] as usize, g);
    }
    Ok(total * w)
}

/// Mean next-token cross-entropy over Answer positions: position `n` is
/// predicted from the logits at `n - 1`.
pub fn ar_loss<T: Scalar>(logits: &Logits<T>, x0: &Sequence) -> Result<T> {
    ar_loss_impl(logits, x0, None)
}

fn ar_targets(x0: &Sequence) -> Vec<usize> {
    (1..x0.len()).filter(|&n| x0.segments[n] == Segment::Answer).collect()
}

fn ar_loss_impl<T: Scalar>(logits: &Logits<T>, x0: &Sequence, mut dlogits: Option<&mut Logits<T>>) -> Result<T> {
    if logits.rows != x0.len() {
        return Err(Error::InvalidArgument("logits rows differ from sequence length".into()));
    }
    let targets = ar_targets(x0);
    if targets.is_empty() {
        return Err(Error::InvalidArgument("sequence has no answer tokens to supervise".into()));
    }
    check_finite(logits)?;
    let w = T::one() / T::from_usize(targets.len()).unwrap();
    let mut total = T::zero();
    for n in targets {
        let g = dlogits.as_deref_mut().map(|d| (d.row_mut(n - 1), w));
        total = total + row_xent(logits.row(n - 1), x0.tokens[n] as usize, g);
    }
    Ok(total * w)
}

/// Loss value of `spec` on `x0` under the given attention mode (forward only).
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, x0: &Sequence, mode: AttentionMode, spec: &LossSpec) -> Result<T> {
    let logits = model::forward(params, spec.input(x0), mode, None)?;
    match spec {
        LossSpec::Autoregressive => ar_loss(&logits, x0),
        LossSpec::Diffusion(s) => diffusion_loss(&logits, s, x0),
    }
}

/// Loss value and one gradient tensor per parameter tensor.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    x0: &Sequence,
    mode: AttentionMode,
    spec: &LossSpec,
) -> Result<(T, Gradients<T>)> {
    let (logits, tape) = model::forward_train(params, spec.input(x0), mode)?;
    let mut dlogits = Logits { rows: logits.rows, cols: logits.cols, data: vec![T::zero(); logits.data.len()] };
    let value = match spec {
        LossSpec::Autoregressive => ar_loss_impl(&logits, x0, Some(&mut dlogits))?,
        LossSpec::Diffusion(s) => diffusion_loss_impl(&logits, s, x0, Some(&mut dlogits))?,
    };
    let mut grads = Gradients::zeros_like(params);
    model::backward(params, &tape, &dlogits, &mut grads);
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    Ok((value, grads))
}
