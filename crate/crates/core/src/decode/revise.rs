//! Probability revision (temperature, nucleus) and per-slot confidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Plain softmax of a logit row, computed in f64.
pub fn softmax(logits: &[f32]) -> Result<Vec<f64>> {
    scaled_softmax(logits, 1.0)
}

fn scaled_softmax(logits: &[f32], tau: f64) -> Result<Vec<f64>> {
    let max = logits.iter().map(|&z| z as f64).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::InvalidArgument("logit row has no finite entry".into()));
    }
    let mut p: Vec<f64> = logits.iter().map(|&z| ((z as f64 - max) / tau).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(p)
}

/// Sampling distribution for one slot: `softmax(z / τ)` truncated to the
/// smallest top-probability set whose mass reaches `top_p`, renormalised.
/// `τ = 0` yields a one-hot vector at the arg-max (lowest index on ties).
pub fn revise_probs(logits: &[f32], temperature: f64, top_p: f64) -> Result<Vec<f64>> {
    if !(temperature >= 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} < 0")));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidArgument(format!("top_p {top_p} outside (0, 1]")));
    }
    if temperature == 0.0 {
        let as_f64: Vec<f64> = logits.iter().map(|&z| z as f64).collect();
        if as_f64.iter().all(|&z| z == f64::NEG_INFINITY || z.is_nan()) {
            return Err(Error::InvalidArgument("logit row has no finite entry".into()));
        }
        let mut p = vec![0.0; logits.len()];
        p[argmax(&as_f64)] = 1.0;
        return Ok(p);
    }
    let mut p = scaled_softmax(logits, temperature)?;
    if top_p < 1.0 {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        let mut mass = 0.0;
        let mut keep = order.len();
        for (rank, &i) in order.iter().enumerate() {
            mass += p[i];
            if mass >= top_p {
                keep = rank + 1;
                break;
            }
        }
        for &i in &order[keep..] {
            p[i] = 0.0;
        }
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(p)
}

/// How a probability vector is reduced to a single "higher is surer" score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMeasure {
    /// Largest probability.
    #[default]
    MaxProb,
    /// Negative Shannon entropy (nats).
    NegEntropy,
    /// Gap between the two largest probabilities.
    Margin,
}

pub fn confidence(probs: &[f64], measure: ConfidenceMeasure) -> f64 {
    match measure {
        ConfidenceMeasure::MaxProb => probs.iter().copied().fold(0.0, f64::max),
        ConfidenceMeasure::NegEntropy => probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum(),
        ConfidenceMeasure::Margin => {
            let (mut first, mut second) = (0.0f64, 0.0f64);
            for &p in probs {
                if p > first {
                    second = first;
                    first = p;
                } else if p > second {
                    second = p;
                }
            }
            first - second
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-7)
    }

    #[test]
    fn revision_examples() {
        assert!(close(&revise_probs(&[0.0, 0.0], 1.0, 1.0).unwrap(), &[0.5, 0.5]));
        let p = revise_probs(&[2f32.ln(), 0.0], 1.0, 1.0).unwrap();
        assert!(close(&p, &[2.0 / 3.0, 1.0 / 3.0]));
        assert_eq!(revise_probs(&[0.1, 3.0, -1.0, 3.0], 0.0, 1.0).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn nucleus_keeps_smallest_covering_set() {
        let logits = [3f32.ln(), 2f32.ln(), 1f32.ln()]; // 0.5, 0.333, 0.167
        let p = revise_probs(&logits, 1.0, 0.6).unwrap();
        assert!(close(&p, &[0.6, 0.4, 0.0]));
        let p = revise_probs(&logits, 1.0, 0.01).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn all_negative_infinity_is_an_error() {
        let row = [f32::NEG_INFINITY; 3];
        assert!(revise_probs(&row, 1.0, 1.0).is_err());
        assert!(revise_probs(&row, 0.0, 1.0).is_err());
        assert!(revise_probs(&[0.0], -1.0, 1.0).is_err());
        assert!(revise_probs(&[0.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&[0.7, 0.2, 0.1], ConfidenceMeasure::MaxProb), 0.7);
        assert_eq!(confidence(&[0.25; 4], ConfidenceMeasure::Margin), 0.0);
        let h = confidence(&[0.5, 0.5], ConfidenceMeasure::NegEntropy);
        assert!((h + 2f64.ln()).abs() < 1e-12);
        assert!((h + std::f64::consts::LN_2).abs() < 1e-4);
        assert!((confidence(&[0.1, 0.6, 0.3], ConfidenceMeasure::Margin) - 0.3).abs() < 1e-12);
    }
}
