use super::ops::{c, log_softmax};
use super::Scalar;
use crate::error::{Error, Result};

/// Sum of per-position losses over non-pad targets, the non-pad count, and
/// `d(sum · scale)/d logits`. Smoothing mass is spread uniformly over the
/// non-pad vocabulary.
pub(crate) fn smoothed_loss_rows<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
    smoothing: f64,
    pad_id: u32,
    grad_scale: Option<f64>,
) -> (f64, usize, Vec<T>) {
    let support = if (pad_id as usize) < vocab { vocab - 1 } else { vocab }.max(1);
    let share = smoothing / support as f64;
    let mut total = 0.0;
    let mut count = 0;
    let mut grad = if grad_scale.is_some() {
        vec![T::zero(); logits.len()]
    } else {
        Vec::new()
    };
    for (pos, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        count += 1;
        let row = &logits[pos * vocab..(pos + 1) * vocab];
        let lp = log_softmax(row);
        let mut smooth_sum = 0.0;
        for (v, &l) in lp.iter().enumerate() {
            if v as u32 != pad_id {
                smooth_sum += l;
            }
        }
        total -= (1.0 - smoothing) * lp[t as usize] + share * smooth_sum;
        if let Some(scale) = grad_scale {
            let g = &mut grad[pos * vocab..(pos + 1) * vocab];
            for (v, &l) in lp.iter().enumerate() {
                let mut q = if v as u32 == pad_id { 0.0 } else { share };
                if v as u32 == t {
                    q += 1.0 - smoothing;
                }
                g[v] = c((l.exp() - q) * scale);
            }
        }
    }
    (total, count, grad)
}

/// Mean over non-pad positions of
/// `-[(1-ε)·log p(target) + ε·mean_{v≠pad} log p(v)]`.
///
/// `logits` is row-major `targets.len() × vocab`.
pub fn label_smoothed_loss<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
    smoothing: f64,
    pad_id: u32,
) -> Result<f64> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("smoothing {smoothing} outside [0, 1)")));
    }
    if logits.len() != targets.len() * vocab {
        return Err(Error::ShapeMismatch {
            expected: targets.len() * vocab,
            got: logits.len(),
        });
    }
    let (sum, count, _) = smoothed_loss_rows(logits, vocab, targets, smoothing, pad_id, None);
    if count == 0 {
        return Err(Error::Empty("every target position is padding"));
    }
    Ok(sum / count as f64)
}

/// Minimum achievable label-smoothed loss for a vocabulary of `vocab`
/// tokens of which one is padding: the entropy of the smoothed target.
pub fn label_smoothing_floor(smoothing: f64, vocab: usize) -> f64 {
    let n = (vocab - 1) as f64;
    let share = smoothing / n;
    let top = 1.0 - smoothing + share;
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    -(xlogx(top) + (n - 1.0) * xlogx(share))
}
