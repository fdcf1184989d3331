//! Beam search, nucleus sampling and multi-output target helpers.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::WeightedTranslation;
use crate::error::{Error, Result};
use crate::model::{log_softmax, DecoderState, Scalar, TransformerModel};
use crate::subword::SPECIALS;

/// One decoded candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, ending in eos unless `truncated`.
    pub token_ids: Vec<u32>,
    /// Log-probability of each emitted token at the time it was emitted.
    pub token_logprobs: Vec<f64>,
    pub total_logprob: f64,
    /// Set when `max_len` was reached before eos.
    pub truncated: bool,
}

impl Hypothesis {
    pub fn from_scores(token_ids: Vec<u32>, token_logprobs: Vec<f64>) -> Self {
        let total_logprob = token_logprobs.iter().sum();
        Hypothesis {
            token_ids,
            token_logprobs,
            total_logprob,
            truncated: false,
        }
    }

    /// Largest per-token log-probability, or `-inf` if there are none.
    pub fn max_token_logprob(&self) -> f64 {
        self.token_logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Tokens without the trailing eos.
    pub fn content(&self, eos: u32) -> &[u32] {
        match self.token_ids.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.token_ids,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub top_k: usize,
    /// Maximum number of emitted tokens, eos included.
    pub max_len: usize,
    pub length_norm_alpha: f64,
    pub nucleus_p: f64,
    pub n_samples: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 10,
            top_k: 10,
            max_len: 48,
            length_norm_alpha: 0.0,
            nucleus_p: 0.95,
            n_samples: 10,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.beam_size {
            return Err(Error::invalid(format!(
                "need 1 <= top_k ({}) <= beam_size ({})",
                self.top_k, self.beam_size
            )));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len must be positive"));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::invalid(format!("nucleus_p {} outside (0, 1]", self.nucleus_p)));
        }
        if !self.length_norm_alpha.is_finite() {
            return Err(Error::invalid("length_norm_alpha must be finite"));
        }
        Ok(())
    }
}

/// An autoregressive scorer usable by the search routines.
pub trait StepModel {
    type State: Clone;

    fn start(&self, src: &[u32]) -> Result<Self::State>;

    /// Feeds `token` and returns log-probabilities for the next position.
    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;

    fn bos(&self) -> u32 {
        SPECIALS.bos
    }

    fn eos(&self) -> u32 {
        SPECIALS.eos
    }

    /// Whether `token` may ever be emitted.
    fn emittable(&self, token: u32) -> bool {
        token != SPECIALS.pad && token != SPECIALS.bos
    }

    /// Upper bound on decoder positions.
    fn max_steps(&self) -> usize {
        usize::MAX
    }
}

impl<T: Scalar> StepModel for TransformerModel<T> {
    type State = DecoderState<T>;

    fn start(&self, src: &[u32]) -> Result<Self::State> {
        Ok(self.start_state(self.encode(src)?))
    }

    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.decode_step(state, token)?))
    }

    fn max_steps(&self) -> usize {
        self.config().max_positions
    }
}

struct Beam<S> {
    tokens: Vec<u32>,
    lps: Vec<f64>,
    score: f64,
    state: S,
    next: Vec<f64>,
}

fn by_score_then_tokens(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn rank_score(h: &Hypothesis, alpha: f64) -> f64 {
    if alpha == 0.0 {
        h.total_logprob
    } else {
        h.total_logprob / (h.token_ids.len().max(1) as f64).powf(alpha)
    }
}

fn rank(mut hyps: Vec<Hypothesis>, alpha: f64, k: usize) -> Vec<Hypothesis> {
    hyps.sort_by(|a, b| by_score_then_tokens((rank_score(a, alpha), &a.token_ids), (rank_score(b, alpha), &b.token_ids)));
    hyps.truncate(k);
    hyps
}

fn push_finished(pool: &mut Vec<Hypothesis>, h: Hypothesis) {
    match pool.iter_mut().find(|p| p.token_ids == h.token_ids) {
        Some(p) if p.total_logprob < h.total_logprob => *p = h,
        Some(_) => {}
        None => pool.push(h),
    }
}

/// Beam search returning up to `top_k` finished hypotheses, best first.
///
/// At every step the `beam_size` best expansions are kept; expansions
/// ending in eos move to the finished pool. If nothing finished within
/// `max_len`, the best unfinished beams are returned with `truncated` set.
pub fn beam_search<M: StepModel>(model: &M, src: &[u32], config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let max_len = config.max_len.min(model.max_steps());
    let eos = model.eos();
    let mut state = model.start(src)?;
    let next = model.step(&mut state, model.bos())?;
    let mut alive = vec![Beam {
        tokens: Vec::new(),
        lps: Vec::new(),
        score: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for t in 0..max_len {
        let mut cands: Vec<(usize, u32, f64)> = Vec::new();
        for (bi, b) in alive.iter().enumerate() {
            for (tok, &lp) in b.next.iter().enumerate() {
                let tok = tok as u32;
                if lp.is_finite() && model.emittable(tok) {
                    cands.push((bi, tok, b.score + lp));
                }
            }
        }
        // Compare full prefixes: parent tokens then the new token.
        cands.sort_by(|x, y| {
            y.2.partial_cmp(&x.2).unwrap_or(Ordering::Equal).then_with(|| {
                alive[x.0]
                    .tokens
                    .iter()
                    .chain(std::iter::once(&x.1))
                    .cmp(alive[y.0].tokens.iter().chain(std::iter::once(&y.1)))
            })
        });
        cands.truncate(config.beam_size);

        let last_step = t + 1 == max_len;
        let mut next_alive = Vec::new();
        for (bi, tok, score) in cands {
            let parent = &alive[bi];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let mut lps = parent.lps.clone();
            lps.push(parent.next[tok as usize]);
            if tok == eos {
                push_finished(
                    &mut finished,
                    Hypothesis {
                        token_ids: tokens,
                        token_logprobs: lps,
                        total_logprob: score,
                        truncated: false,
                    },
                );
            } else if last_step {
                next_alive.push(Beam {
                    tokens,
                    lps,
                    score,
                    state: parent.state.clone(),
                    next: Vec::new(),
                });
            } else {
                let mut state = parent.state.clone();
                let next = model.step(&mut state, tok)?;
                next_alive.push(Beam {
                    tokens,
                    lps,
                    score,
                    state,
                    next,
                });
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
        // With raw scores, extending a beam can only lower it.
        if config.length_norm_alpha == 0.0 && finished.len() >= config.top_k {
            let mut totals: Vec<f64> = finished.iter().map(|h| h.total_logprob).collect();
            totals.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
            let kth = totals[config.top_k - 1];
            if alive.iter().all(|b| b.score < kth) {
                break;
            }
        }
    }

    if finished.is_empty() {
        let unfinished = alive
            .into_iter()
            .map(|b| Hypothesis {
                token_ids: b.tokens,
                token_logprobs: b.lps,
                total_logprob: b.score,
                truncated: true,
            })
            .collect();
        return Ok(rank(unfinished, config.length_norm_alpha, config.top_k));
    }
    Ok(rank(finished, config.length_norm_alpha, config.top_k))
}

/// Greedy decoding: the most probable token at every step.
pub fn greedy<M: StepModel>(model: &M, src: &[u32], max_len: usize) -> Result<Hypothesis> {
    let config = DecodeConfig {
        beam_size: 1,
        top_k: 1,
        max_len,
        ..DecodeConfig::default()
    };
    beam_search(model, src, &config)?
        .pop()
        .ok_or(Error::Empty("greedy decoding produced nothing"))
}

/// Indices of the smallest probability-sorted prefix whose mass reaches
/// `p` of the total. Ties are ordered by index.
pub fn nucleus_set(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let target = p * total;
    let mut mass = 0.0;
    let mut keep = Vec::new();
    for i in order {
        keep.push(i);
        mass += probs[i];
        // Relative slack absorbs rounding in the running sum.
        if mass >= target * (1.0 - 1e-12) {
            break;
        }
    }
    keep
}

/// Draws one index from the renormalized nucleus of `probs`.
pub fn sample_nucleus(probs: &[f64], p: f64, rng: &mut impl Rng) -> Option<usize> {
    let set = nucleus_set(probs, p);
    let mass: f64 = set.iter().map(|&i| probs[i]).sum();
    if set.is_empty() || mass <= 0.0 {
        return None;
    }
    let mut u = rng.gen::<f64>() * mass;
    for &i in &set {
        u -= probs[i];
        if u < 0.0 {
            return Some(i);
        }
    }
    set.last().copied()
}

/// `n_samples` nucleus samples, deduplicated by token ids keeping the first
/// occurrence. Token scores are the model's own log-probabilities.
pub fn nucleus_sample<M: StepModel>(model: &M, src: &[u32], config: &DecodeConfig, seed: u64) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let max_len = config.max_len.min(model.max_steps());
    let eos = model.eos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = model.start(src)?;
    let first = model.step(&mut start, model.bos())?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..config.n_samples {
        let mut state = start.clone();
        let mut lp = first.clone();
        let mut tokens = Vec::new();
        let mut lps = Vec::new();
        let mut truncated = true;
        for t in 0..max_len {
            let probs: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(i, &l)| if model.emittable(i as u32) { l.exp() } else { 0.0 })
                .collect();
            let Some(tok) = sample_nucleus(&probs, config.nucleus_p, &mut rng) else {
                break;
            };
            tokens.push(tok as u32);
            lps.push(lp[tok]);
            if tok as u32 == eos {
                truncated = false;
                break;
            }
            if t + 1 < max_len {
                lp = model.step(&mut state, tok as u32)?;
            }
        }
        if seen.insert(tokens.clone()) {
            let mut h = Hypothesis::from_scores(tokens, lps);
            h.truncated = truncated;
            out.push(h);
        }
    }
    Ok(out)
}

/// Joins the `top_n` highest-weighted translations with the separator.
pub fn make_multi_output_target(translations: &[WeightedTranslation], top_n: usize, sep: &str) -> Result<String> {
    if translations.is_empty() {
        return Err(Error::Empty("no translations to concatenate"));
    }
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    let mut sorted: Vec<&WeightedTranslation> = translations.iter().collect();
    // Stable sort keeps the original order among equal weights.
    sorted.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap_or(Ordering::Equal));
    let parts: Vec<&str> = sorted.iter().take(top_n).map(|t| t.target_text.trim()).collect();
    Ok(parts.join(&format!(" {sep} ")))
}

/// Splits on the separator, trims, drops empties and duplicates.
pub fn split_multi_output(text: &str, sep: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    text.split(sep)
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| !s.is_empty() && seen.insert(s.clone()))
        .collect()
}
