//! Adam training with a decaying learning rate, gradient clipping and
//! early stopping on a validation metric.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{ParallelCorpus, SampledPair};
use crate::decoding::{beam_search, make_multi_output_target, split_multi_output, DecodeConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::metrics::{corpus_score, prompt_score, NormalizeConfig};
use crate::model::{Checkpoint, Example, OptimizerSnapshot, Scalar, TransformerModel};
use crate::subword::{BpeModel, SEP, SPECIALS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// Constant until `decay_steps`, then `lr · sqrt(decay_steps / step)`.
    DecayAfter,
    /// Linear warmup over `decay_steps`, then the same inverse-sqrt decay.
    Warmup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopMetric {
    ValidationLoss,
    /// Weighted macro F1 of beam-search output on the validation prompts.
    ValidationWf,
}

impl StopMetric {
    fn higher_is_better(self) -> bool {
        matches!(self, StopMetric::ValidationWf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Sentences per step.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay_steps: u64,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub patience: usize,
    pub smoothing: f64,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: u64,
    /// Evaluate every this many steps; 0 evaluates once per epoch.
    pub eval_every: u64,
    pub stop_metric: StopMetric,
    pub seed: u64,
    /// When positive, each validation prompt's loss target is the
    /// separator-joined concatenation of its top translations.
    pub multi_output_top_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 500,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            decay_steps: 16000,
            schedule: LrSchedule::DecayAfter,
            clip_norm: 5.0,
            patience: 5,
            smoothing: 0.1,
            max_epochs: 50,
            max_steps: 0,
            eval_every: 0,
            stop_metric: StopMetric::ValidationLoss,
            seed: 1,
            multi_output_top_n: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::invalid("adam betas must lie in (0, 1)"));
        }
        if !(self.lr > 0.0) || !(self.epsilon > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("lr, epsilon and clip_norm must be positive"));
        }
        if self.patience == 0 || self.batch_size == 0 || self.decay_steps == 0 {
            return Err(Error::invalid("patience, batch_size and decay_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::invalid("smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based optimizer step.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let d = config.decay_steps as f64;
    match config.schedule {
        LrSchedule::DecayAfter if step <= d => config.lr,
        LrSchedule::DecayAfter => config.lr * (d / step).sqrt(),
        LrSchedule::Warmup => config.lr * (step / d).min((d / step).sqrt()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

impl From<OptimizerSnapshot> for AdamState {
    fn from(s: OptimizerSnapshot) -> Self {
        AdamState { m: s.m, v: s.v, t: s.t }
    }
}

impl From<AdamState> for OptimizerSnapshot {
    fn from(s: AdamState) -> Self {
        OptimizerSnapshot { t: s.t, m: s.m, v: s.v }
    }
}

/// One bias-corrected Adam update. Moments are kept in `f64`.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState, lr: f64, config: &TrainConfig) -> Result<()> {
    let n = params.len();
    for len in [grads.len(), state.m.len(), state.v.len()] {
        if len != n {
            return Err(Error::ShapeMismatch { expected: n, got: len });
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for i in 0..n {
        let g = grads[i].to_f64().unwrap_or(0.0);
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let update = lr * (m / c1) / ((v / c2).sqrt() + config.epsilon);
        let p = params[i].to_f64().unwrap_or(0.0) - update;
        params[i] = T::from(p).unwrap_or(params[i]);
    }
    Ok(())
}

pub fn global_norm<T: Scalar>(grads: &[T]) -> f64 {
    grads
        .iter()
        .map(|g| {
            let g = g.to_f64().unwrap_or(0.0);
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [T], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = T::from(clip_norm / norm).unwrap_or_else(T::one);
        for g in grads.iter_mut() {
            *g = *g * s;
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Counts consecutive evaluations without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub higher_is_better: bool,
    pub best: Option<f64>,
    /// 1-based index of the best evaluation.
    pub best_eval: usize,
    pub evals: usize,
    pub bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStopping {
            patience,
            higher_is_better,
            best: None,
            best_eval: 0,
            evals: 0,
            bad: 0,
        }
    }

    pub fn update(&mut self, value: f64) -> StopDecision {
        self.evals += 1;
        let better = match self.best {
            None => true,
            Some(b) if self.higher_is_better => value > b,
            Some(b) => value < b,
        };
        if better {
            self.best = Some(value);
            self.best_eval = self.evals;
            self.bad = 0;
            return StopDecision::Improved;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::NoImprovement
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub metric_history: Vec<f64>,
    /// 1-based evaluation index of the returned checkpoint.
    pub best_eval: Option<usize>,
    pub best_step: Option<u64>,
    pub stopped_early: bool,
    pub steps: u64,
    /// `step\tlr\ttrain_loss\t[metric]` lines.
    pub log: Vec<String>,
}

/// Source ids: subwords plus eos, clipped to `max_len` positions.
pub fn encode_source(tokenizer: &BpeModel, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids = tokenizer.encode(text);
    ids.truncate(max_len.saturating_sub(1));
    ids.push(SPECIALS.eos);
    ids
}

pub fn make_example(tokenizer: &BpeModel, source: &str, target: &str, max_len: usize) -> Example {
    let src = encode_source(tokenizer, source, max_len);
    let tgt = encode_source(tokenizer, target, max_len);
    Example::teacher_forced(src, tgt, SPECIALS.bos)
}

/// Surface strings of decoded hypotheses, split on separators and
/// deduplicated in rank order.
pub fn hypothesis_texts(tokenizer: &BpeModel, hyps: &[Hypothesis]) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for h in hyps {
        let text = tokenizer.decode_keep_sep(h.content(SPECIALS.eos))?;
        for t in split_multi_output(&text, SEP) {
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    Ok(out)
}

struct Validation {
    gold: ParallelCorpus,
    examples: Vec<Example>,
    sources: Vec<Vec<u32>>,
}

/// Resumable training run. The best model by the stop metric is kept.
pub struct Trainer<'a, T: Scalar> {
    model: TransformerModel<T>,
    tokenizer: &'a BpeModel,
    config: TrainConfig,
    decode: DecodeConfig,
    train: Vec<Example>,
    validation: Validation,
    adam: AdamState,
    early: EarlyStopping,
    best: Option<TransformerModel<T>>,
    report: TrainReport,
    epoch: usize,
    cursor: usize,
    epoch_loss: f64,
    epoch_steps: u64,
    done: bool,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    crate::model::splitmix(seed ^ crate::model::splitmix(epoch as u64 + 1))
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        model: TransformerModel<T>,
        train: &[SampledPair],
        validation: &ParallelCorpus,
        tokenizer: &'a BpeModel,
        config: TrainConfig,
        decode: DecodeConfig,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("no training pairs"));
        }
        let max_len = model.config().max_positions;
        let train = train
            .iter()
            .map(|p| make_example(tokenizer, &p.source_text, &p.target_text, max_len))
            .collect();
        let mut examples = Vec::new();
        for r in &validation.records {
            if config.multi_output_top_n > 0 {
                let joined = make_multi_output_target(&r.translations, config.multi_output_top_n, SEP)?;
                examples.push(make_example(tokenizer, &r.source_text, &joined, max_len));
            } else {
                for t in &r.translations {
                    examples.push(make_example(tokenizer, &r.source_text, &t.target_text, max_len));
                }
            }
        }
        let sources = validation
            .records
            .iter()
            .map(|r| encode_source(tokenizer, &r.source_text, max_len))
            .collect();
        let n = model.parameter_count();
        let early = EarlyStopping::new(config.patience, config.stop_metric.higher_is_better());
        Ok(Trainer {
            model,
            tokenizer,
            config,
            decode,
            train,
            validation: Validation {
                gold: validation.clone(),
                examples,
                sources,
            },
            adam: AdamState::new(n),
            early,
            best: None,
            report: TrainReport::default(),
            epoch: 0,
            cursor: 0,
            epoch_loss: 0.0,
            epoch_steps: 0,
            done: false,
        })
    }

    /// Restores optimizer, schedule position and bookkeeping from a
    /// checkpoint written by [`checkpoint`](Self::checkpoint). `best` is
    /// the best model saved alongside it, if any.
    #[allow(clippy::too_many_arguments)]
    pub fn resume(
        checkpoint: Checkpoint<T>,
        best: Option<TransformerModel<T>>,
        train: &[SampledPair],
        validation: &ParallelCorpus,
        tokenizer: &'a BpeModel,
        config: TrainConfig,
        decode: DecodeConfig,
    ) -> Result<Self> {
        let Checkpoint {
            model,
            step,
            optimizer,
            extra,
        } = checkpoint;
        let mut tr = Trainer::new(model, train, validation, tokenizer, config, decode)?;
        if let Some(opt) = optimizer {
            tr.adam = opt.into();
        }
        tr.report.steps = step;
        tr.best = best;
        tr.restore_extra(&extra)?;
        Ok(tr)
    }

    pub fn model(&self) -> &TransformerModel<T> {
        &self.model
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Snapshot of the current (not best) state for resuming.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            step: self.report.steps,
            optimizer: Some(self.adam.clone().into()),
            extra: self.extra(),
        }
    }

    pub fn best_model(&self) -> Option<&TransformerModel<T>> {
        self.best.as_ref()
    }

    fn extra(&self) -> String {
        let list = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "epoch={}", self.epoch);
        let _ = writeln!(s, "cursor={}", self.cursor);
        let _ = writeln!(s, "epoch_loss={}", self.epoch_loss);
        let _ = writeln!(s, "epoch_steps={}", self.epoch_steps);
        let _ = writeln!(s, "done={}", self.done);
        let _ = writeln!(s, "stopped_early={}", self.report.stopped_early);
        let _ = writeln!(s, "es_best={}", self.early.best.map(|b| b.to_string()).unwrap_or_default());
        let _ = writeln!(s, "es_best_eval={}", self.early.best_eval);
        let _ = writeln!(s, "es_evals={}", self.early.evals);
        let _ = writeln!(s, "es_bad={}", self.early.bad);
        let _ = writeln!(s, "best_step={}", self.report.best_step.map(|b| b.to_string()).unwrap_or_default());
        let _ = writeln!(s, "epoch_losses={}", list(&self.report.epoch_losses));
        let _ = writeln!(s, "metric_history={}", list(&self.report.metric_history));
        s
    }

    fn restore_extra(&mut self, extra: &str) -> Result<()> {
        fn num<N: std::str::FromStr>(k: &str, v: &str) -> Result<N> {
            v.parse().map_err(|_| Error::Checkpoint(format!("bad value for {k}: `{v}`")))
        }
        fn list(k: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',').filter(|s| !s.is_empty()).map(|s| num(k, s)).collect()
        }
        for line in extra.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad trainer line `{line}`")))?;
            match k {
                "epoch" => self.epoch = num(k, v)?,
                "cursor" => self.cursor = num(k, v)?,
                "epoch_loss" => self.epoch_loss = num(k, v)?,
                "epoch_steps" => self.epoch_steps = num(k, v)?,
                "done" => self.done = num(k, v)?,
                "stopped_early" => self.report.stopped_early = num(k, v)?,
                "es_best" if v.is_empty() => self.early.best = None,
                "es_best" => self.early.best = Some(num(k, v)?),
                "es_best_eval" => self.early.best_eval = num(k, v)?,
                "es_evals" => self.early.evals = num(k, v)?,
                "es_bad" => self.early.bad = num(k, v)?,
                "best_step" if v.is_empty() => self.report.best_step = None,
                "best_step" => self.report.best_step = Some(num(k, v)?),
                "epoch_losses" => self.report.epoch_losses = list(k, v)?,
                "metric_history" => self.report.metric_history = list(k, v)?,
                _ => return Err(Error::Checkpoint(format!("unknown trainer key `{k}`"))),
            }
        }
        self.report.best_eval = (self.early.best_eval > 0).then_some(self.early.best_eval);
        Ok(())
    }

    fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(self.config.seed, self.epoch)));
        idx
    }

    /// Current value of the stop metric on the validation set.
    pub fn evaluate(&self) -> Result<f64> {
        let pad = SPECIALS.pad;
        match self.config.stop_metric {
            StopMetric::ValidationLoss => self.model.batch_loss(&self.validation.examples, self.config.smoothing, pad),
            StopMetric::ValidationWf => {
                let scores = self
                    .validation
                    .sources
                    .par_iter()
                    .zip(&self.validation.gold.records)
                    .map(|(src, rec)| {
                        let hyps = beam_search(&self.model, src, &self.decode)?;
                        let texts = hypothesis_texts(self.tokenizer, &hyps)?;
                        Ok(prompt_score(&texts, rec, &NormalizeConfig::default()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(corpus_score(&scores)?.weighted_macro_f1)
            }
        }
    }

    fn eval_and_track(&mut self) -> Result<Option<f64>> {
        if self.validation.gold.records.is_empty() {
            return Ok(None);
        }
        let value = self.evaluate()?;
        self.report.metric_history.push(value);
        match self.early.update(value) {
            StopDecision::Improved => {
                self.best = Some(self.model.clone());
                self.report.best_eval = Some(self.early.best_eval);
                self.report.best_step = Some(self.report.steps);
            }
            StopDecision::NoImprovement => {}
            StopDecision::Stop => {
                self.report.stopped_early = true;
                self.done = true;
            }
        }
        log::info!("eval {} at step {}: {value}", self.early.evals, self.report.steps);
        Ok(Some(value))
    }

    /// Runs at most `max` optimizer steps. Returns whether training is over.
    pub fn run_steps(&mut self, max: u64) -> Result<bool> {
        let mut taken = 0;
        while !self.done && taken < max {
            if self.epoch >= self.config.max_epochs
                || (self.config.max_steps > 0 && self.report.steps >= self.config.max_steps)
            {
                self.done = true;
                break;
            }
            let order = self.order();
            let end = (self.cursor + self.config.batch_size).min(order.len());
            let batch: Vec<Example> = order[self.cursor..end].iter().map(|&i| self.train[i].clone()).collect();
            let step = self.report.steps + 1;
            let dropout_seed = crate::model::splitmix(self.config.seed.wrapping_add(crate::model::splitmix(step)));
            let mut g = self
                .model
                .gradients(&batch, self.config.smoothing, SPECIALS.pad, true, dropout_seed)?;
            if !g.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, value: g.loss });
            }
            clip_gradients(&mut g.grads, self.config.clip_norm);
            let lr = lr_schedule(step, &self.config);
            adam_step(self.model.params_mut(), &g.grads, &mut self.adam, lr, &self.config)?;
            self.report.steps = step;
            self.epoch_loss += g.loss;
            self.epoch_steps += 1;
            self.cursor = end;
            taken += 1;

            let mut metric = None;
            if self.config.eval_every > 0 && step % self.config.eval_every == 0 {
                metric = self.eval_and_track()?;
            }
            if self.cursor >= order.len() {
                self.report.epoch_losses.push(self.epoch_loss / self.epoch_steps as f64);
                self.epoch += 1;
                self.cursor = 0;
                self.epoch_loss = 0.0;
                self.epoch_steps = 0;
                if self.config.eval_every == 0 {
                    metric = self.eval_and_track()?;
                }
            }
            let metric = metric.map(|m| m.to_string()).unwrap_or_default();
            self.report.log.push(format!("{step}\t{lr}\t{}\t{metric}", g.loss));
        }
        Ok(self.done)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.run_steps(u64::MAX)? {}
        Ok(())
    }

    /// The report and the best model (the last one if nothing was evaluated).
    pub fn finish(self) -> (TrainReport, TransformerModel<T>) {
        let model = self.best.unwrap_or(self.model);
        (self.report, model)
    }
}

/// Trains to completion and returns the report and best model.
pub fn train_loop<T: Scalar>(
    model: TransformerModel<T>,
    train: &[SampledPair],
    validation: &ParallelCorpus,
    tokenizer: &BpeModel,
    config: &TrainConfig,
    decode: &DecodeConfig,
) -> Result<(TrainReport, TransformerModel<T>)> {
    let mut tr = Trainer::new(model, train, validation, tokenizer, config.clone(), decode.clone())?;
    tr.run()?;
    Ok(tr.finish())
}
