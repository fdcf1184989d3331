//! End-to-end runs: data preparation, training, decoding, filtering and
//! scoring. Every variant is a [`Plan`] over the same stage functions.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{EvalSplit, PipelineConfig, Variant};
use crate::corpus::{
    oversample, oversample_count, parse_corpus, reverse_pairs, split_by_prompt, ParallelCorpus, SampledPair,
};
use crate::decoding::{beam_search, make_multi_output_target, nucleus_sample, DecodeConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::filtering::{label_predictions, model_filter, threshold_filter, FeatureConfig, ThresholdConfig};
use crate::gbdt::{fit, randomized_search, CvResult, GbdtModel, GbdtParams, ParamDistributions};
use crate::metrics::{normalize_text, CorpusScore, NormalizeConfig};
use crate::model::{Checkpoint, TransformerModel};
use crate::predictions::{score_predictions, PredictionFile, PromptPredictions, ScoredPrediction};
use crate::subword::{BpeModel, SEP};
use crate::training::{encode_source, hypothesis_texts, TrainConfig, TrainReport, Trainer};

pub type Model = TransformerModel<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainData {
    Oversampled,
    AllPairs,
    MultiOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Threshold,
    Off,
    Classifier,
}

/// Stage choices of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub data: TrainData,
    pub train: bool,
    pub decode: DecodeConfig,
    pub nucleus: bool,
    pub back_translate: bool,
    pub filter: FilterKind,
}

impl Plan {
    pub fn for_config(c: &PipelineConfig) -> Plan {
        let base = Plan {
            data: TrainData::Oversampled,
            train: true,
            decode: c.decode.clone(),
            nucleus: false,
            back_translate: false,
            filter: FilterKind::Threshold,
        };
        let wide = |beam: usize| DecodeConfig {
            beam_size: beam,
            top_k: beam,
            ..c.decode.clone()
        };
        let multi = DecodeConfig {
            max_len: c.decode.max_len * c.multi_output_top_n,
            ..c.decode.clone()
        };
        match c.variant {
            Variant::Baseline => base,
            Variant::NoFinetune => Plan {
                train: false,
                decode: wide(c.no_finetune_beam),
                ..base
            },
            Variant::NoOversample => Plan {
                data: TrainData::AllPairs,
                decode: wide(c.no_oversample_beam),
                ..base
            },
            Variant::NoPostprocess => Plan {
                filter: FilterKind::Off,
                ..base
            },
            Variant::MultiOutput => Plan {
                data: TrainData::MultiOutput,
                decode: multi,
                ..base
            },
            Variant::Nucleus => Plan {
                data: TrainData::MultiOutput,
                decode: multi,
                nucleus: true,
                ..base
            },
            Variant::BackTranslate => Plan {
                data: TrainData::MultiOutput,
                decode: multi,
                back_translate: true,
                ..base
            },
            Variant::ModelFilter => Plan {
                filter: FilterKind::Classifier,
                ..base
            },
        }
    }
}

/// Ordered record of the stages a run executed and their parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTrace {
    pub lines: Vec<String>,
}

impl StageTrace {
    pub fn push(&mut self, stage: &str, params: &[(&str, String)]) {
        let mut line = format!("stage={stage}");
        for (k, v) in params {
            let _ = write!(line, " {k}={v}");
        }
        log::info!("{line}");
        self.lines.push(line);
    }

    /// Stage names in order.
    pub fn stages(&self) -> Vec<&str> {
        self.lines
            .iter()
            .map(|l| l.split_whitespace().next().unwrap_or_default().trim_start_matches("stage="))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: ParallelCorpus,
    pub validation: ParallelCorpus,
    pub pairs: Vec<SampledPair>,
}

/// Splits by prompt, then oversamples the training side. Refuses to
/// materialize more than `max_pairs` pairs.
pub fn prepare(corpus: &ParallelCorpus, factor: f64, fraction: f64, seed: u64, max_pairs: u64) -> Result<Prepared> {
    let (train, validation) = if fraction == 0.0 {
        (corpus.clone(), ParallelCorpus {
            records: Vec::new(),
            direction: corpus.direction.clone(),
        })
    } else {
        split_by_prompt(corpus, fraction, seed)?
    };
    let n = oversample_count(&train, factor);
    if n > max_pairs {
        return Err(Error::invalid(format!(
            "oversampling would emit {n} pairs, above the max_pairs cap of {max_pairs}"
        )));
    }
    let pairs = oversample(&train, factor)?;
    Ok(Prepared {
        train,
        validation,
        pairs,
    })
}

pub fn serialize_pairs(pairs: &[SampledPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "{}|{}|{}", p.prompt_id, p.source_text, p.target_text);
    }
    s
}

pub fn parse_pairs(text: &str) -> Result<Vec<SampledPair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let parts: Vec<&str> = l.split('|').collect();
            match parts.as_slice() {
                [id, src, tgt] if !tgt.trim().is_empty() => Ok(SampledPair {
                    prompt_id: id.trim().into(),
                    source_text: src.split_whitespace().collect::<Vec<_>>().join(" "),
                    target_text: tgt.split_whitespace().collect::<Vec<_>>().join(" "),
                }),
                _ => Err(Error::parse(i + 1, "expected `prompt_id|source|target`")),
            }
        })
        .collect()
}

/// One pair per prompt whose target joins its top translations.
pub fn multi_output_pairs(corpus: &ParallelCorpus, top_n: usize) -> Result<Vec<SampledPair>> {
    corpus
        .records
        .iter()
        .map(|r| {
            Ok(SampledPair {
                prompt_id: r.prompt_id.clone(),
                source_text: r.source_text.clone(),
                target_text: make_multi_output_target(&r.translations, top_n, SEP)?,
            })
        })
        .collect()
}

/// Tokenizer trained on both sides of the training prompts.
pub fn train_tokenizer(corpus: &ParallelCorpus, vocab_size: usize, seed: u64) -> Result<BpeModel> {
    let mut texts = Vec::new();
    for r in &corpus.records {
        texts.push(r.source_text.as_str());
        texts.extend(r.translations.iter().map(|t| t.target_text.as_str()));
    }
    BpeModel::train(&texts, vocab_size, seed)
}

fn to_predictions(tok: &BpeModel, hyps: &[Hypothesis]) -> Result<Vec<ScoredPrediction>> {
    let mut out = Vec::new();
    for h in hyps {
        for text in hypothesis_texts(tok, std::slice::from_ref(h))? {
            out.push(ScoredPrediction::scored(text, h.token_logprobs.clone()));
        }
    }
    Ok(out)
}

/// Appends `extra` to `into`, skipping texts already present.
pub fn union_candidates(into: &mut Vec<ScoredPrediction>, extra: Vec<ScoredPrediction>) {
    let mut seen: HashSet<String> = into.iter().map(|c| c.text.clone()).collect();
    for c in extra {
        if seen.insert(c.text.clone()) {
            into.push(c);
        }
    }
}

/// Beam-decodes each `(prompt_id, source)` in parallel.
pub fn decode_sources(
    model: &Model,
    tok: &BpeModel,
    items: &[(String, String)],
    config: &DecodeConfig,
) -> Result<PredictionFile> {
    let max_pos = model.config().max_positions;
    let prompts = items
        .par_iter()
        .map(|(id, src)| {
            let ids = encode_source(tok, src, max_pos);
            let hyps = beam_search(model, &ids, config)?;
            Ok(PromptPredictions {
                prompt_id: id.clone(),
                source_text: src.clone(),
                candidates: to_predictions(tok, &hyps)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionFile { prompts })
}

fn items_of(corpus: &ParallelCorpus) -> Vec<(String, String)> {
    corpus
        .records
        .iter()
        .map(|r| (r.prompt_id.clone(), r.source_text.clone()))
        .collect()
}

pub fn decode_corpus(model: &Model, tok: &BpeModel, corpus: &ParallelCorpus, config: &DecodeConfig) -> Result<PredictionFile> {
    decode_sources(model, tok, &items_of(corpus), config)
}

/// Nucleus samples per prompt; the sampling seed depends on the prompt index.
pub fn sample_corpus(
    model: &Model,
    tok: &BpeModel,
    corpus: &ParallelCorpus,
    config: &DecodeConfig,
    seed: u64,
) -> Result<PredictionFile> {
    let max_pos = model.config().max_positions;
    let prompts = corpus
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let ids = encode_source(tok, &r.source_text, max_pos);
            let hyps = nucleus_sample(model, &ids, config, seed.wrapping_add(i as u64))?;
            Ok(PromptPredictions {
                prompt_id: r.prompt_id.clone(),
                source_text: r.source_text.clone(),
                candidates: to_predictions(tok, &hyps)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionFile { prompts })
}

/// Decodes every reference (a candidate line in `references`) with the
/// reverse model and returns up to `top` source-side paraphrases per prompt.
/// Prompts without references are skipped with a warning.
pub fn back_translate(
    reverse: &Model,
    tok: &BpeModel,
    references: &PredictionFile,
    beam: usize,
    top: usize,
    max_len: usize,
) -> Result<PredictionFile> {
    let config = DecodeConfig {
        beam_size: beam,
        top_k: top,
        max_len,
        ..DecodeConfig::default()
    };
    let mut out = PredictionFile::default();
    for p in &references.prompts {
        if p.candidates.is_empty() {
            log::warn!("no reference for prompt `{}`; skipping", p.prompt_id);
            continue;
        }
        let items: Vec<(String, String)> = p.candidates.iter().map(|c| (p.prompt_id.clone(), c.text.clone())).collect();
        let decoded = decode_sources(reverse, tok, &items, &config)?;
        let mut cands = Vec::new();
        for d in decoded.prompts {
            union_candidates(&mut cands, d.candidates);
        }
        cands.truncate(top);
        out.prompts.push(PromptPredictions {
            prompt_id: p.prompt_id.clone(),
            source_text: p.source_text.clone(),
            candidates: cands,
        });
    }
    Ok(out)
}

/// Forward-decodes the original source and every paraphrase, unioning the
/// outputs per prompt.
pub fn decode_with_paraphrases(
    model: &Model,
    tok: &BpeModel,
    corpus: &ParallelCorpus,
    paraphrases: &PredictionFile,
    config: &DecodeConfig,
) -> Result<PredictionFile> {
    let by_id: HashMap<&str, &PromptPredictions> =
        paraphrases.prompts.iter().map(|p| (p.prompt_id.as_str(), p)).collect();
    let mut out = decode_corpus(model, tok, corpus, config)?;
    for p in &mut out.prompts {
        let Some(para) = by_id.get(p.prompt_id.as_str()) else {
            continue;
        };
        let items: Vec<(String, String)> = para
            .candidates
            .iter()
            .filter(|c| c.text != p.source_text)
            .map(|c| (p.prompt_id.clone(), c.text.clone()))
            .collect();
        for d in decode_sources(model, tok, &items, config)?.prompts {
            union_candidates(&mut p.candidates, d.candidates);
        }
    }
    Ok(out)
}

pub fn apply_threshold(preds: &PredictionFile, config: &ThresholdConfig) -> PredictionFile {
    PredictionFile {
        prompts: preds
            .prompts
            .iter()
            .map(|p| PromptPredictions {
                candidates: threshold_filter(&p.candidates, config),
                ..p.clone()
            })
            .collect(),
    }
}

/// Feature rows, labels and the prompt index of each row.
pub fn filter_training_rows(
    preds: &PredictionFile,
    gold: &ParallelCorpus,
    norm: &NormalizeConfig,
    features: &FeatureConfig,
) -> Result<(Vec<Vec<f64>>, Vec<bool>, Vec<usize>)> {
    let by_id: HashMap<&str, usize> = preds
        .prompts
        .iter()
        .enumerate()
        .map(|(i, p)| (p.prompt_id.as_str(), i))
        .collect();
    let (mut xs, mut ys, mut owner) = (Vec::new(), Vec::new(), Vec::new());
    for r in &gold.records {
        let &pi = by_id
            .get(r.prompt_id.as_str())
            .ok_or_else(|| Error::MissingPrompts(vec![r.prompt_id.clone()]))?;
        for (f, y) in label_predictions(&preds.prompts[pi].candidates, r, norm, features) {
            xs.push(f.values);
            ys.push(y);
            owner.push(pi);
        }
    }
    Ok((xs, ys, owner))
}

pub struct ClassifierFilter {
    pub params: GbdtParams,
    pub cv: Option<CvResult>,
    /// Fit on every labelled row.
    pub model: Option<GbdtModel>,
    pub filtered: PredictionFile,
}

/// Searches GBDT settings with k-fold CV on the labelled predictions, then
/// filters each prompt with a model fit on the other prompts' folds.
#[allow(clippy::too_many_arguments)]
pub fn classifier_filter(
    preds: &PredictionFile,
    gold: &ParallelCorpus,
    norm: &NormalizeConfig,
    features: &FeatureConfig,
    dist: &ParamDistributions,
    iters: usize,
    folds: usize,
    decision_threshold: f64,
    seed: u64,
) -> Result<ClassifierFilter> {
    let (xs, ys, owner) = filter_training_rows(preds, gold, norm, features)?;
    let (params, cv) = match randomized_search(&xs, &ys, dist, iters.max(1), folds, seed) {
        Ok((p, cv)) => (p, Some(cv)),
        Err(e) => {
            log::warn!("gbdt search failed ({e}); using base parameters");
            (dist.base.clone(), None)
        }
    };
    let model = fit(&xs, &ys, &params, seed).ok();

    let n = preds.prompts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = folds.clamp(2, n.max(2));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    let mut filtered = preds.clone();
    for f in 0..k {
        let (tx, ty): (Vec<Vec<f64>>, Vec<bool>) = xs
            .iter()
            .zip(&ys)
            .zip(&owner)
            .filter(|(_, &o)| fold_of[o] != f)
            .map(|((x, &y), _)| (x.clone(), y))
            .unzip();
        let fold_model = match fit(&tx, &ty, &params, seed.wrapping_add(f as u64)) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("fold {f}: cannot fit filter ({e}); keeping its predictions");
                continue;
            }
        };
        for (i, p) in filtered.prompts.iter_mut().enumerate() {
            if fold_of[i] == f {
                p.candidates = model_filter(&p.candidates, &fold_model, features, decision_threshold)?;
            }
        }
    }
    Ok(ClassifierFilter {
        params,
        cv,
        model,
        filtered,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub kept: usize,
    pub score: CorpusScore,
}

pub fn sweep_threshold(
    preds: &PredictionFile,
    gold: &ParallelCorpus,
    grid: &[f64],
    norm: &NormalizeConfig,
) -> Result<Vec<SweepRow>> {
    if !preds.has_scores() {
        return Err(Error::invalid("predictions carry no token scores; decode with scores enabled"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|t| {
            let kept = preds.retain(|c| crate::filtering::keeps(c, &ThresholdConfig { min_max_token_logprob: t }));
            Ok(SweepRow {
                threshold: t,
                kept: kept.candidate_count(),
                score: score_predictions(gold, &kept, norm)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("threshold,kept,P,WR,WMaF\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4}",
            r.threshold, r.kept, r.score.precision, r.score.weighted_recall, r.score.weighted_macro_f1
        );
    }
    s
}

/// Everything a pipeline run produced.
pub struct PipelineOutput {
    pub score: CorpusScore,
    /// Decoder output before filtering, with scores.
    pub raw: PredictionFile,
    pub filtered: PredictionFile,
    pub trace: StageTrace,
    pub report: Option<TrainReport>,
    pub model: Model,
    pub tokenizer: BpeModel,
    pub eval: ParallelCorpus,
    pub classifier: Option<ClassifierFilter>,
    pub paraphrases: Option<PredictionFile>,
}

fn norm_of(c: &PipelineConfig) -> NormalizeConfig {
    NormalizeConfig { lowercase: c.lowercase }
}

fn train_model(
    model: Model,
    pairs: &[SampledPair],
    validation: &ParallelCorpus,
    tok: &BpeModel,
    train: &TrainConfig,
    decode: &DecodeConfig,
) -> Result<(TrainReport, Model)> {
    let mut tr = Trainer::new(model, pairs, validation, tok, train.clone(), decode.clone())?;
    tr.run()?;
    Ok(tr.finish())
}

fn fresh_model(c: &PipelineConfig, tok: &BpeModel, seed: u64) -> Result<Model> {
    let cfg = crate::model::ModelConfig {
        vocab_size: tok.vocab_size(),
        ..c.model.clone()
    };
    TransformerModel::new(cfg, seed)
}

/// Runs a variant end to end in memory. `init` supplies starting weights
/// (and their tokenizer); it is trained further unless the variant skips
/// training, in which case it is decoded as is.
pub fn run_pipeline(
    c: &PipelineConfig,
    corpus: &ParallelCorpus,
    init: Option<(Model, BpeModel)>,
) -> Result<PipelineOutput> {
    c.validate()?;
    let plan = Plan::for_config(c);
    let mut trace = StageTrace::default();
    trace.push("config", &[("variant", c.variant.to_string()), ("seed", c.seed.to_string())]);

    let fraction = match c.eval_split {
        EvalSplit::Validation => c.validation_fraction,
        EvalSplit::HeldIn => 0.0,
    };
    let prep = prepare(corpus, c.oversample_factor, fraction, c.seed, c.max_pairs).map_err(|e| e.in_stage("prepare"))?;
    let eval = match c.eval_split {
        EvalSplit::Validation => prep.validation.clone(),
        EvalSplit::HeldIn => prep.train.clone(),
    };
    if eval.is_empty() {
        return Err(Error::Empty("no prompts to evaluate").in_stage("prepare"));
    }
    trace.push(
        "prepare",
        &[
            ("factor", c.oversample_factor.to_string()),
            ("fraction", fraction.to_string()),
            ("train_prompts", prep.train.len().to_string()),
            ("eval_prompts", eval.len().to_string()),
        ],
    );

    let (model, tok) = match init {
        Some((m, t)) => {
            trace.push("tokenizer", &[("source", "init".into()), ("vocab", t.vocab_size().to_string())]);
            (m, t)
        }
        None => {
            let t = train_tokenizer(&prep.train, c.vocab_size, c.seed).map_err(|e| e.in_stage("tokenizer"))?;
            trace.push("tokenizer", &[("source", "trained".into()), ("vocab", t.vocab_size().to_string())]);
            let m = fresh_model(c, &t, c.seed).map_err(|e| e.in_stage("init"))?;
            (m, t)
        }
    };

    let (model, report) = if plan.train {
        let (pairs, top_n) = match plan.data {
            TrainData::Oversampled => (prep.pairs.clone(), 0),
            TrainData::AllPairs => (prep.train.all_pairs(), 0),
            TrainData::MultiOutput => (
                multi_output_pairs(&prep.train, c.multi_output_top_n).map_err(|e| e.in_stage("train"))?,
                c.multi_output_top_n,
            ),
        };
        trace.push(
            "train",
            &[("data", format!("{:?}", plan.data)), ("pairs", pairs.len().to_string())],
        );
        let tc = TrainConfig {
            multi_output_top_n: top_n,
            ..c.train.clone()
        };
        let (report, model) =
            train_model(model, &pairs, &prep.validation, &tok, &tc, &plan.decode).map_err(|e| e.in_stage("train"))?;
        (model, Some(report))
    } else {
        trace.push("train", &[("skipped", "true".into())]);
        (model, None)
    };

    let mut out = evaluate_plan(c, &plan, &model, &tok, &prep.train, &eval, &mut trace)?;
    out.report = report;
    out.trace = trace;
    Ok(out)
}

/// Decoding, filtering and scoring stages for an already trained model.
/// `train` is used only to fit the reverse model for back translation.
pub fn evaluate_plan(
    c: &PipelineConfig,
    plan: &Plan,
    model: &Model,
    tok: &BpeModel,
    train: &ParallelCorpus,
    eval: &ParallelCorpus,
    trace: &mut StageTrace,
) -> Result<PipelineOutput> {
    let norm = norm_of(c);
    trace.push(
        "decode",
        &[
            ("beam", plan.decode.beam_size.to_string()),
            ("top_k", plan.decode.top_k.to_string()),
            ("max_len", plan.decode.max_len.to_string()),
        ],
    );
    let mut raw = decode_corpus(model, tok, eval, &plan.decode).map_err(|e| e.in_stage("decode"))?;

    if plan.nucleus {
        trace.push(
            "nucleus",
            &[("p", plan.decode.nucleus_p.to_string()), ("samples", plan.decode.n_samples.to_string())],
        );
        let sampled = sample_corpus(model, tok, eval, &plan.decode, c.seed).map_err(|e| e.in_stage("nucleus"))?;
        for (p, s) in raw.prompts.iter_mut().zip(sampled.prompts) {
            union_candidates(&mut p.candidates, s.candidates);
        }
    }

    let mut paraphrases = None;
    if plan.back_translate {
        let (para, merged) =
            back_translate_stage(c, plan, model, tok, train, eval, trace).map_err(|e| e.in_stage("back_translate"))?;
        raw = merged;
        paraphrases = Some(para);
    }

    let mut classifier = None;
    let filtered = match plan.filter {
        FilterKind::Threshold => {
            trace.push("filter", &[("kind", "threshold".into()), ("min", c.threshold.min_max_token_logprob.to_string())]);
            apply_threshold(&raw, &c.threshold)
        }
        FilterKind::Off => {
            trace.push("filter", &[("kind", "off".into())]);
            raw.clone()
        }
        FilterKind::Classifier => {
            trace.push(
                "filter",
                &[
                    ("kind", "classifier".into()),
                    ("features", c.features.len.to_string()),
                    ("folds", c.gbdt_folds.to_string()),
                ],
            );
            let cf = classifier_filter(
                &raw,
                eval,
                &norm,
                &c.features,
                &c.gbdt,
                c.gbdt_search_iters,
                c.gbdt_folds,
                c.decision_threshold,
                c.seed,
            )
            .map_err(|e| e.in_stage("filter"))?;
            let f = cf.filtered.clone();
            classifier = Some(cf);
            f
        }
    };

    let score = score_predictions(eval, &filtered, &norm).map_err(|e| e.in_stage("score"))?;
    trace.push("score", &[("wmaf", format!("{:.4}", score.weighted_macro_f1))]);
    Ok(PipelineOutput {
        score,
        raw,
        filtered,
        trace: StageTrace::default(),
        report: None,
        model: model.clone(),
        tokenizer: tok.clone(),
        eval: eval.clone(),
        classifier,
        paraphrases,
    })
}

fn back_translate_stage(
    c: &PipelineConfig,
    plan: &Plan,
    model: &Model,
    tok: &BpeModel,
    train: &ParallelCorpus,
    eval: &ParallelCorpus,
    trace: &mut StageTrace,
) -> Result<(PredictionFile, PredictionFile)> {
    let references = match &c.references {
        Some(path) => crate::predictions::parse_predictions(&fs::read_to_string(path)?)?,
        None => {
            let one_best = DecodeConfig {
                beam_size: plan.decode.beam_size,
                top_k: 1,
                ..plan.decode.clone()
            };
            let best = decode_corpus(model, tok, eval, &one_best)?;
            PredictionFile {
                prompts: best
                    .prompts
                    .into_iter()
                    .map(|mut p| {
                        p.candidates.truncate(1);
                        p
                    })
                    .collect(),
            }
        }
    };
    let reversed = reverse_pairs(train);
    let pairs = oversample(&reversed, c.oversample_factor)?;
    trace.push(
        "back_translate",
        &[
            ("reverse_pairs", pairs.len().to_string()),
            ("beam", c.bt_beam_size.to_string()),
            ("top", c.bt_top_k.to_string()),
            ("references", if c.references.is_some() { "file" } else { "forward_1best" }.into()),
        ],
    );
    let reverse = fresh_model(c, tok, c.seed.wrapping_add(1))?;
    let empty = ParallelCorpus::default();
    let (_, reverse) = train_model(reverse, &pairs, &empty, tok, &c.train, &c.decode)?;
    let para = back_translate(&reverse, tok, &references, c.bt_beam_size, c.bt_top_k, c.decode.max_len)?;
    let merged = decode_with_paraphrases(model, tok, eval, &para, &plan.decode)?;
    Ok((para, merged))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    fs::write(&p, text)?;
    Ok(p)
}

/// Runs the configured variant and writes its artifacts under `work_dir`.
pub fn cmd_pipeline(c: &PipelineConfig) -> Result<PipelineOutput> {
    fs::create_dir_all(&c.work_dir)?;
    let dir = c.work_dir.as_path();
    write(dir, "config.txt", &c.to_text())?;
    let corpus = parse_corpus(&fs::read_to_string(&c.corpus)?).map_err(|e| e.in_stage("load"))?;
    let init = load_init(c).map_err(|e| e.in_stage("load"))?;
    let res = run_pipeline(c, &corpus, init);
    let out = match res {
        Ok(o) => o,
        Err(e) => {
            let _ = write(dir, "error.txt", &format!("{e}\n"));
            return Err(e);
        }
    };
    write(dir, "trace.txt", &(out.trace.lines.join("\n") + "\n"))?;
    write(dir, "bpe.txt", &out.tokenizer.to_text())?;
    Checkpoint::new(out.model.clone()).save(dir.join("model.ckpt"))?;
    if let Some(r) = &out.report {
        write(dir, "train.log", &(r.log.join("\n") + "\n"))?;
    }
    write(dir, "predictions.raw.txt", &out.raw.serialize(true))?;
    write(dir, "predictions.txt", &out.filtered.serialize(true))?;
    if let Some(p) = &out.paraphrases {
        write(dir, "paraphrases.txt", &p.serialize(true))?;
    }
    if let Some(cf) = &out.classifier {
        if let Some(m) = &cf.model {
            write(dir, "gbdt.txt", &m.to_text())?;
        }
        if let Some(cv) = &cf.cv {
            let (a, sa) = cv.accuracy_mean_std();
            let (fa, sfa) = cv.f1_accept_mean_std();
            let (fr, sfr) = cv.f1_reject_mean_std();
            write(
                dir,
                "gbdt_cv.txt",
                &format!("accuracy {a:.4} ± {sa:.4}\nf1_accept {fa:.4} ± {sfa:.4}\nf1_reject {fr:.4} ± {sfr:.4}\n"),
            )?;
        }
    }
    write(dir, "score.txt", &format!("{}\n{}\n", CorpusScore::HEADER, out.score.report_line()))?;
    Ok(out)
}

/// Loads `paths.init_checkpoint` and the tokenizer stored next to it as
/// `bpe.txt`.
pub fn load_init(c: &PipelineConfig) -> Result<Option<(Model, BpeModel)>> {
    let Some(path) = &c.init_checkpoint else {
        return Ok(None);
    };
    let ck = Checkpoint::<f32>::load(path)?;
    let bpe_path = path.with_file_name("bpe.txt");
    let tok = BpeModel::from_text(&fs::read_to_string(&bpe_path).map_err(|e| {
        Error::Config(format!("tokenizer {} for the init checkpoint: {e}", bpe_path.display()))
    })?)?;
    if tok.vocab_size() != ck.model.config().vocab_size {
        return Err(Error::Config("init checkpoint and tokenizer vocabularies differ".into()));
    }
    Ok(Some((ck.model, tok)))
}

/// Summary counts of [`cmd_prepare`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSummary {
    pub train_prompts: usize,
    pub validation_prompts: usize,
    pub train_pairs: usize,
}

pub fn cmd_prepare(
    corpus_path: &Path,
    out_dir: &Path,
    factor: f64,
    fraction: f64,
    seed: u64,
    max_pairs: u64,
) -> Result<PrepareSummary> {
    let corpus = parse_corpus(&fs::read_to_string(corpus_path)?)?;
    let prep = prepare(&corpus, factor, fraction, seed, max_pairs)?;
    fs::create_dir_all(out_dir)?;
    write(out_dir, "train_pairs.txt", &serialize_pairs(&prep.pairs))?;
    write(out_dir, "train.txt", &prep.train.serialize())?;
    write(out_dir, "validation.txt", &prep.validation.serialize())?;
    Ok(PrepareSummary {
        train_prompts: prep.train.len(),
        validation_prompts: prep.validation.len(),
        train_pairs: prep.pairs.len(),
    })
}

/// Scores a prediction file against a gold corpus.
pub fn cmd_score(gold: &Path, predictions: &Path, norm: &NormalizeConfig) -> Result<CorpusScore> {
    let gold = parse_corpus(&fs::read_to_string(gold)?)?;
    let preds = crate::predictions::parse_predictions(&fs::read_to_string(predictions)?)?;
    score_predictions(&gold, &preds, norm)
}

/// Normalized texts of a prediction file per prompt, for set comparisons.
pub fn prediction_sets(preds: &PredictionFile, norm: &NormalizeConfig) -> HashMap<String, HashSet<String>> {
    preds
        .prompts
        .iter()
        .map(|p| {
            (
                p.prompt_id.clone(),
                p.candidates.iter().map(|c| normalize_text(&c.text, norm)).collect(),
            )
        })
        .collect()
}
