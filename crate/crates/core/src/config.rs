//! Line-oriented `section.key = value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so an empty file is a valid configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::corpus::{DEFAULT_OVERSAMPLE_FACTOR, DEFAULT_VALIDATION_FRACTION};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::filtering::{FeatureConfig, ThresholdConfig};
use crate::gbdt::{GbdtParams, ParamDistributions};
use crate::model::ModelConfig;
use crate::subword::DEFAULT_VOCAB_SIZE;
use crate::training::{LrSchedule, StopMetric, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    NoFinetune,
    NoOversample,
    NoPostprocess,
    MultiOutput,
    Nucleus,
    BackTranslate,
    ModelFilter,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::NoFinetune,
        Variant::NoOversample,
        Variant::NoPostprocess,
        Variant::MultiOutput,
        Variant::Nucleus,
        Variant::BackTranslate,
        Variant::ModelFilter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NoFinetune => "no_finetune",
            Variant::NoOversample => "no_oversample",
            Variant::NoPostprocess => "no_postprocess",
            Variant::MultiOutput => "multi_output",
            Variant::Nucleus => "nucleus",
            Variant::BackTranslate => "back_translate",
            Variant::ModelFilter => "model_filter",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Which prompts are decoded and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    /// Every prompt is used for training and scored.
    HeldIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub seed: u64,
    pub eval_split: EvalSplit,
    pub corpus: PathBuf,
    pub work_dir: PathBuf,
    /// Starting weights for training, or the decoding model of `no_finetune`.
    pub init_checkpoint: Option<PathBuf>,
    /// Target-language references for back translation, in prediction-file
    /// format. Without it the forward model's 1-best output is used.
    pub references: Option<PathBuf>,
    pub oversample_factor: f64,
    pub validation_fraction: f64,
    pub max_pairs: u64,
    pub vocab_size: usize,
    pub lowercase: bool,
    /// `vocab_size` is ignored; the tokenizer decides it.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub threshold: ThresholdConfig,
    pub features: FeatureConfig,
    pub decision_threshold: f64,
    pub gbdt: ParamDistributions,
    pub gbdt_search_iters: usize,
    pub gbdt_folds: usize,
    pub multi_output_top_n: usize,
    pub bt_beam_size: usize,
    pub bt_top_k: usize,
    pub no_finetune_beam: usize,
    pub no_oversample_beam: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: Variant::Baseline,
            seed: 1,
            eval_split: EvalSplit::Validation,
            corpus: PathBuf::from("corpus.txt"),
            work_dir: PathBuf::from("run"),
            init_checkpoint: None,
            references: None,
            oversample_factor: DEFAULT_OVERSAMPLE_FACTOR,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            max_pairs: 2_000_000,
            vocab_size: DEFAULT_VOCAB_SIZE,
            lowercase: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            threshold: ThresholdConfig::default(),
            features: FeatureConfig::default(),
            decision_threshold: 0.5,
            gbdt: ParamDistributions::default(),
            gbdt_search_iters: 10,
            gbdt_folds: 5,
            multi_output_top_n: 5,
            bt_beam_size: 15,
            bt_top_k: 5,
            no_finetune_beam: 12,
            no_oversample_beam: 15,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl PipelineConfig {
    pub const KEYS: &'static [&'static str] = &[
        "pipeline.variant",
        "pipeline.seed",
        "pipeline.eval_split",
        "pipeline.max_pairs",
        "paths.corpus",
        "paths.work_dir",
        "paths.init_checkpoint",
        "paths.references",
        "corpus.oversample_factor",
        "corpus.validation_fraction",
        "tokenizer.vocab_size",
        "score.lowercase",
        "model.enc_layers",
        "model.dec_layers",
        "model.heads",
        "model.d_model",
        "model.d_ff",
        "model.dropout",
        "model.max_positions",
        "train.batch_size",
        "train.lr",
        "train.beta1",
        "train.beta2",
        "train.epsilon",
        "train.decay_steps",
        "train.schedule",
        "train.clip_norm",
        "train.patience",
        "train.smoothing",
        "train.max_epochs",
        "train.max_steps",
        "train.eval_every",
        "train.stop_metric",
        "decode.beam_size",
        "decode.top_k",
        "decode.max_len",
        "decode.length_norm_alpha",
        "decode.nucleus_p",
        "decode.n_samples",
        "filter.threshold",
        "filter.feature_len",
        "filter.pad_value",
        "filter.decision_threshold",
        "gbdt.learning_rate",
        "gbdt.min_samples_leaf",
        "gbdt.lambda",
        "gbdt.max_depth",
        "gbdt.colsample_bytree",
        "gbdt.colsample_bylevel",
        "gbdt.n_estimators",
        "gbdt.search_iters",
        "gbdt.folds",
        "multi_output.top_n",
        "back_translate.beam_size",
        "back_translate.top_k",
        "ablation.no_finetune_beam",
        "ablation.no_oversample_beam",
    ];

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "pipeline.variant" => self.variant.to_string(),
            "pipeline.seed" => self.seed.to_string(),
            "pipeline.eval_split" => match self.eval_split {
                EvalSplit::Validation => "validation".into(),
                EvalSplit::HeldIn => "held_in".into(),
            },
            "pipeline.max_pairs" => self.max_pairs.to_string(),
            "paths.corpus" => self.corpus.display().to_string(),
            "paths.work_dir" => self.work_dir.display().to_string(),
            "paths.init_checkpoint" => show_path(&self.init_checkpoint),
            "paths.references" => show_path(&self.references),
            "corpus.oversample_factor" => self.oversample_factor.to_string(),
            "corpus.validation_fraction" => self.validation_fraction.to_string(),
            "tokenizer.vocab_size" => self.vocab_size.to_string(),
            "score.lowercase" => self.lowercase.to_string(),
            "model.enc_layers" => self.model.enc_layers.to_string(),
            "model.dec_layers" => self.model.dec_layers.to_string(),
            "model.heads" => self.model.heads.to_string(),
            "model.d_model" => self.model.d_model.to_string(),
            "model.d_ff" => self.model.d_ff.to_string(),
            "model.dropout" => self.model.dropout.to_string(),
            "model.max_positions" => self.model.max_positions.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.beta1" => self.train.beta1.to_string(),
            "train.beta2" => self.train.beta2.to_string(),
            "train.epsilon" => self.train.epsilon.to_string(),
            "train.decay_steps" => self.train.decay_steps.to_string(),
            "train.schedule" => match self.train.schedule {
                LrSchedule::DecayAfter => "decay_after".into(),
                LrSchedule::Warmup => "warmup".into(),
            },
            "train.clip_norm" => self.train.clip_norm.to_string(),
            "train.patience" => self.train.patience.to_string(),
            "train.smoothing" => self.train.smoothing.to_string(),
            "train.max_epochs" => self.train.max_epochs.to_string(),
            "train.max_steps" => self.train.max_steps.to_string(),
            "train.eval_every" => self.train.eval_every.to_string(),
            "train.stop_metric" => match self.train.stop_metric {
                StopMetric::ValidationLoss => "validation_loss".into(),
                StopMetric::ValidationWf => "validation_wf".into(),
            },
            "decode.beam_size" => self.decode.beam_size.to_string(),
            "decode.top_k" => self.decode.top_k.to_string(),
            "decode.max_len" => self.decode.max_len.to_string(),
            "decode.length_norm_alpha" => self.decode.length_norm_alpha.to_string(),
            "decode.nucleus_p" => self.decode.nucleus_p.to_string(),
            "decode.n_samples" => self.decode.n_samples.to_string(),
            "filter.threshold" => self.threshold.min_max_token_logprob.to_string(),
            "filter.feature_len" => self.features.len.to_string(),
            "filter.pad_value" => self.features.pad_value.to_string(),
            "filter.decision_threshold" => self.decision_threshold.to_string(),
            "gbdt.learning_rate" => self.gbdt.base.learning_rate.to_string(),
            "gbdt.min_samples_leaf" => self.gbdt.base.min_samples_leaf.to_string(),
            "gbdt.lambda" => self.gbdt.base.lambda.to_string(),
            "gbdt.max_depth" => list(&self.gbdt.max_depth),
            "gbdt.colsample_bytree" => list(&self.gbdt.colsample_bytree),
            "gbdt.colsample_bylevel" => list(&self.gbdt.colsample_bylevel),
            "gbdt.n_estimators" => list(&self.gbdt.n_estimators),
            "gbdt.search_iters" => self.gbdt_search_iters.to_string(),
            "gbdt.folds" => self.gbdt_folds.to_string(),
            "multi_output.top_n" => self.multi_output_top_n.to_string(),
            "back_translate.beam_size" => self.bt_beam_size.to_string(),
            "back_translate.top_k" => self.bt_top_k.to_string(),
            "ablation.no_finetune_beam" => self.no_finetune_beam.to_string(),
            "ablation.no_oversample_beam" => self.no_oversample_beam.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "pipeline.variant" => self.variant = v.parse()?,
            "pipeline.seed" => self.seed = parse(key, v)?,
            "pipeline.eval_split" => {
                self.eval_split = match v {
                    "validation" => EvalSplit::Validation,
                    "held_in" => EvalSplit::HeldIn,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "pipeline.max_pairs" => self.max_pairs = parse(key, v)?,
            "paths.corpus" => self.corpus = PathBuf::from(v),
            "paths.work_dir" => self.work_dir = PathBuf::from(v),
            "paths.init_checkpoint" => self.init_checkpoint = opt_path(v),
            "paths.references" => self.references = opt_path(v),
            "corpus.oversample_factor" => self.oversample_factor = parse(key, v)?,
            "corpus.validation_fraction" => self.validation_fraction = parse(key, v)?,
            "tokenizer.vocab_size" => self.vocab_size = parse(key, v)?,
            "score.lowercase" => self.lowercase = parse(key, v)?,
            "model.enc_layers" => self.model.enc_layers = parse(key, v)?,
            "model.dec_layers" => self.model.dec_layers = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.max_positions" => self.model.max_positions = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.epsilon" => self.train.epsilon = parse(key, v)?,
            "train.decay_steps" => self.train.decay_steps = parse(key, v)?,
            "train.schedule" => {
                self.train.schedule = match v {
                    "decay_after" => LrSchedule::DecayAfter,
                    "warmup" => LrSchedule::Warmup,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.smoothing" => self.train.smoothing = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.max_steps" => self.train.max_steps = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.stop_metric" => {
                self.train.stop_metric = match v {
                    "validation_loss" => StopMetric::ValidationLoss,
                    "validation_wf" => StopMetric::ValidationWf,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "decode.beam_size" => self.decode.beam_size = parse(key, v)?,
            "decode.top_k" => self.decode.top_k = parse(key, v)?,
            "decode.max_len" => self.decode.max_len = parse(key, v)?,
            "decode.length_norm_alpha" => self.decode.length_norm_alpha = parse(key, v)?,
            "decode.nucleus_p" => self.decode.nucleus_p = parse(key, v)?,
            "decode.n_samples" => self.decode.n_samples = parse(key, v)?,
            "filter.threshold" => self.threshold.min_max_token_logprob = parse(key, v)?,
            "filter.feature_len" => self.features.len = parse(key, v)?,
            "filter.pad_value" => self.features.pad_value = parse(key, v)?,
            "filter.decision_threshold" => self.decision_threshold = parse(key, v)?,
            "gbdt.learning_rate" => self.gbdt.base.learning_rate = parse(key, v)?,
            "gbdt.min_samples_leaf" => self.gbdt.base.min_samples_leaf = parse(key, v)?,
            "gbdt.lambda" => self.gbdt.base.lambda = parse(key, v)?,
            "gbdt.max_depth" => self.gbdt.max_depth = parse_list(key, v)?,
            "gbdt.colsample_bytree" => self.gbdt.colsample_bytree = parse_list(key, v)?,
            "gbdt.colsample_bylevel" => self.gbdt.colsample_bylevel = parse_list(key, v)?,
            "gbdt.n_estimators" => self.gbdt.n_estimators = parse_list(key, v)?,
            "gbdt.search_iters" => self.gbdt_search_iters = parse(key, v)?,
            "gbdt.folds" => self.gbdt_folds = parse(key, v)?,
            "multi_output.top_n" => self.multi_output_top_n = parse(key, v)?,
            "back_translate.beam_size" => self.bt_beam_size = parse(key, v)?,
            "back_translate.top_k" => self.bt_top_k = parse(key, v)?,
            "ablation.no_finetune_beam" => self.no_finetune_beam = parse(key, v)?,
            "ablation.no_oversample_beam" => self.no_oversample_beam = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = PipelineConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected `key = value`"))?;
            c.set(k.trim(), v).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in Self::KEYS {
            let sec = key.split('.').next().unwrap_or_default();
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = sec;
            }
            out.push_str(&format!("{key} = {}\n", self.get(key).unwrap_or_default()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decode.validate()?;
        if !self.threshold.min_max_token_logprob.is_finite() {
            return Err(Error::Config("filter.threshold must be finite".into()));
        }
        if self.features.len == 0 {
            return Err(Error::Config("filter.feature_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("corpus.validation_fraction must lie in [0, 1)".into()));
        }
        if self.multi_output_top_n == 0 || self.bt_top_k == 0 || self.bt_top_k > self.bt_beam_size {
            return Err(Error::Config("invalid multi-output or back-translation sizes".into()));
        }
        Ok(())
    }

    pub fn gbdt_params(&self) -> GbdtParams {
        self.gbdt.base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_keys() {
        let mut c = PipelineConfig::default();
        c.set("pipeline.variant", "back_translate").unwrap();
        c.set("paths.init_checkpoint", "x.ckpt").unwrap();
        c.set("gbdt.max_depth", "1, 2").unwrap();
        c.set_pair("train.lr=0.001").unwrap();
        let back = PipelineConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(c.set("nope.key", "1").is_err());
        assert!(PipelineConfig::from_text("train.lr = abc").is_err());
        assert_eq!(PipelineConfig::from_text("# empty\n\n").unwrap(), PipelineConfig::default());
    }
}
