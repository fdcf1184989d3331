use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use multitrans::config::PipelineConfig;
use multitrans::corpus::{corpus_stats, parse_corpus, synth_fixture, ParallelCorpus};
use multitrans::filtering::{model_filter, ThresholdConfig};
use multitrans::gbdt::{fit, randomized_search, GbdtModel};
use multitrans::metrics::{CorpusScore, NormalizeConfig};
use multitrans::model::Checkpoint;
use multitrans::pipeline::{
    self, apply_threshold, back_translate, decode_corpus, filter_training_rows, parse_pairs, sample_corpus,
    sweep_csv, sweep_threshold, union_candidates, Model,
};
use multitrans::predictions::{parse_predictions, PredictionFile, PromptPredictions};
use multitrans::subword::BpeModel;
use multitrans::training::Trainer;

#[derive(Parser)]
#[command(name = "multitrans", version, about = "Multi-reference translation pipeline")]
struct Cli {
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::from_text(&read(p)?).with_context(|| format!("config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        for s in &self.set {
            c.set_pair(s)?;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Split a corpus by prompt and oversample the training side.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 50.0)]
        factor: f64,
        #[arg(long, default_value_t = 0.15)]
        fraction: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 2_000_000)]
        max_pairs: u64,
    },
    /// Train a subword model on both sides of a corpus.
    TrainBpe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 512)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or fine-tune, or resume) a translation model.
    Train {
        /// Pairs file written by `prepare`.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Start from these weights with fresh optimizer state.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue an interrupted run from `last.ckpt` in `out_dir`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Beam-decode (and optionally sample) every prompt of a corpus.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        /// Corpus file whose prompts are decoded.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Append `|total|token scores` to every candidate line.
        #[arg(long)]
        emit_scores: bool,
        /// Add nucleus samples to the beam output.
        #[arg(long)]
        nucleus: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Drop candidates whose best token score is below a threshold.
    Filter {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = -3.5, allow_hyphen_values = true)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train or apply the learned accept/reject filter.
    FilterModel {
        #[command(subcommand)]
        action: FilterModelCmd,
    },
    /// Print the seven-column score report.
    Score {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        lowercase: bool,
    },
    /// Re-filter and re-score over a threshold grid; writes CSV.
    SweepThreshold {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Comma-separated thresholds; `-inf` allowed.
        #[arg(long, default_value = "-inf,-6,-5,-4.5,-4,-3.5,-3,-2.5,-2,-1.5,-1,-0.5", allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lowercase: bool,
    },
    /// Turn target-language references into source-language paraphrases.
    BackTranslate {
        /// Reverse-direction checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        /// Prediction-format file; candidate lines are the references.
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value_t = 15)]
        beam: usize,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, default_value_t = 48)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full variant pipeline.
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print the effective configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Write a synthetic multi-reference corpus.
    Fixture {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        prompts: usize,
        #[arg(long, default_value_t = 4)]
        max_refs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also print corpus statistics.
        #[arg(long)]
        stats: bool,
    },
}

#[derive(Subcommand)]
enum FilterModelCmd {
    /// Fit a classifier on scored predictions labelled against gold.
    Train {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Keep candidates the classifier accepts.
    Apply {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn write(p: &Path, text: &str) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn load_corpus(p: &Path) -> Result<ParallelCorpus> {
    parse_corpus(&read(p)?).with_context(|| format!("parsing {}", p.display()))
}

fn load_predictions(p: &Path) -> Result<PredictionFile> {
    parse_predictions(&read(p)?).with_context(|| format!("parsing {}", p.display()))
}

fn load_bpe(p: &Path) -> Result<BpeModel> {
    BpeModel::from_text(&read(p)?).with_context(|| format!("parsing {}", p.display()))
}

fn load_model(p: &Path) -> Result<Model> {
    Ok(Checkpoint::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?.model)
}

fn print_score(s: &CorpusScore) {
    println!("{}", CorpusScore::HEADER);
    println!("{}", s.report_line());
}

fn cmd_train(
    pairs: &Path,
    validation: &Path,
    bpe: &Path,
    out_dir: &Path,
    init: Option<&Path>,
    resume: bool,
    c: &PipelineConfig,
) -> Result<()> {
    let pairs = parse_pairs(&read(pairs)?)?;
    let validation = load_corpus(validation)?;
    let tok = load_bpe(bpe)?;
    fs::create_dir_all(out_dir)?;
    let last = out_dir.join("last.ckpt");
    let best = out_dir.join("model.ckpt");
    let mut tr = if resume {
        let ck = Checkpoint::<f32>::load(&last).with_context(|| format!("loading {}", last.display()))?;
        let best_model = best.exists().then(|| load_model(&best)).transpose()?;
        Trainer::resume(ck, best_model, &pairs, &validation, &tok, c.train.clone(), c.decode.clone())?
    } else {
        let model = match init {
            Some(p) => load_model(p)?,
            None => Model::new(
                multitrans::model::ModelConfig {
                    vocab_size: tok.vocab_size(),
                    ..c.model.clone()
                },
                c.seed,
            )?,
        };
        Trainer::new(model, &pairs, &validation, &tok, c.train.clone(), c.decode.clone())?
    };
    let mut logged = tr.report().log.len();
    loop {
        let done = tr.run_steps(50)?;
        tr.checkpoint().save(&last)?;
        if let Some(b) = tr.best_model() {
            Checkpoint::new(b.clone()).save(&best)?;
        }
        let log = &tr.report().log;
        let mut text = String::new();
        for l in &log[logged..] {
            text.push_str(l);
            text.push('\n');
        }
        logged = log.len();
        use std::io::Write as _;
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("train.log"))?
            .write_all(text.as_bytes())?;
        if done {
            break;
        }
    }
    let (report, model) = tr.finish();
    Checkpoint::new(model).save(&best)?;
    println!(
        "steps {} evaluations {} best {:?} stopped_early {}",
        report.steps,
        report.metric_history.len(),
        report.best_eval,
        report.stopped_early
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Prepare {
            corpus,
            out_dir,
            factor,
            fraction,
            seed,
            max_pairs,
        } => {
            let s = pipeline::cmd_prepare(&corpus, &out_dir, factor, fraction, seed, max_pairs)?;
            println!(
                "train_prompts {} validation_prompts {} train_pairs {}",
                s.train_prompts, s.validation_prompts, s.train_pairs
            );
        }
        Cmd::TrainBpe { corpus, vocab_size, out } => {
            let tok = pipeline::train_tokenizer(&load_corpus(&corpus)?, vocab_size, 0)?;
            write(&out, &tok.to_text())?;
            println!("vocab_size {}", tok.vocab_size());
        }
        Cmd::Train {
            pairs,
            validation,
            bpe,
            out_dir,
            init,
            resume,
            config,
        } => cmd_train(&pairs, &validation, &bpe, &out_dir, init.as_deref(), resume, &config.load()?)?,
        Cmd::Decode {
            checkpoint,
            bpe,
            input,
            out,
            emit_scores,
            nucleus,
            config,
        } => {
            let c = config.load()?;
            let model = load_model(&checkpoint)?;
            let tok = load_bpe(&bpe)?;
            let corpus = load_corpus(&input)?;
            let mut preds = decode_corpus(&model, &tok, &corpus, &c.decode)?;
            if nucleus {
                let sampled = sample_corpus(&model, &tok, &corpus, &c.decode, c.seed)?;
                for (p, s) in preds.prompts.iter_mut().zip(sampled.prompts) {
                    union_candidates(&mut p.candidates, s.candidates);
                }
            }
            write(&out, &preds.serialize(emit_scores))?;
        }
        Cmd::Filter {
            predictions,
            threshold,
            out,
        } => {
            let preds = load_predictions(&predictions)?;
            if !preds.has_scores() {
                bail!("{} carries no token scores", predictions.display());
            }
            let kept = apply_threshold(
                &preds,
                &ThresholdConfig {
                    min_max_token_logprob: threshold,
                },
            );
            write(&out, &kept.serialize(true))?;
            println!("kept {} of {}", kept.candidate_count(), preds.candidate_count());
        }
        Cmd::FilterModel { action } => match action {
            FilterModelCmd::Train {
                predictions,
                gold,
                out,
                config,
            } => {
                let c = config.load()?;
                let preds = load_predictions(&predictions)?;
                let gold = load_corpus(&gold)?;
                let norm = NormalizeConfig { lowercase: c.lowercase };
                let (xs, ys, _) = filter_training_rows(&preds, &gold, &norm, &c.features)?;
                let (params, cv) = randomized_search(&xs, &ys, &c.gbdt, c.gbdt_search_iters, c.gbdt_folds, c.seed)?;
                let model = fit(&xs, &ys, &params, c.seed)?;
                write(&out, &model.to_text())?;
                let (a, sa) = cv.accuracy_mean_std();
                let (fa, _) = cv.f1_accept_mean_std();
                let (fr, _) = cv.f1_reject_mean_std();
                println!("{params:?}");
                println!("cv accuracy {a:.4} ± {sa:.4} f1_accept {fa:.4} f1_reject {fr:.4}");
            }
            FilterModelCmd::Apply {
                predictions,
                model,
                out,
                config,
            } => {
                let c = config.load()?;
                let preds = load_predictions(&predictions)?;
                let gbdt = GbdtModel::from_text(&read(&model)?)?;
                let mut kept = PredictionFile::default();
                for p in &preds.prompts {
                    kept.prompts.push(PromptPredictions {
                        candidates: model_filter(&p.candidates, &gbdt, &c.features, c.decision_threshold)?,
                        ..p.clone()
                    });
                }
                write(&out, &kept.serialize(true))?;
                println!("kept {} of {}", kept.candidate_count(), preds.candidate_count());
            }
        },
        Cmd::Score {
            gold,
            predictions,
            lowercase,
        } => print_score(&pipeline::cmd_score(&gold, &predictions, &NormalizeConfig { lowercase })?),
        Cmd::SweepThreshold {
            predictions,
            gold,
            grid,
            out,
            lowercase,
        } => {
            let grid = grid
                .split(',')
                .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad threshold `{s}`")))
                .collect::<Result<Vec<_>>>()?;
            let rows = sweep_threshold(
                &load_predictions(&predictions)?,
                &load_corpus(&gold)?,
                &grid,
                &NormalizeConfig { lowercase },
            )?;
            let csv = sweep_csv(&rows);
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Cmd::BackTranslate {
            checkpoint,
            bpe,
            references,
            beam,
            top,
            max_len,
            out,
        } => {
            let model = load_model(&checkpoint)?;
            let para = back_translate(&model, &load_bpe(&bpe)?, &load_predictions(&references)?, beam, top, max_len)?;
            write(&out, &para.serialize(true))?;
        }
        Cmd::Pipeline { config, print_config } => {
            let c = config.load()?;
            if print_config {
                print!("{}", c.to_text());
                return Ok(());
            }
            let out = pipeline::cmd_pipeline(&c)?;
            print_score(&out.score);
        }
        Cmd::Fixture {
            seed,
            prompts,
            max_refs,
            out,
            stats,
        } => {
            let corpus = synth_fixture(seed, prompts, max_refs);
            write(&out, &corpus.serialize())?;
            if stats {
                let s = corpus_stats(&corpus, |t| t.split_whitespace().count())?;
                println!("{s:?}");
            }
        }
    }
    Ok(())
}

fn stage_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Prepare { .. } => "prepare",
        Cmd::TrainBpe { .. } => "train-bpe",
        Cmd::Train { .. } => "train",
        Cmd::Decode { .. } => "decode",
        Cmd::Filter { .. } => "filter",
        Cmd::FilterModel { .. } => "filter-model",
        Cmd::Score { .. } => "score",
        Cmd::SweepThreshold { .. } => "sweep-threshold",
        Cmd::BackTranslate { .. } => "back-translate",
        Cmd::Pipeline { .. } => "pipeline",
        Cmd::Fixture { .. } => "fixture",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let stage = stage_name(&cli.cmd);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{stage}]: {e:#}");
            ExitCode::FAILURE
        }
    }
}
