use proptest::prelude::*;

use multitrans::corpus::{oversample, split_by_prompt, synth_fixture, ParallelCorpus, SampledPair};
use multitrans::decoding::DecodeConfig;
use multitrans::model::{Checkpoint, ModelConfig, TransformerModel};
use multitrans::pipeline::train_tokenizer;
use multitrans::subword::BpeModel;
use multitrans::training::{
    clip_gradients, global_norm, lr_schedule, train_loop, EarlyStopping, LrSchedule, StopDecision, TrainConfig,
    TrainReport, Trainer,
};

proptest! {
    #[test]
    fn decay_schedule_is_non_increasing(d in 1u64..50_000, a in 1u64..200_000, b in 1u64..200_000) {
        let c = TrainConfig { decay_steps: d, ..TrainConfig::default() };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_schedule(hi, &c) <= lr_schedule(lo, &c));
        prop_assert!(lr_schedule(lo, &c) <= c.lr);
    }

    #[test]
    fn decay_schedule_is_continuous_at_boundary(d in 10u64..50_000) {
        let c = TrainConfig { decay_steps: d, ..TrainConfig::default() };
        prop_assert_eq!(lr_schedule(d, &c), c.lr);
        let jump = lr_schedule(d, &c) - lr_schedule(d + 1, &c);
        prop_assert!(jump >= 0.0 && jump <= c.lr / d as f64);
    }

    #[test]
    fn warmup_rises_then_falls(d in 2u64..5_000, s in 1u64..20_000) {
        let c = TrainConfig { decay_steps: d, schedule: LrSchedule::Warmup, ..TrainConfig::default() };
        if s < d {
            prop_assert!(lr_schedule(s, &c) <= lr_schedule(s + 1, &c));
        } else {
            prop_assert!(lr_schedule(s + 1, &c) <= lr_schedule(s, &c));
        }
        prop_assert!(lr_schedule(s, &c) <= c.lr * (1.0 + 1e-12));
    }

    #[test]
    fn clipping_never_grows_the_norm(g in prop::collection::vec(-100.0f64..100.0, 1..64), clip in 0.01f64..50.0) {
        let mut v = g.clone();
        let before = clip_gradients(&mut v, clip);
        prop_assert!((before - global_norm(&g)).abs() <= 1e-9 * before.max(1.0));
        let after = global_norm(&v);
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= clip + 1e-9);
        if before <= clip {
            prop_assert_eq!(&v, &g);
        } else {
            let k = v[0] / g[0];
            for (x, y) in v.iter().zip(&g) {
                prop_assert!((x - k * y).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn early_stopping_tracks_the_best(values in prop::collection::vec(0.0f64..10.0, 1..30), patience in 1usize..5, higher in any::<bool>()) {
        let mut es = EarlyStopping::new(patience, higher);
        let mut stopped_at = None;
        for (i, &v) in values.iter().enumerate() {
            if es.update(v) == StopDecision::Stop {
                stopped_at = Some(i);
                break;
            }
        }
        let seen = &values[..stopped_at.map_or(values.len(), |i| i + 1)];
        let best = seen.iter().copied().fold(if higher { f64::MIN } else { f64::MAX }, |b, v| if higher { b.max(v) } else { b.min(v) });
        prop_assert_eq!(es.best, Some(best));
        let first_best = seen.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(es.best_eval, first_best + 1);
        if let Some(i) = stopped_at {
            prop_assert_eq!(i + 1 - es.best_eval, patience);
        }
    }
}

struct Setup {
    tok: BpeModel,
    pairs: Vec<SampledPair>,
    validation: ParallelCorpus,
    model: TransformerModel<f32>,
}

fn setup() -> Setup {
    let corpus = synth_fixture(3, 16, 2);
    let (train, validation) = split_by_prompt(&corpus, 0.25, 1).unwrap();
    let tok = train_tokenizer(&train, 200, 0).unwrap();
    let pairs = oversample(&train, 5.0).unwrap();
    let model = TransformerModel::new(
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: tok.vocab_size(),
            dropout: 0.1,
            max_positions: 32,
        },
        4,
    )
    .unwrap();
    Setup {
        tok,
        pairs,
        validation,
        model,
    }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr: 1e-3,
        max_steps: 24,
        eval_every: 5,
        patience: 100,
        ..TrainConfig::default()
    }
}

fn decode() -> DecodeConfig {
    DecodeConfig {
        max_len: 16,
        ..DecodeConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let s = setup();
    let (r1, m1) = train_loop(s.model.clone(), &s.pairs, &s.validation, &s.tok, &small_cfg(), &decode()).unwrap();
    let (r2, m2) = train_loop(s.model.clone(), &s.pairs, &s.validation, &s.tok, &small_cfg(), &decode()).unwrap();
    assert_eq!(m1.params(), m2.params());
    assert_eq!(r1, r2);
    assert_eq!(r1.steps, 24);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = setup();
    let mut full = Trainer::new(s.model.clone(), &s.pairs, &s.validation, &s.tok, small_cfg(), decode()).unwrap();
    full.run().unwrap();
    let (full_report, full_model) = full.finish();

    let mut part = Trainer::new(s.model.clone(), &s.pairs, &s.validation, &s.tok, small_cfg(), decode()).unwrap();
    part.run_steps(13).unwrap();
    let mut bytes = Vec::new();
    part.checkpoint().write_to(&mut bytes).unwrap();
    let best = part.best_model().cloned();
    drop(part);

    let ck = Checkpoint::<f32>::read_from(bytes.as_slice()).unwrap();
    let mut resumed = Trainer::resume(ck, best, &s.pairs, &s.validation, &s.tok, small_cfg(), decode()).unwrap();
    resumed.run().unwrap();
    let (report, model) = resumed.finish();
    assert_eq!(model.params(), full_model.params());
    // The log holds only lines produced since the last (re)start.
    assert_eq!(report.log[..], full_report.log[13..]);
    assert_eq!(
        TrainReport {
            log: Vec::new(),
            ..report
        },
        TrainReport {
            log: Vec::new(),
            ..full_report
        }
    );
}

#[test]
fn best_checkpoint_is_returned() {
    let s = setup();
    let cfg = TrainConfig {
        lr: 5e-2,
        max_steps: 40,
        eval_every: 4,
        ..small_cfg()
    };
    let (report, model) = train_loop(s.model.clone(), &s.pairs, &s.validation, &s.tok, &cfg, &decode()).unwrap();
    let best = report.metric_history.iter().copied().fold(f64::MAX, f64::min);
    let idx = report.metric_history.iter().position(|&v| v == best).unwrap();
    assert_eq!(report.best_eval, Some(idx + 1));
    let check = Trainer::new(model, &s.pairs, &s.validation, &s.tok, cfg, decode()).unwrap();
    assert_eq!(check.evaluate().unwrap(), best);
}

#[test]
fn loss_goes_down() {
    let s = setup();
    let cfg = TrainConfig {
        max_steps: 60,
        eval_every: 0,
        ..small_cfg()
    };
    let (report, _) = train_loop(s.model, &s.pairs, &s.validation, &s.tok, &cfg, &decode()).unwrap();
    let first = report.epoch_losses[0];
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(report.log.iter().all(|l| l.split('\t').count() == 4));
}
