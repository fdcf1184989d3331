use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multitrans::corpus::{PromptRecord, WeightedTranslation};
use multitrans::filtering::{featurize, label_predictions, model_filter, threshold_filter, FeatureConfig, ThresholdConfig};
use multitrans::gbdt::{fit, kfold_cv, randomized_search, stratified_folds, GbdtModel, GbdtParams, ParamDistributions};
use multitrans::metrics::NormalizeConfig;
use multitrans::predictions::ScoredPrediction;

fn scored() -> impl Strategy<Value = Vec<ScoredPrediction>> {
    prop::collection::vec(
        ("[a-c]{1,3}", prop::collection::vec(-10.0f64..0.0, 0..14)).prop_map(|(t, s)| ScoredPrediction::scored(t, s)),
        0..20,
    )
}

fn is_subsequence<T: PartialEq>(sub: &[T], of: &[T]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

fn noisy_data(n: usize, f: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..f).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let ys = xs.iter().map(|x| x[0] + 0.3 * x[1] + r.gen_range(-0.4..0.4) > 0.0).collect();
    (xs, ys)
}

proptest! {
    #[test]
    fn raising_threshold_never_keeps_more(items in scored(), a in -12.0f64..1.0, b in -12.0f64..1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let k_lo = threshold_filter(&items, &ThresholdConfig { min_max_token_logprob: lo });
        let k_hi = threshold_filter(&items, &ThresholdConfig { min_max_token_logprob: hi });
        prop_assert!(k_hi.len() <= k_lo.len());
        prop_assert!(is_subsequence(&k_hi, &k_lo));
        prop_assert!(is_subsequence(&k_lo, &items));
    }

    #[test]
    fn minus_infinity_keeps_every_scored_item(items in scored()) {
        let kept = threshold_filter(&items, &ThresholdConfig { min_max_token_logprob: f64::NEG_INFINITY });
        let nonempty: Vec<_> = items.iter().filter(|p| p.token_logprobs.as_ref().is_some_and(|s| !s.is_empty())).cloned().collect();
        prop_assert_eq!(kept, nonempty);
    }

    #[test]
    fn feature_length_is_fixed(items in scored(), f in 1usize..20) {
        for it in &items {
            let v = featurize(it, f);
            prop_assert_eq!(v.values.len(), f);
            prop_assert_eq!(&v, &featurize(it, f));
        }
    }

    #[test]
    fn labels_match_set_membership(items in scored()) {
        let gold = PromptRecord {
            prompt_id: "p".into(),
            source_text: "s".into(),
            translations: ["a", "bc", "cab"].iter().map(|t| WeightedTranslation { target_text: t.to_string(), weight: 0.3 }).collect(),
        };
        let set: BTreeSet<&str> = ["a", "bc", "cab"].into_iter().collect();
        let labels = label_predictions(&items, &gold, &NormalizeConfig::default(), &FeatureConfig::default());
        for (it, (_, y)) in items.iter().zip(&labels) {
            prop_assert_eq!(*y, set.contains(it.text.as_str()));
        }
    }

    #[test]
    fn folds_partition_and_stratify(ys in prop::collection::vec(any::<bool>(), 5..80), k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(ys.len() >= k);
        let folds = stratified_folds(&ys, k, seed).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ys.len()).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let pos: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| ys[i]).count()).collect();
        prop_assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1);
        prop_assert_eq!(folds, stratified_folds(&ys, k, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn boosting_is_monotone_and_bounded(seed in any::<u64>(), depth in 1usize..5, col in prop::sample::select(vec![0.5, 0.8, 1.0])) {
        let (xs, ys) = noisy_data(150, 6, seed);
        let params = GbdtParams { n_estimators: 25, max_depth: depth, colsample_bytree: col, colsample_bylevel: col, ..GbdtParams::default() };
        let m = fit(&xs, &ys, &params, seed).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=m.trees.len() {
            let l = m.log_loss(&xs, &ys, k).unwrap();
            prop_assert!(l <= prev, "round {} loss {} after {}", k, l, prev);
            prev = l;
        }
        for t in &m.trees {
            prop_assert!(t.depth() <= depth);
        }
    }

    #[test]
    fn unused_columns_do_not_matter(seed in any::<u64>()) {
        let (xs, ys) = noisy_data(120, 5, seed);
        let m = fit(&xs, &ys, &GbdtParams { n_estimators: 10, max_depth: 2, ..GbdtParams::default() }, seed).unwrap();
        let used: BTreeSet<usize> = m.trees.iter().flat_map(|t| t.features()).collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for x in xs.iter().take(30) {
            let mut y = x.clone();
            for (j, v) in y.iter_mut().enumerate() {
                if !used.contains(&j) {
                    *v = r.gen_range(-100.0..100.0);
                }
            }
            prop_assert_eq!(m.predict_proba(x).unwrap(), m.predict_proba(&y).unwrap());
        }
    }

    #[test]
    fn persisted_model_predicts_identically(seed in any::<u64>()) {
        let (xs, ys) = noisy_data(100, 4, seed);
        let m = fit(&xs, &ys, &GbdtParams { n_estimators: 8, ..GbdtParams::default() }, seed).unwrap();
        let back = GbdtModel::from_text(&m.to_text()).unwrap();
        for x in &xs {
            prop_assert_eq!(m.predict_proba(x).unwrap(), back.predict_proba(x).unwrap());
        }
    }
}

#[test]
fn single_stump_separates_a_line() {
    let xs: Vec<Vec<f64>> = (-20..20).map(|i| vec![i as f64 + 0.5]).collect();
    let ys: Vec<bool> = xs.iter().map(|x| x[0] > 0.0).collect();
    let m = fit(
        &xs,
        &ys,
        &GbdtParams {
            n_estimators: 1,
            max_depth: 1,
            ..GbdtParams::default()
        },
        0,
    )
    .unwrap();
    let acc = xs.iter().zip(&ys).filter(|(x, &y)| (m.predict_proba(x).unwrap() >= 0.5) == y).count();
    assert_eq!(acc, xs.len());
}

#[test]
fn zero_estimators_predict_the_prior() {
    let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
    let ys: Vec<bool> = (0..10).map(|i| i < 3).collect();
    let m = fit(
        &xs,
        &ys,
        &GbdtParams {
            n_estimators: 0,
            ..GbdtParams::default()
        },
        0,
    )
    .unwrap();
    for x in &xs {
        assert!((m.predict_proba(x).unwrap() - 0.3).abs() < 1e-12);
    }
}

#[test]
fn single_class_is_degenerate() {
    let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
    let m = fit(&xs, &[true; 10], &GbdtParams::default(), 0).unwrap();
    assert!(m.degenerate);
    assert!(m.trees.is_empty());
}

#[test]
fn null_labels_sit_near_chance() {
    let mut accs = Vec::new();
    for seed in 0..6 {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
        let xs: Vec<Vec<f64>> = (0..200).map(|_| vec![r.gen(), r.gen()]).collect();
        let ys: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        let mut shuffled = ys.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, r.gen_range(0..=i));
        }
        accs.push(kfold_cv(&xs, &shuffled, &GbdtParams::default(), 5, seed).unwrap().mean_accuracy());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.15, "{accs:?}");
}

#[test]
fn search_prefers_the_working_setting() {
    let (xs, ys) = noisy_data(200, 4, 5);
    let dist = ParamDistributions {
        max_depth: vec![3],
        colsample_bytree: vec![1.0],
        colsample_bylevel: vec![1.0],
        n_estimators: vec![0, 50],
        base: GbdtParams::default(),
    };
    let (p, _) = randomized_search(&xs, &ys, &dist, 8, 5, 3).unwrap();
    assert_eq!(p.n_estimators, 50);
    let (p1, cv1) = randomized_search(&xs, &ys, &ParamDistributions::default(), 1, 5, 9).unwrap();
    let (p2, cv2) = randomized_search(&xs, &ys, &ParamDistributions::default(), 1, 5, 9).unwrap();
    assert_eq!((p1, cv1), (p2, cv2));
}

#[test]
fn model_filter_recovers_separable_accepts() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let make = |r: &mut ChaCha8Rng, good: bool| {
        let n = r.gen_range(2..12);
        let base = if good { -0.5 } else { -5.0 };
        ScoredPrediction::scored("x", (0..n).map(|_| base + r.gen_range(-0.4..0.4)).collect())
    };
    let train: Vec<(ScoredPrediction, bool)> = (0..300).map(|i| (make(&mut r, i % 3 != 0), i % 3 != 0)).collect();
    let fc = FeatureConfig::default();
    let xs: Vec<Vec<f64>> = train.iter().map(|(p, _)| featurize(p, fc.len).values).collect();
    let ys: Vec<bool> = train.iter().map(|(_, y)| *y).collect();
    let m = fit(&xs, &ys, &GbdtParams::default(), 1).unwrap();
    let accepts: Vec<ScoredPrediction> = (0..200).map(|_| make(&mut r, true)).collect();
    let kept = model_filter(&accepts, &m, &fc, 0.5).unwrap();
    assert!(kept.len() as f64 >= 0.95 * accepts.len() as f64);
}
