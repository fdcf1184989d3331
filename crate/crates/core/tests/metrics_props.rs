use std::collections::BTreeSet;

use proptest::prelude::*;

use multitrans::corpus::{PromptRecord, WeightedTranslation};
use multitrans::metrics::{corpus_score, normalize_text, prompt_score, NormalizeConfig};

const POOL: [&str; 8] = ["a", "b", "c d", "e", "f g", "h", "i", "j k l"];

prop_compose! {
    fn gold()(picks in prop::collection::btree_set(0usize..POOL.len(), 1..6),
               weights in prop::collection::vec(0.0f64..1.0, 6)) -> PromptRecord {
        PromptRecord {
            prompt_id: "p".into(),
            source_text: "s".into(),
            translations: picks
                .into_iter()
                .zip(weights)
                .map(|(i, weight)| WeightedTranslation { target_text: POOL[i].into(), weight })
                .collect(),
        }
    }
}

fn preds() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop_oneof![
            (0usize..POOL.len()).prop_map(|i| POOL[i].to_string()),
            "[x-z]{1,3}",
            (0usize..POOL.len()).prop_map(|i| format!("  {}  ", POOL[i].replace(' ', "  "))),
        ],
        0..7,
    )
}

fn norm() -> NormalizeConfig {
    NormalizeConfig::default()
}

proptest! {
    #[test]
    fn values_are_in_unit_interval(g in gold(), p in preds()) {
        let s = prompt_score(&p, &g, &norm());
        for v in [s.precision, s.recall, s.weighted_recall, s.f1, s.weighted_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for v in corpus_score(&[s]).unwrap().fields() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn perfect_iff_sets_equal(g in gold(), p in preds()) {
        prop_assume!(g.translations.iter().all(|t| t.weight > 0.0));
        let s = prompt_score(&p, &g, &norm());
        let ps: BTreeSet<String> = p.iter().map(|x| normalize_text(x, &norm())).filter(|x| !x.is_empty()).collect();
        let gs: BTreeSet<String> = g.translations.iter().map(|t| t.target_text.clone()).collect();
        prop_assert_eq!(s.weighted_f1 == 1.0, ps == gs);
    }

    #[test]
    fn zero_iff_no_match(g in gold(), p in preds()) {
        prop_assume!(g.translations.iter().all(|t| t.weight > 0.0));
        let s = prompt_score(&p, &g, &norm());
        let gs: BTreeSet<String> = g.translations.iter().map(|t| t.target_text.clone()).collect();
        let any = p.iter().any(|x| gs.contains(&normalize_text(x, &norm())));
        prop_assert_eq!(s.weighted_f1 == 0.0, !any);
    }

    #[test]
    fn correct_addition_keeps_recall(g in gold(), p in preds(), k in 0usize..6) {
        let before = prompt_score(&p, &g, &norm());
        let mut more = p.clone();
        more.push(g.translations[k % g.translations.len()].target_text.clone());
        let after = prompt_score(&more, &g, &norm());
        prop_assert!(after.weighted_recall >= before.weighted_recall);
    }

    #[test]
    fn wrong_addition_keeps_precision_down(g in gold(), p in preds(), w in "[x-z]{4}") {
        let before = prompt_score(&p, &g, &norm());
        let mut more = p.clone();
        more.push(w);
        let after = prompt_score(&more, &g, &norm());
        prop_assert!(after.precision <= before.precision);
    }

    #[test]
    fn weight_scale_leaves_scores(g in gold(), p in preds(), c in prop::sample::select(vec![0.1, 3.0, 1000.0, 0.5, 4.0])) {
        let mut scaled = g.clone();
        for t in &mut scaled.translations {
            t.weight *= c;
        }
        let a = corpus_score(&[prompt_score(&p, &g, &norm())]).unwrap();
        let b = corpus_score(&[prompt_score(&p, &scaled, &norm())]).unwrap();
        prop_assert_eq!(a.report_line(), b.report_line());
        for (x, y) in a.fields().iter().zip(b.fields()) {
            prop_assert!((x - y).abs() <= 1e-15);
        }
        // Powers of two scale every weight exactly.
        if c == 0.5 || c == 4.0 {
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn empty_corpus_is_an_error() {
    assert!(corpus_score(&[]).is_err());
}

#[test]
fn lowercase_switch() {
    let g = PromptRecord {
        prompt_id: "p".into(),
        source_text: "s".into(),
        translations: vec![WeightedTranslation {
            target_text: "Hello There".into(),
            weight: 1.0,
        }],
    };
    assert_eq!(prompt_score(&["hello there"], &g, &norm()).tp_count, 0);
    assert_eq!(prompt_score(&["hello  there"], &g, &NormalizeConfig { lowercase: true }).tp_count, 1);
}
