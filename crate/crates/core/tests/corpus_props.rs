use std::collections::BTreeSet;

use proptest::prelude::*;

use multitrans::corpus::{
    copies, oversample, oversample_count, parse_corpus, split_by_prompt, ParallelCorpus, PromptRecord,
    WeightedTranslation,
};

fn word() -> impl Strategy<Value = String> {
    "[a-zé]{1,6}"
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..5).prop_map(|w| w.join(" "))
}

prop_compose! {
    fn record(id: usize)(
        src in sentence(),
        targets in prop::collection::btree_set(sentence(), 1..5),
        weights in prop::collection::vec(0.0f64..=1.0, 5),
    ) -> PromptRecord {
        PromptRecord {
            prompt_id: format!("prompt_{id}"),
            source_text: src,
            translations: targets
                .into_iter()
                .zip(weights)
                .map(|(target_text, weight)| WeightedTranslation { target_text, weight })
                .collect(),
        }
    }
}

fn corpus() -> impl Strategy<Value = ParallelCorpus> {
    (2usize..12)
        .prop_flat_map(|n| (0..n).map(record).collect::<Vec<_>>())
        .prop_map(|records| ParallelCorpus {
            records,
            direction: Default::default(),
        })
}

proptest! {
    #[test]
    fn oversample_size_is_sum_of_floors(c in corpus(), factor in 1.0f64..100.0) {
        let out = oversample(&c, factor).unwrap();
        let want: usize = c.records.iter().flat_map(|r| &r.translations).map(|t| copies(t.weight, factor)).sum();
        prop_assert_eq!(out.len(), want);
        prop_assert_eq!(oversample_count(&c, factor), want as u64);
    }

    #[test]
    fn light_pairs_never_survive(c in corpus(), factor in 1.0f64..100.0) {
        let out = oversample(&c, factor).unwrap();
        for r in &c.records {
            for t in &r.translations {
                if t.weight < 1.0 / factor {
                    prop_assert!(!out.iter().any(|p| p.prompt_id == r.prompt_id && p.target_text == t.target_text));
                }
            }
        }
    }

    #[test]
    fn split_partitions_prompts(c in corpus(), fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, val) = split_by_prompt(&c, fraction, seed).unwrap();
        let all: BTreeSet<&str> = c.records.iter().map(|r| r.prompt_id.as_str()).collect();
        let tr: BTreeSet<&str> = train.records.iter().map(|r| r.prompt_id.as_str()).collect();
        let va: BTreeSet<&str> = val.records.iter().map(|r| r.prompt_id.as_str()).collect();
        prop_assert!(tr.is_disjoint(&va));
        prop_assert_eq!(tr.union(&va).copied().collect::<BTreeSet<_>>(), all);
        prop_assert_eq!(val.len(), (fraction * c.len() as f64).round() as usize);
        let again = split_by_prompt(&c, fraction, seed).unwrap();
        prop_assert_eq!((train, val), again);
    }

    #[test]
    fn serialize_parse_round_trip(c in corpus()) {
        let text = c.serialize();
        let back = parse_corpus(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.serialize(), text);
    }
}

#[test]
fn copies_at_boundaries() {
    assert_eq!(copies(0.02, 50.0), 1);
    assert_eq!(copies(0.019_999_999, 50.0), 0);
    assert_eq!(copies(1.0, 50.0), 50);
    assert_eq!(copies(0.0, 50.0), 0);
    for k in 0..=50 {
        let w = k as f64 / 50.0;
        let below = f64::from_bits(w.to_bits().saturating_sub(1));
        assert!(copies(w, 50.0) >= copies(below, 50.0));
    }
}
