use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multitrans::decoding::{
    beam_search, make_multi_output_target, nucleus_sample, nucleus_set, sample_nucleus, split_multi_output,
    DecodeConfig, StepModel,
};
use multitrans::corpus::WeightedTranslation;
use multitrans::model::{ModelConfig, TransformerModel};
use multitrans::Result;

/// Random prefix-dependent distributions over `vocab` tokens; token 0 ends.
#[derive(Clone, Copy)]
struct Toy {
    seed: u64,
    vocab: usize,
    sharp: f64,
}

impl Toy {
    fn dist(&self, prefix: &[u32]) -> Vec<f64> {
        let mut h = self.seed;
        for &t in prefix {
            h = h.wrapping_mul(0x1000_0000_01b3).wrapping_add(t as u64 + 1);
            h ^= h >> 31;
        }
        let mut r = ChaCha8Rng::seed_from_u64(h);
        let z: Vec<f64> = (0..self.vocab).map(|_| r.gen::<f64>() * self.sharp).collect();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect()
    }
}

impl StepModel for Toy {
    type State = Vec<u32>;

    fn start(&self, _src: &[u32]) -> Result<Vec<u32>> {
        Ok(Vec::new())
    }

    fn step(&self, st: &mut Vec<u32>, tok: u32) -> Result<Vec<f64>> {
        if tok != self.bos() {
            st.push(tok);
        }
        Ok(self.dist(st))
    }

    fn bos(&self) -> u32 {
        u32::MAX
    }

    fn eos(&self) -> u32 {
        0
    }

    fn emittable(&self, _t: u32) -> bool {
        true
    }
}

fn exhaustive(m: &Toy, max_len: usize) -> Vec<(Vec<u32>, f64)> {
    fn go(m: &Toy, prefix: &mut Vec<u32>, score: f64, max_len: usize, out: &mut Vec<(Vec<u32>, f64)>) {
        let lp = m.dist(prefix);
        let mut done = prefix.clone();
        done.push(0);
        out.push((done, score + lp[0]));
        if prefix.len() + 2 > max_len {
            return;
        }
        for t in 1..m.vocab as u32 {
            prefix.push(t);
            go(m, prefix, score + lp[t as usize], max_len, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(m, &mut Vec::new(), 0.0, max_len, &mut out);
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

proptest! {
    #[test]
    fn wide_beam_equals_exhaustive_search(seed in any::<u64>(), vocab in 2usize..5, max_len in 1usize..4, k in 1usize..8, sharp in 0.5f64..6.0) {
        let m = Toy { seed, vocab, sharp };
        let alive_bound = (vocab - 1).pow(max_len as u32) * vocab;
        let cfg = DecodeConfig { beam_size: alive_bound.max(k), top_k: k, max_len, ..DecodeConfig::default() };
        let got: Vec<(Vec<u32>, f64)> = beam_search(&m, &[], &cfg).unwrap().into_iter().map(|h| (h.token_ids, h.total_logprob)).collect();
        let want: Vec<(Vec<u32>, f64)> = exhaustive(&m, max_len).into_iter().take(k).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn hypotheses_total_their_token_scores(seed in any::<u64>(), beam in 1usize..6, alpha in prop::sample::select(vec![0.0, 0.6, 1.0])) {
        let m = Toy { seed, vocab: 5, sharp: 3.0 };
        let cfg = DecodeConfig { beam_size: beam, top_k: beam, max_len: 6, length_norm_alpha: alpha, ..DecodeConfig::default() };
        let hyps = beam_search(&m, &[], &cfg).unwrap();
        prop_assert!(!hyps.is_empty() && hyps.len() <= beam);
        for h in &hyps {
            let sum: f64 = h.token_logprobs.iter().sum();
            prop_assert!((h.total_logprob - sum).abs() < 1e-9);
            prop_assert_eq!(h.token_ids.len(), h.token_logprobs.len());
        }
        let mut ids: Vec<_> = hyps.iter().map(|h| h.token_ids.clone()).collect();
        ids.dedup();
        prop_assert_eq!(ids.len(), hyps.len());
    }

    #[test]
    fn samples_stay_inside_the_nucleus(probs in prop::collection::vec(0.0f64..1.0, 1..8), p in 0.05f64..1.0, seed in any::<u64>()) {
        prop_assume!(probs.iter().sum::<f64>() > 0.0);
        let set = nucleus_set(&probs, p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let t = sample_nucleus(&probs, p, &mut rng).unwrap();
            prop_assert!(set.contains(&t));
        }
        // The set is the shortest probability-sorted prefix reaching p.
        let total: f64 = probs.iter().sum();
        let mass: f64 = set.iter().map(|&i| probs[i]).sum();
        prop_assert!(mass >= p * total * (1.0 - 1e-12));
        let without_last: f64 = mass - probs[*set.last().unwrap()];
        prop_assert!(without_last < p * total);
    }

    #[test]
    fn sampled_sequences_follow_the_model(seed in any::<u64>()) {
        let m = Toy { seed, vocab: 4, sharp: 2.0 };
        let cfg = DecodeConfig { max_len: 5, nucleus_p: 0.9, n_samples: 12, ..DecodeConfig::default() };
        let hyps = nucleus_sample(&m, &[], &cfg, seed).unwrap();
        for h in &hyps {
            let mut prefix = Vec::new();
            for (&t, &lp) in h.token_ids.iter().zip(&h.token_logprobs) {
                let d = m.dist(&prefix);
                prop_assert_eq!(lp, d[t as usize]);
                let probs: Vec<f64> = d.iter().map(|l| l.exp()).collect();
                prop_assert!(nucleus_set(&probs, 0.9).contains(&(t as usize)));
                prefix.push(t);
            }
        }
        prop_assert_eq!(hyps.clone(), nucleus_sample(&m, &[], &cfg, seed).unwrap());
    }
}

#[test]
fn transformer_beam_search_respects_limits() {
    let m = TransformerModel::<f32>::new(
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 20,
            dropout: 0.0,
            max_positions: 8,
        },
        3,
    )
    .unwrap();
    let cfg = DecodeConfig {
        beam_size: 4,
        top_k: 3,
        max_len: 20,
        ..DecodeConfig::default()
    };
    let hyps = beam_search(&m, &[5, 6, 7, 2], &cfg).unwrap();
    assert!(!hyps.is_empty() && hyps.len() <= 3);
    for h in &hyps {
        assert!(h.token_ids.len() <= 8);
        assert!(!h.token_ids.contains(&0) && !h.token_ids.contains(&1));
    }
}

#[test]
fn multi_output_targets_join_the_heaviest() {
    let ts: Vec<WeightedTranslation> = [("c", 0.1), ("a", 0.5), ("b", 0.4)]
        .iter()
        .map(|&(t, w)| WeightedTranslation {
            target_text: t.into(),
            weight: w,
        })
        .collect();
    let joined = make_multi_output_target(&ts, 2, "<sep>").unwrap();
    assert_eq!(joined, "a <sep> b");
    assert_eq!(split_multi_output(&joined, "<sep>"), vec!["a", "b"]);
    assert_eq!(split_multi_output("a <sep> <sep> a <sep> b", "<sep>"), vec!["a", "b"]);
    assert!(make_multi_output_target(&[], 5, "<sep>").is_err());
}
