//! Deterministic toy corpus with a learnable source-to-target mapping.
//!
//! Sources follow `subject verb a [adjective] object [adverb]`. Targets are a
//! word-for-word substitution into a made-up language, plus rule-based
//! paraphrases (subject drop, synonyms, adverb fronting, verb-final order).

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Direction, ParallelCorpus, PromptRecord, WeightedTranslation};

type Entry = (&'static str, &'static [&'static str]);

const SUBJECTS: &[Entry] = &[
    ("i", &["en"]),
    ("you", &["te"]),
    ("we", &["mi"]),
    ("they", &["ok"]),
    ("she", &["o"]),
];
const VERBS: &[Entry] = &[
    ("see", &["lat", "nez"]),
    ("eat", &["esz"]),
    ("like", &["szeret", "kedvel"]),
    ("want", &["akar", "kivan"]),
    ("have", &["bir"]),
    ("read", &["olvas"]),
];
const ADJECTIVES: &[Entry] = &[
    ("red", &["piros"]),
    ("big", &["nagy", "hatalmas"]),
    ("small", &["kicsi", "kis"]),
    ("old", &["regi"]),
    ("new", &["uj"]),
];
const OBJECTS: &[Entry] = &[
    ("apple", &["alma"]),
    ("book", &["konyv"]),
    ("cat", &["macska"]),
    ("dog", &["kutya"]),
    ("bread", &["kenyer"]),
    ("water", &["viz"]),
    ("house", &["haz", "otthon"]),
    ("car", &["auto", "kocsi"]),
];
const ADVERBS: &[Entry] = &[
    ("today", &["ma"]),
    ("now", &["most"]),
    ("here", &["itt"]),
    ("often", &["gyakran"]),
];

struct Sentence {
    subj: &'static Entry,
    verb: &'static Entry,
    adj: Option<&'static Entry>,
    obj: &'static Entry,
    adv: Option<&'static Entry>,
}

impl Sentence {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let pick = |rng: &mut ChaCha8Rng, xs: &'static [Entry]| &xs[rng.gen_range(0..xs.len())];
        let subj = pick(rng, SUBJECTS);
        let verb = pick(rng, VERBS);
        let adj = rng.gen_bool(0.5).then(|| pick(rng, ADJECTIVES));
        let obj = pick(rng, OBJECTS);
        let adv = rng.gen_bool(0.5).then(|| pick(rng, ADVERBS));
        Sentence { subj, verb, adj, obj, adv }
    }

    fn source(&self) -> String {
        let mut w = vec![self.subj.0, self.verb.0, "a"];
        w.extend(self.adj.map(|a| a.0));
        w.push(self.obj.0);
        w.extend(self.adv.map(|a| a.0));
        w.join(" ")
    }

    /// Canonical translation first, then paraphrase variants, deduplicated.
    fn targets(&self) -> Vec<String> {
        let t = |e: &Entry, alt: bool| if alt && e.1.len() > 1 { e.1[1] } else { e.1[0] };
        let adj = |alt: bool| self.adj.map(|a| t(a, alt));
        let adv = self.adv.map(|a| t(a, false));
        let (s, v, o) = (t(self.subj, false), t(self.verb, false), t(self.obj, false));

        let mut out: Vec<Vec<&str>> = Vec::new();
        let np = |alt: bool| -> Vec<&str> {
            let mut x: Vec<&str> = adj(alt).into_iter().collect();
            x.push(t(self.obj, alt));
            x
        };
        let mut canon = vec![s, v];
        canon.extend(np(false));
        canon.extend(adv);
        out.push(canon);

        let mut drop = vec![v];
        drop.extend(np(false));
        drop.extend(adv);
        out.push(drop);

        let mut syn = vec![s, t(self.verb, true)];
        syn.extend(np(false));
        syn.extend(adv);
        out.push(syn);

        let mut syn_np = vec![s, v];
        syn_np.extend(np(true));
        syn_np.extend(adv);
        out.push(syn_np);

        if let Some(a) = adv {
            let mut front = vec![a, s, v];
            front.extend(np(false));
            out.push(front);
        }

        let mut sov = vec![s];
        sov.extend(adj(false));
        sov.extend([o, v]);
        sov.extend(adv);
        out.push(sov);

        let mut seen = HashSet::new();
        out.into_iter()
            .map(|w| w.join(" "))
            .filter(|s| seen.insert(s.clone()))
            .collect()
    }
}

/// Generates `n_prompts` prompts with `1..=max_refs` translations each.
/// Per-prompt weights are normalized exponential draws (a flat Dirichlet),
/// sorted so the canonical translation carries the largest weight.
pub fn synth_fixture(seed: u64, n_prompts: usize, max_refs: usize) -> ParallelCorpus {
    let max_refs = max_refs.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(n_prompts);
    let width = n_prompts.max(1).to_string().len();
    let mut attempts = 0usize;

    while records.len() < n_prompts {
        let sentence = Sentence::sample(&mut rng);
        let source = sentence.source();
        attempts += 1;
        if !seen.insert(source.clone()) && attempts < 100 * n_prompts {
            continue;
        }
        let targets = sentence.targets();
        let n_refs = rng.gen_range(1..=max_refs).min(targets.len());

        let mut weights: Vec<f64> = (0..n_refs)
            .map(|_| -(1.0 - rng.gen::<f64>()).ln())
            .collect();
        weights.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);

        records.push(PromptRecord {
            prompt_id: format!("prompt_{:0width$}", records.len()),
            source_text: source,
            translations: targets
                .into_iter()
                .zip(weights)
                .map(|(target_text, weight)| WeightedTranslation { target_text, weight })
                .collect(),
        });
    }

    ParallelCorpus {
        records,
        direction: Direction {
            source: "en".into(),
            target: "xx".into(),
        },
    }
}
