//! Weighted parallel corpora: file format, oversampling, prompt-level
//! splitting, direction reversal and length statistics.
//!
//! The on-disk format is a sequence of blocks separated by one blank line:
//!
//! ```text
//! p1|i am here
//! itt vagyok|0.6
//! én itt vagyok|0.4
//!
//! ```
//!
//! The first line of a block is `prompt_id|source_text`, every following
//! line is `target_text|weight`. An optional `#direction <src> <tgt>` line may
//! precede the first block.

mod fixture;

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{normalize_text, NormalizeConfig};

pub use fixture::synth_fixture;

/// Default multiplier applied to learner-response weights when oversampling.
pub const DEFAULT_OVERSAMPLE_FACTOR: f64 = 50.0;
/// Default fraction of prompts held out for validation.
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTranslation {
    pub target_text: String,
    /// Learner response frequency in `[0, 1]`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub source_text: String,
    pub translations: Vec<WeightedTranslation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Direction {
    pub source: String,
    pub target: String,
}

impl Default for Direction {
    fn default() -> Self {
        Direction {
            source: "src".into(),
            target: "tgt".into(),
        }
    }
}

impl Direction {
    pub fn reversed(&self) -> Direction {
        Direction {
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelCorpus {
    pub records: Vec<PromptRecord>,
    pub direction: Direction,
}

/// One training instance produced by [`oversample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledPair {
    pub prompt_id: String,
    pub source_text: String,
    pub target_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusStats {
    pub prompt_count: usize,
    pub pair_count: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub p99_source_len: usize,
    pub p99_target_len: usize,
}

impl ParallelCorpus {
    pub fn pair_count(&self) -> usize {
        self.records.iter().map(|r| r.translations.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, prompt_id: &str) -> Option<&PromptRecord> {
        self.records.iter().find(|r| r.prompt_id == prompt_id)
    }

    /// Every pair once, in corpus order, ignoring weights.
    pub fn all_pairs(&self) -> Vec<SampledPair> {
        self.records
            .iter()
            .flat_map(|r| {
                r.translations.iter().map(move |t| SampledPair {
                    prompt_id: r.prompt_id.clone(),
                    source_text: r.source_text.clone(),
                    target_text: t.target_text.clone(),
                })
            })
            .collect()
    }

    /// Canonical text form; `parse_corpus(&c.serialize())` reproduces `c`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        if self.direction != Direction::default() {
            let _ = writeln!(out, "#direction {} {}", self.direction.source, self.direction.target);
        }
        for r in &self.records {
            let _ = writeln!(out, "{}|{}", r.prompt_id, r.source_text);
            for t in &r.translations {
                let _ = writeln!(out, "{}|{}", t.target_text, t.weight);
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn split_field(line: &str, lineno: usize) -> Result<(&str, &str)> {
    let mut parts = line.splitn(3, '|');
    let a = parts.next().unwrap_or_default();
    let b = parts
        .next()
        .ok_or_else(|| Error::parse(lineno, format!("missing `|` separator in {line:?}")))?;
    if parts.next().is_some() {
        return Err(Error::parse(lineno, "`|` is reserved and may appear only once"));
    }
    Ok((a, b))
}

fn parse_direction(line: &str, lineno: usize) -> Result<Direction> {
    let mut it = line["#direction".len()..].split_whitespace();
    match (it.next(), it.next(), it.next()) {
        (Some(s), Some(t), None) => Ok(Direction {
            source: s.into(),
            target: t.into(),
        }),
        _ => Err(Error::parse(lineno, "expected `#direction <source> <target>`")),
    }
}

/// Groups non-blank lines into blocks, returning `(first_line_number, lines)`.
pub(crate) fn blocks(text: &str) -> Vec<(usize, Vec<(usize, &str)>)> {
    let mut out = Vec::new();
    let mut cur: Vec<(usize, &str)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push((cur[0].0, std::mem::take(&mut cur)));
            }
        } else {
            cur.push((i + 1, line));
        }
    }
    if !cur.is_empty() {
        out.push((cur[0].0, cur));
    }
    out
}

pub fn parse_corpus(text: &str) -> Result<ParallelCorpus> {
    let norm = NormalizeConfig::default();
    let mut corpus = ParallelCorpus::default();
    let mut ids = HashSet::new();

    for (bi, (_, lines)) in blocks(text).into_iter().enumerate() {
        let mut lines = lines.as_slice();
        if bi == 0 && lines[0].1.starts_with("#direction") {
            corpus.direction = parse_direction(lines[0].1, lines[0].0)?;
            lines = &lines[1..];
            if lines.is_empty() {
                continue;
            }
        }
        let (hline, header) = lines[0];
        let (id, src) = split_field(header, hline)?;
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::parse(hline, "empty prompt id"));
        }
        if !ids.insert(id.to_string()) {
            return Err(Error::DuplicatePrompt(id.to_string()));
        }
        if lines.len() < 2 {
            return Err(Error::parse(hline, format!("prompt `{id}` has no translations")));
        }
        let mut seen = HashSet::new();
        let mut translations = Vec::with_capacity(lines.len() - 1);
        for &(ln, line) in &lines[1..] {
            let (text, weight) = split_field(line, ln)?;
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|_| Error::parse(ln, format!("invalid weight {weight:?}")))?;
            if !(0.0..=1.0).contains(&weight) {
                return Err(Error::parse(ln, format!("weight {weight} outside [0, 1]")));
            }
            let target_text = normalize_text(text, &norm);
            if target_text.is_empty() {
                return Err(Error::parse(ln, "empty target text"));
            }
            if !seen.insert(target_text.clone()) {
                return Err(Error::parse(ln, format!("duplicate translation {target_text:?}")));
            }
            translations.push(WeightedTranslation { target_text, weight });
        }
        corpus.records.push(PromptRecord {
            prompt_id: id.to_string(),
            source_text: normalize_text(src, &norm),
            translations,
        });
    }
    Ok(corpus)
}

/// Number of copies [`oversample`] emits for a pair of the given weight.
/// The floor is of the exact product, so `weight` just below `k / factor`
/// never rounds up to `k` copies.
pub fn copies(weight: f64, factor: f64) -> usize {
    let k = (weight * factor).floor();
    let k = if weight.mul_add(factor, -k) < 0.0 { k - 1.0 } else { k };
    k.max(0.0) as usize
}

/// Total output size of [`oversample`] without materializing it.
pub fn oversample_count(corpus: &ParallelCorpus, factor: f64) -> u64 {
    corpus
        .records
        .iter()
        .flat_map(|r| &r.translations)
        .map(|t| copies(t.weight, factor) as u64)
        .sum()
}

/// Duplicates every pair `floor(weight * factor)` times, keeping corpus order
/// with duplicates adjacent. Pairs with `weight < 1 / factor` vanish.
pub fn oversample(corpus: &ParallelCorpus, factor: f64) -> Result<Vec<SampledPair>> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("oversampling factor must be > 0, got {factor}")));
    }
    let mut out = Vec::with_capacity(oversample_count(corpus, factor) as usize);
    for r in &corpus.records {
        for t in &r.translations {
            for _ in 0..copies(t.weight, factor) {
                out.push(SampledPair {
                    prompt_id: r.prompt_id.clone(),
                    source_text: r.source_text.clone(),
                    target_text: t.target_text.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Splits at prompt granularity into `(train, validation)`. The validation
/// side receives `round(fraction * n)` prompts; both sides keep corpus order.
pub fn split_by_prompt(
    corpus: &ParallelCorpus,
    validation_fraction: f64,
    seed: u64,
) -> Result<(ParallelCorpus, ParallelCorpus)> {
    if corpus.records.len() < 2 {
        return Err(Error::invalid("split_by_prompt needs at least 2 prompts"));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "validation fraction must be in (0, 1), got {validation_fraction}"
        )));
    }
    let n = corpus.records.len();
    let n_val = (validation_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let mut train = ParallelCorpus {
        records: Vec::with_capacity(n - n_val),
        direction: corpus.direction.clone(),
    };
    let mut val = ParallelCorpus {
        records: Vec::with_capacity(n_val),
        direction: corpus.direction.clone(),
    };
    for (r, v) in corpus.records.iter().zip(is_val) {
        if v {
            val.records.push(r.clone());
        } else {
            train.records.push(r.clone());
        }
    }
    Ok((train, val))
}

/// Swaps source and target of every pair. Each reversed pair becomes its own
/// prompt `<orig_id>#rev<k>` where `k` indexes the translation in the
/// original prompt.
pub fn reverse_pairs(corpus: &ParallelCorpus) -> ParallelCorpus {
    let mut records = Vec::with_capacity(corpus.pair_count());
    for r in &corpus.records {
        for (k, t) in r.translations.iter().enumerate() {
            records.push(PromptRecord {
                prompt_id: format!("{}#rev{k}", r.prompt_id),
                source_text: t.target_text.clone(),
                translations: vec![WeightedTranslation {
                    target_text: r.source_text.clone(),
                    weight: t.weight,
                }],
            });
        }
    }
    ParallelCorpus {
        records,
        direction: corpus.direction.reversed(),
    }
}

/// Smallest `L` such that at least 99% of `lengths` are `<= L`.
pub fn percentile_99(lengths: &[usize]) -> usize {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    // smallest count c with 100 * c >= 99 * n
    let c = (99 * n).div_ceil(100).max(1);
    sorted[c - 1]
}

pub fn corpus_stats<F>(corpus: &ParallelCorpus, token_count: F) -> Result<CorpusStats>
where
    F: Fn(&str) -> usize,
{
    if corpus.is_empty() {
        return Err(Error::Empty("corpus_stats on an empty corpus"));
    }
    let src: Vec<usize> = corpus.records.iter().map(|r| token_count(&r.source_text)).collect();
    let tgt: Vec<usize> = corpus
        .records
        .iter()
        .flat_map(|r| &r.translations)
        .map(|t| token_count(&t.target_text))
        .collect();
    Ok(CorpusStats {
        prompt_count: corpus.len(),
        pair_count: tgt.len(),
        max_source_len: src.iter().copied().max().unwrap_or(0),
        max_target_len: tgt.iter().copied().max().unwrap_or(0),
        p99_source_len: percentile_99(&src),
        p99_target_len: percentile_99(&tgt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(weight: f64) -> ParallelCorpus {
        ParallelCorpus {
            records: vec![PromptRecord {
                prompt_id: "p".into(),
                source_text: "s".into(),
                translations: vec![WeightedTranslation {
                    target_text: "t".into(),
                    weight,
                }],
            }],
            direction: Direction::default(),
        }
    }

    #[test]
    fn parse_block() {
        let c = parse_corpus("p1|i am here\nitt vagyok|0.6\nén itt vagyok|0.4\n\n").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.pair_count(), 2);
        let r = &c.records[0];
        assert_eq!(r.source_text, "i am here");
        assert_eq!(r.translations[0].weight, 0.6);
        assert_eq!(r.translations[1].target_text, "én itt vagyok");
        assert_eq!(r.translations[1].weight, 0.4);
    }

    #[test]
    fn parse_empty() {
        assert!(parse_corpus("").unwrap().is_empty());
        assert!(parse_corpus("\n\n").unwrap().is_empty());
    }

    #[test]
    fn parse_errors() {
        match parse_corpus("p1|x\nno separator here\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_corpus("p1|x\na|0.5\n\np1|y\nb|0.5\n"),
            Err(Error::DuplicatePrompt(_))
        ));
        assert!(parse_corpus("p1|x\na|1.5\n").is_err());
        assert!(parse_corpus("p1|x\na|-0.1\n").is_err());
        assert!(parse_corpus("p1|x\na|abc\n").is_err());
        assert!(parse_corpus("p1|x\na|b|0.5\n").is_err());
        assert!(parse_corpus("p1|x\n").is_err());
        assert!(parse_corpus("p1|x\na|0.5\n a |0.2\n").is_err());
    }

    #[test]
    fn direction_header_round_trips() {
        let text = "#direction en hu\np1|i am here\nitt vagyok|0.6\n\n";
        let c = parse_corpus(text).unwrap();
        assert_eq!(c.direction.target, "hu");
        assert_eq!(c.serialize(), text);
    }

    #[test]
    fn oversample_boundaries() {
        for (w, n) in [(0.5, 25), (0.019, 0), (1.0, 50), (0.02, 1), (0.0, 0)] {
            assert_eq!(oversample(&one(w), 50.0).unwrap().len(), n, "weight {w}");
        }
        assert!(oversample(&one(0.5), 0.0).is_err());
    }

    #[test]
    fn split_counts() {
        let c = synth_fixture(3, 100, 3);
        let (train, val) = split_by_prompt(&c, 0.15, 9).unwrap();
        assert_eq!((train.len(), val.len()), (85, 15));
        let (t2, v2) = split_by_prompt(&c, 0.15, 9).unwrap();
        assert_eq!((train.clone(), val.clone()), (t2, v2));
        let mut ids: Vec<_> = train.records.iter().chain(&val.records).map(|r| &r.prompt_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        assert!(split_by_prompt(&one(1.0), 0.15, 0).is_err());
        assert!(split_by_prompt(&c, 1.0, 0).is_err());
    }

    #[test]
    fn reverse_swaps_fields() {
        let c = parse_corpus("p1|i am here\nitt vagyok|0.6\n\n").unwrap();
        let r = reverse_pairs(&c);
        assert_eq!(r.records[0].prompt_id, "p1#rev0");
        assert_eq!(r.records[0].source_text, "itt vagyok");
        assert_eq!(r.records[0].translations[0].target_text, "i am here");
        assert_eq!(r.records[0].translations[0].weight, 0.6);
        assert_eq!(r.pair_count(), c.pair_count());
    }

    #[test]
    fn percentile_rule() {
        let mut lengths = vec![1; 100];
        lengths.push(50);
        assert_eq!(percentile_99(&lengths), 1);
        assert_eq!(percentile_99(&[3]), 3);
        assert_eq!(percentile_99(&[1, 2]), 2);
    }

    #[test]
    fn stats_single_pair() {
        let c = parse_corpus("p|a b c\nx y z|1\n").unwrap();
        let s = corpus_stats(&c, |t| t.split_whitespace().count()).unwrap();
        assert_eq!(
            s,
            CorpusStats {
                prompt_count: 1,
                pair_count: 1,
                max_source_len: 3,
                max_target_len: 3,
                p99_source_len: 3,
                p99_target_len: 3
            }
        );
        assert!(corpus_stats(&ParallelCorpus::default(), |_| 0).is_err());
    }
}
