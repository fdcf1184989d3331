//! Decoder output files.
//!
//! Blocks mirror the corpus format: a `prompt_id|source_text` header, then
//! one candidate per line. With scores a candidate line reads
//! `text|total_logprob|lp1,lp2,...`; without, it is the bare text. A block
//! may have no candidates.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::corpus::{blocks, ParallelCorpus};
use crate::error::{Error, Result};
use crate::metrics::{corpus_score, normalize_text, prompt_score, CorpusScore, NormalizeConfig, PromptScore};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub text: String,
    pub total_logprob: Option<f64>,
    pub token_logprobs: Option<Vec<f64>>,
}

impl ScoredPrediction {
    pub fn plain(text: impl Into<String>) -> Self {
        ScoredPrediction {
            text: text.into(),
            total_logprob: None,
            token_logprobs: None,
        }
    }

    pub fn scored(text: impl Into<String>, token_logprobs: Vec<f64>) -> Self {
        ScoredPrediction {
            text: text.into(),
            total_logprob: Some(token_logprobs.iter().sum()),
            token_logprobs: Some(token_logprobs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPredictions {
    pub prompt_id: String,
    pub source_text: String,
    pub candidates: Vec<ScoredPrediction>,
}

impl PromptPredictions {
    pub fn texts(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionFile {
    pub prompts: Vec<PromptPredictions>,
}

impl PredictionFile {
    /// True when every candidate carries token scores.
    pub fn has_scores(&self) -> bool {
        self.prompts
            .iter()
            .flat_map(|p| &p.candidates)
            .all(|c| c.token_logprobs.is_some())
    }

    pub fn candidate_count(&self) -> usize {
        self.prompts.iter().map(|p| p.candidates.len()).sum()
    }

    pub fn serialize(&self, emit_scores: bool) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            let _ = writeln!(out, "{}|{}", p.prompt_id, p.source_text);
            for c in &p.candidates {
                match (&c.total_logprob, &c.token_logprobs) {
                    (Some(total), Some(lps)) if emit_scores => {
                        let lps: Vec<String> = lps.iter().map(|x| x.to_string()).collect();
                        let _ = writeln!(out, "{}|{}|{}", c.text, total, lps.join(","));
                    }
                    _ => {
                        let _ = writeln!(out, "{}", c.text);
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Keeps only the candidates accepted by `keep`, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(&ScoredPrediction) -> bool) -> PredictionFile {
        PredictionFile {
            prompts: self
                .prompts
                .iter()
                .map(|p| PromptPredictions {
                    prompt_id: p.prompt_id.clone(),
                    source_text: p.source_text.clone(),
                    candidates: p.candidates.iter().filter(|c| keep(c)).cloned().collect(),
                })
                .collect(),
        }
    }
}

fn parse_candidate(line: &str, ln: usize) -> Result<ScoredPrediction> {
    let mut parts = line.splitn(4, '|');
    let text = parts.next().unwrap_or_default();
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    match (parts.next(), parts.next(), parts.next()) {
        (None, ..) => Ok(ScoredPrediction::plain(text)),
        (Some(total), Some(lps), None) => {
            let total: f64 = total
                .trim()
                .parse()
                .map_err(|_| Error::parse(ln, format!("invalid total score {total:?}")))?;
            let lps = lps
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| Error::parse(ln, format!("invalid token score {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(ScoredPrediction {
                text,
                total_logprob: Some(total),
                token_logprobs: Some(lps),
            })
        }
        _ => Err(Error::parse(ln, "expected `text` or `text|total|scores`")),
    }
}

pub fn parse_predictions(text: &str) -> Result<PredictionFile> {
    let mut file = PredictionFile::default();
    let mut ids = HashSet::new();
    for (_, lines) in blocks(text) {
        let (hl, header) = lines[0];
        let (id, src) = header
            .split_once('|')
            .ok_or_else(|| Error::parse(hl, "expected `prompt_id|source_text` header"))?;
        let id = id.trim().to_string();
        if !ids.insert(id.clone()) {
            return Err(Error::DuplicatePrompt(id));
        }
        let candidates = lines[1..]
            .iter()
            .map(|&(ln, l)| parse_candidate(l, ln))
            .collect::<Result<Vec<_>>>()?;
        file.prompts.push(PromptPredictions {
            prompt_id: id,
            source_text: src.split_whitespace().collect::<Vec<_>>().join(" "),
            candidates,
        });
    }
    Ok(file)
}

/// Per-prompt scores in gold order. Every gold prompt must appear in the
/// predictions and vice versa.
pub fn score_prompts(gold: &ParallelCorpus, preds: &PredictionFile, norm: &NormalizeConfig) -> Result<Vec<PromptScore>> {
    let by_id: std::collections::HashMap<&str, &PromptPredictions> =
        preds.prompts.iter().map(|p| (p.prompt_id.as_str(), p)).collect();
    let missing: Vec<String> = gold
        .records
        .iter()
        .filter(|r| !by_id.contains_key(r.prompt_id.as_str()))
        .map(|r| r.prompt_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPrompts(missing));
    }
    let gold_ids: HashSet<&str> = gold.records.iter().map(|r| r.prompt_id.as_str()).collect();
    let extra: Vec<&str> = preds
        .prompts
        .iter()
        .map(|p| p.prompt_id.as_str())
        .filter(|id| !gold_ids.contains(id))
        .collect();
    if !extra.is_empty() {
        return Err(Error::invalid(format!("prompt ids not in gold: {extra:?}")));
    }
    Ok(gold
        .records
        .iter()
        .map(|r| prompt_score(&by_id[r.prompt_id.as_str()].texts(), r, norm))
        .collect())
}

pub fn score_predictions(gold: &ParallelCorpus, preds: &PredictionFile, norm: &NormalizeConfig) -> Result<CorpusScore> {
    corpus_score(&score_prompts(gold, preds, norm)?)
}

/// Whether `text` matches any gold translation after normalization.
pub fn matches_gold(text: &str, gold: &crate::corpus::PromptRecord, norm: &NormalizeConfig) -> bool {
    let t = normalize_text(text, norm);
    !t.is_empty() && gold.translations.iter().any(|g| normalize_text(&g.target_text, norm) == t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_and_without_scores() {
        let f = PredictionFile {
            prompts: vec![
                PromptPredictions {
                    prompt_id: "p1".into(),
                    source_text: "hello there".into(),
                    candidates: vec![
                        ScoredPrediction::scored("szia", vec![-0.1, -0.25]),
                        ScoredPrediction::scored("helló", vec![-1.0 / 3.0]),
                    ],
                },
                PromptPredictions {
                    prompt_id: "p2".into(),
                    source_text: "x".into(),
                    candidates: vec![],
                },
            ],
        };
        let text = f.serialize(true);
        assert_eq!(parse_predictions(&text).unwrap(), f);
        let plain = parse_predictions(&f.serialize(false)).unwrap();
        assert!(!plain.has_scores());
        assert_eq!(plain.prompts[0].texts(), vec!["szia", "helló"]);
        assert_eq!(plain.prompts[1].candidates.len(), 0);
        assert!(parse_predictions("p|s\na|b\n").is_err());
    }
}
