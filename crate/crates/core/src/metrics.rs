//! Weighted and unweighted precision/recall/F1 scoring over prompts with
//! multiple weighted reference translations.
//!
//! Per prompt, precision is unweighted (`|TP| / |predictions|`) while the
//! weighted recall uses the learner-response weight of each reference:
//! `WR = WTP / (WTP + WFN)`. The weighted F1 of a prompt is the harmonic mean
//! of precision and weighted recall; the macro variants average per-prompt
//! values over all prompts.
//!
//! Micro variants pool counts across prompts. For the weighted micro F1 each
//! prompt's reference weights are first normalized to unit mass, so the
//! pooled weighted recall is invariant to per-prompt weight scaling just like
//! the macro score.

use std::collections::HashSet;
use std::fmt;

use crate::corpus::PromptRecord;
use crate::error::{Error, Result};

/// Text matching options shared by scoring and prediction labeling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NormalizeConfig {
    pub lowercase: bool,
}

/// Trims, collapses whitespace runs to a single space and optionally
/// lowercases.
pub fn normalize_text(s: &str, config: &NormalizeConfig) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        if config.lowercase {
            out.extend(word.chars().flat_map(char::to_lowercase));
        } else {
            out.push_str(word);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptScore {
    pub tp_count: usize,
    pub fp_count: usize,
    pub fn_count: usize,
    pub wtp: f64,
    pub wfn: f64,
    pub precision: f64,
    pub recall: f64,
    pub weighted_recall: f64,
    pub f1: f64,
    pub weighted_f1: f64,
}

/// Corpus-level report. Field order matches the printed report columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusScore {
    pub precision: f64,
    pub recall: f64,
    pub weighted_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub weighted_micro_f1: f64,
    pub weighted_macro_f1: f64,
}

impl CorpusScore {
    pub const HEADER: &'static str = "P R WR MiF MaF WMiF WMaF";

    pub fn fields(&self) -> [f64; 7] {
        [
            self.precision,
            self.recall,
            self.weighted_recall,
            self.micro_f1,
            self.macro_f1,
            self.weighted_micro_f1,
            self.weighted_macro_f1,
        ]
    }

    /// Single-line report with every field as a percentage, two decimals.
    pub fn report_line(&self) -> String {
        self.fields()
            .iter()
            .map(|v| format!("{:.2}", v * 100.0))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for CorpusScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.report_line())
    }
}

/// Harmonic mean with the zero-denominator convention `hm(0, 0) = 0`.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn prompt_score<S: AsRef<str>>(
    predictions: &[S],
    gold: &PromptRecord,
    config: &NormalizeConfig,
) -> PromptScore {
    let gold_texts: Vec<String> = gold
        .translations
        .iter()
        .map(|t| normalize_text(&t.target_text, config))
        .collect();

    let mut seen = HashSet::new();
    let mut matched = vec![false; gold_texts.len()];
    let mut n_pred = 0usize;
    let mut tp = 0usize;
    for p in predictions {
        let p = normalize_text(p.as_ref(), config);
        if p.is_empty() || !seen.insert(p.clone()) {
            continue;
        }
        n_pred += 1;
        let mut hit = false;
        for (i, g) in gold_texts.iter().enumerate() {
            if *g == p && !matched[i] {
                matched[i] = true;
                hit = true;
            }
        }
        if hit {
            tp += 1;
        }
    }

    let mut wtp = 0.0;
    let mut wfn = 0.0;
    let mut fn_count = 0;
    for (t, &m) in gold.translations.iter().zip(&matched) {
        if m {
            wtp += t.weight;
        } else {
            wfn += t.weight;
            fn_count += 1;
        }
    }

    let precision = ratio(tp as f64, n_pred as f64);
    let recall = ratio(tp as f64, (tp + fn_count) as f64);
    let weighted_recall = ratio(wtp, wtp + wfn);
    PromptScore {
        tp_count: tp,
        fp_count: n_pred - tp,
        fn_count,
        wtp,
        wfn,
        precision,
        recall,
        weighted_recall,
        f1: harmonic_mean(precision, recall),
        weighted_f1: harmonic_mean(precision, weighted_recall),
    }
}

pub fn corpus_score(scores: &[PromptScore]) -> Result<CorpusScore> {
    if scores.is_empty() {
        return Err(Error::Empty("corpus_score needs at least one prompt"));
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&PromptScore) -> f64| scores.iter().map(f).sum::<f64>() / n;

    let tp: usize = scores.iter().map(|s| s.tp_count).sum();
    let fp: usize = scores.iter().map(|s| s.fp_count).sum();
    let fneg: usize = scores.iter().map(|s| s.fn_count).sum();
    let pooled_p = ratio(tp as f64, (tp + fp) as f64);
    let pooled_r = ratio(tp as f64, (tp + fneg) as f64);

    // Each prompt contributes unit gold mass after normalization.
    let (mut pooled_wtp, mut pooled_mass) = (0.0, 0.0);
    for s in scores {
        let total = s.wtp + s.wfn;
        if total > 0.0 {
            pooled_wtp += s.wtp / total;
            pooled_mass += 1.0;
        }
    }
    let pooled_wr = ratio(pooled_wtp, pooled_mass);

    Ok(CorpusScore {
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        weighted_recall: mean(|s| s.weighted_recall),
        micro_f1: harmonic_mean(pooled_p, pooled_r),
        macro_f1: mean(|s| s.f1),
        weighted_micro_f1: harmonic_mean(pooled_p, pooled_wr),
        weighted_macro_f1: mean(|s| s.weighted_f1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WeightedTranslation;

    fn gold(items: &[(&str, f64)]) -> PromptRecord {
        PromptRecord {
            prompt_id: "p".into(),
            source_text: "src".into(),
            translations: items
                .iter()
                .map(|(t, w)| WeightedTranslation {
                    target_text: t.to_string(),
                    weight: *w,
                })
                .collect(),
        }
    }

    #[test]
    fn hand_example() {
        let g = gold(&[("a", 0.6), ("b", 0.3), ("c", 0.1)]);
        let s = prompt_score(&["a", "d"], &g, &NormalizeConfig::default());
        assert_eq!(s.precision, 0.5);
        assert!((s.weighted_recall - 0.6).abs() < 1e-12);
        assert!((s.weighted_f1 - 0.6 / 1.1).abs() < 1e-12);
        assert_eq!((s.tp_count, s.fp_count, s.fn_count), (1, 1, 2));
    }

    #[test]
    fn perfect_and_empty() {
        let g = gold(&[("a", 0.6), ("b", 0.4)]);
        let s = prompt_score(&["b", "a"], &g, &NormalizeConfig::default());
        assert_eq!((s.precision, s.weighted_recall, s.weighted_f1), (1.0, 1.0, 1.0));
        let s = prompt_score::<&str>(&[], &g, &NormalizeConfig::default());
        assert_eq!((s.precision, s.weighted_recall, s.weighted_f1), (0.0, 0.0, 0.0));
        assert_eq!(s.fn_count, 2);
    }

    #[test]
    fn duplicate_predictions_count_once() {
        let g = gold(&[("a b", 1.0)]);
        let s = prompt_score(&["a b", " a  b ", "a b"], &g, &NormalizeConfig::default());
        assert_eq!(s.tp_count, 1);
        assert_eq!(s.precision, 1.0);
    }

    #[test]
    fn single_prompt_micro_equals_macro() {
        let g = gold(&[("a", 0.6), ("b", 0.3), ("c", 0.1)]);
        let s = prompt_score(&["a", "d"], &g, &NormalizeConfig::default());
        let c = corpus_score(std::slice::from_ref(&s)).unwrap();
        assert_eq!(c.micro_f1, s.f1);
        assert_eq!(c.macro_f1, s.f1);
        assert_eq!(c.weighted_micro_f1, s.weighted_f1);
        assert_eq!(c.weighted_macro_f1, s.weighted_f1);
        assert_eq!(c.weighted_recall, s.weighted_recall);
    }

    #[test]
    fn macro_is_mean() {
        let g = gold(&[("a", 1.0)]);
        let n = NormalizeConfig::default();
        let c = corpus_score(&[prompt_score(&["a"], &g, &n), prompt_score(&["x"], &g, &n)]).unwrap();
        assert_eq!(c.weighted_macro_f1, 0.5);
        assert!(corpus_score(&[]).is_err());
    }

    #[test]
    fn normalization() {
        let n = NormalizeConfig::default();
        assert_eq!(normalize_text("  itt   vagyok ", &n), "itt vagyok");
        let lower = NormalizeConfig { lowercase: true };
        assert_eq!(normalize_text("Itt Vagyok", &lower), "itt vagyok");
        assert_eq!(normalize_text("Itt Vagyok", &n), "Itt Vagyok");
    }

    #[test]
    fn report_line_format() {
        let c = CorpusScore {
            weighted_macro_f1: 0.6 / 1.1,
            ..Default::default()
        };
        assert_eq!(c.report_line(), "0.00 0.00 0.00 0.00 0.00 0.00 54.55");
    }
}
