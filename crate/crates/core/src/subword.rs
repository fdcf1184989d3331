//! Byte-pair-encoding subword model with a shared source/target vocabulary.
//!
//! Words are split on whitespace; the last symbol of every word carries the
//! end-of-word suffix [`EOW`], which lets `decode` restore spaces.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const EOW: &str = "</w>";

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";

/// Special token ids. The first five vocabulary slots hold them in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
    pub sep: u32,
}

pub const SPECIALS: SpecialIds = SpecialIds {
    pad: 0,
    bos: 1,
    eos: 2,
    unk: 3,
    sep: 4,
};

const SPECIAL_SURFACES: [&str; 5] = [PAD, BOS, EOS, UNK, SEP];

pub const DEFAULT_VOCAB_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    vocab: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    /// Number of non-special base symbols.
    alphabet_len: usize,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{EOW}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn is_special_surface(word: &str) -> Option<u32> {
    SPECIAL_SURFACES.iter().position(|s| *s == word).map(|i| i as u32)
}

impl BpeModel {
    fn build(alphabet: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_SURFACES.iter().map(|s| s.to_string()).collect();
        let alphabet_len = alphabet.len();
        tokens.extend(alphabet);
        let mut ranks = HashMap::new();
        for (rank, (a, b)) in merges.iter().enumerate() {
            tokens.push(format!("{a}{b}"));
            ranks.insert((a.clone(), b.clone()), rank);
        }
        let mut vocab = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            vocab.entry(t.clone()).or_insert(i as u32);
        }
        BpeModel {
            merges,
            tokens,
            vocab,
            ranks,
            alphabet_len,
        }
    }

    /// Learns merges by repeatedly joining the most frequent adjacent symbol
    /// pair (ties broken lexicographically) until `vocab_size` tokens exist
    /// or no pair occurs at least twice.
    ///
    /// Training is fully deterministic; `_seed` is accepted for interface
    /// symmetry with the other trainers.
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize, _seed: u64) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Empty("train_bpe needs at least one text"));
        }
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: std::collections::BTreeSet<char> = Default::default();
        for text in texts {
            for w in text.as_ref().split_whitespace() {
                if is_special_surface(w).is_some() {
                    continue;
                }
                chars.extend(w.chars());
                *word_freq.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut alphabet = Vec::with_capacity(chars.len() * 2);
        for c in &chars {
            alphabet.push(c.to_string());
            alphabet.push(format!("{c}{EOW}"));
        }
        let base = SPECIAL_SURFACES.len() + alphabet.len();
        if vocab_size < base {
            return Err(Error::invalid(format!(
                "vocab_size {vocab_size} smaller than alphabet plus specials ({base})"
            )));
        }

        let mut words: Vec<(Vec<String>, usize)> =
            word_freq.into_iter().map(|(w, f)| (word_symbols(&w), f)).collect();
        let mut merges = Vec::new();
        while base + merges.len() < vocab_size {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, f) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += f;
                }
            }
            // BTreeMap iterates lexicographically, so the first maximum wins ties.
            let mut best: Option<((&str, &str), usize)> = None;
            for (pair, c) in counts {
                if best.map_or(true, |(_, bc)| c > bc) {
                    best = Some((pair, c));
                }
            }
            let Some(((a, b), count)) = best else { break };
            if count < 2 {
                break;
            }
            let (a, b) = (a.to_string(), b.to_string());
            let joined = format!("{a}{b}");
            for (syms, _) in &mut words {
                merge_in_place(syms, &a, &b, &joined);
            }
            merges.push((a, b));
        }
        Ok(Self::build(alphabet, merges))
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet_len(&self) -> usize {
        self.alphabet_len
    }

    pub fn specials(&self) -> SpecialIds {
        SPECIALS
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| {
                    self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let joined = format!("{a}{b}");
            merge_in_place(&mut syms, a, b, &joined);
        }
        out.extend(syms.iter().map(|s| self.vocab.get(s).copied().unwrap_or(SPECIALS.unk)));
    }

    /// Encodes whitespace-separated words. Special-token surface forms
    /// (e.g. `<sep>`) map to their ids; no bos/eos is added.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            match is_special_surface(w) {
                Some(id) => out.push(id),
                None => self.encode_word(w, &mut out),
            }
        }
        out
    }

    fn decode_impl(&self, ids: &[u32], keep_sep: bool) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.vocab_size(),
            })?;
            match id {
                _ if id == SPECIALS.sep && keep_sep => {
                    s.push(' ');
                    s.push_str(SEP);
                    s.push(' ');
                }
                _ if id == SPECIALS.unk => s.push_str(UNK),
                _ if (id as usize) < SPECIAL_SURFACES.len() => {}
                _ => match tok.strip_suffix(EOW) {
                    Some(stem) => {
                        s.push_str(stem);
                        s.push(' ');
                    }
                    None => s.push_str(tok),
                },
            }
        }
        Ok(s.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace normalization.
    /// Special tokens other than unk are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        self.decode_impl(ids, false)
    }

    /// Like [`decode`](Self::decode) but renders separators as ` <sep> `.
    pub fn decode_keep_sep(&self, ids: &[u32]) -> Result<String> {
        self.decode_impl(ids, true)
    }

    /// Text serialization: header, alphabet, then merges in rank order.
    pub fn to_text(&self) -> String {
        let mut out = String::from("#bpe v1\n");
        let _ = writeln!(out, "specials {}", SPECIAL_SURFACES.join(" "));
        for sym in &self.tokens[SPECIAL_SURFACES.len()..SPECIAL_SURFACES.len() + self.alphabet_len] {
            let _ = writeln!(out, "symbol {sym}");
        }
        for (a, b) in &self.merges {
            let _ = writeln!(out, "merge {a} {b}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "#bpe v1")) => {}
            _ => return Err(Error::parse(1, "missing `#bpe v1` header")),
        }
        let mut alphabet = Vec::new();
        let mut merges = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            let mut parts = line.split(' ');
            match parts.next() {
                Some("specials") => {
                    let got: Vec<&str> = parts.collect();
                    if got != SPECIAL_SURFACES {
                        return Err(Error::parse(ln, "unsupported special token set"));
                    }
                }
                Some("symbol") => match (parts.next(), parts.next()) {
                    (Some(s), None) if !s.is_empty() => alphabet.push(s.to_string()),
                    _ => return Err(Error::parse(ln, "expected `symbol <sym>`")),
                },
                Some("merge") => match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                        merges.push((a.to_string(), b.to_string()))
                    }
                    _ => return Err(Error::parse(ln, "expected `merge <a> <b>`")),
                },
                Some("") => {}
                _ => return Err(Error::parse(ln, format!("unrecognized line {line:?}"))),
            }
        }
        Ok(Self::build(alphabet, merges))
    }
}

fn merge_in_place(syms: &mut Vec<String>, a: &str, b: &str, joined: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == a && syms[i + 1] == b {
            syms[i] = joined.to_string();
            syms.remove(i + 1);
        }
        i += 1;
    }
}
