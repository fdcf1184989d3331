//! Incremental decoding with cached keys/values.

use std::sync::Arc;

use super::ops::{add_assign, c, layer_norm, linear, softmax_in_place};
use super::transformer::ffn;
use super::{LinearIdx, Scalar, TransformerModel};
use crate::error::{Error, Result};

/// Encoder output plus per-layer cross-attention keys and values.
#[derive(Debug)]
pub struct Memory<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> Memory<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Decoder self-attention caches for one partial hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    memory: Arc<Memory<T>>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    pos: usize,
}

impl<T> DecoderState<T> {
    /// Number of tokens fed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn lin<T: Scalar>(p: &[T], idx: &LinearIdx, x: &[T]) -> Vec<T> {
    linear(x, &p[idx.w_range()], &p[idx.b_range()], idx.fan_in, idx.fan_out)
}

/// Single-query attention over cached `keys`/`values` (`m × d`).
fn attend<T: Scalar>(q: &[T], keys: &[T], values: &[T], heads: usize) -> Vec<T> {
    let d = q.len();
    let m = keys.len() / d;
    let dk = d / heads;
    let scale = c::<T>(1.0 / (dk as f64).sqrt());
    let mut ctx = vec![T::zero(); d];
    let mut row = vec![T::zero(); m];
    for h in 0..heads {
        let off = h * dk;
        let qh = &q[off..off + dk];
        for (j, s) in row.iter_mut().enumerate() {
            let kj = &keys[j * d + off..j * d + off + dk];
            *s = qh.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
        }
        softmax_in_place(&mut row);
        let out = &mut ctx[off..off + dk];
        for (j, &pj) in row.iter().enumerate() {
            if pj == T::zero() {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(&values[j * d + off..j * d + off + dk]) {
                *o = *o + pj * v;
            }
        }
    }
    ctx
}

impl<T: Scalar> TransformerModel<T> {
    /// Encodes a source sentence (eval mode) for incremental decoding.
    pub fn encode(&self, src: &[u32]) -> Result<Arc<Memory<T>>> {
        self.check_ids(src)?;
        if src.is_empty() {
            return Err(Error::Empty("cannot encode an empty source"));
        }
        let mut drop = self.no_dropout();
        let (mem, ..) = self.encode_with(src, &mut drop);
        let p = self.params();
        let (keys, values) = self
            .layout
            .dec
            .iter()
            .map(|l| (lin(p, &l.cross_attn.k, &mem), lin(p, &l.cross_attn.v, &mem)))
            .unzip();
        Ok(Arc::new(Memory {
            keys,
            values,
            len: src.len(),
        }))
    }

    pub fn start_state(&self, memory: Arc<Memory<T>>) -> DecoderState<T> {
        let n = self.layout.dec.len();
        DecoderState {
            memory,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            pos: 0,
        }
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn decode_step(&self, state: &mut DecoderState<T>, token: u32) -> Result<Vec<T>> {
        self.check_ids(&[token])?;
        if state.pos >= self.config.max_positions {
            return Err(Error::LengthOverflow {
                len: state.pos + 1,
                max: self.config.max_positions,
            });
        }
        let p = self.params();
        let heads = self.config.heads;
        let mut x = self.embed_tokens(&[token], state.pos);
        for (li, l) in self.layout.dec.iter().enumerate() {
            let (n1, _) = layer_norm(&x, &p[l.ln1.g_range()], &p[l.ln1.b_range()], l.ln1.d);
            let q = lin(p, &l.self_attn.q, &n1);
            state.keys[li].extend(lin(p, &l.self_attn.k, &n1));
            state.values[li].extend(lin(p, &l.self_attn.v, &n1));
            let ctx = attend(&q, &state.keys[li], &state.values[li], heads);
            add_assign(&mut x, &lin(p, &l.self_attn.o, &ctx));

            let (n2, _) = layer_norm(&x, &p[l.ln2.g_range()], &p[l.ln2.b_range()], l.ln2.d);
            let q = lin(p, &l.cross_attn.q, &n2);
            let ctx = attend(&q, &state.memory.keys[li], &state.memory.values[li], heads);
            add_assign(&mut x, &lin(p, &l.cross_attn.o, &ctx));

            let (n3, _) = layer_norm(&x, &p[l.ln3.g_range()], &p[l.ln3.b_range()], l.ln3.d);
            let (f, _) = ffn(p, &l.ffn, &n3);
            add_assign(&mut x, &f);
        }
        let dn = &self.layout.dec_norm;
        let (h, _) = layer_norm(&x, &p[dn.g_range()], &p[dn.b_range()], dn.d);
        state.pos += 1;
        Ok(self.project(&h, self.embedding()))
    }

    pub(crate) fn no_dropout(&self) -> super::transformer::Dropout {
        super::transformer::Dropout::disabled()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn incremental_matches_teacher_forcing() {
        let cfg = ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 17,
            dropout: 0.1,
            max_positions: 16,
        };
        let m = TransformerModel::<f64>::new(cfg, 9).unwrap();
        let src = [5, 9, 11, 2];
        let tgt = [1, 7, 8, 3, 12];
        let full = m.forward(&src, &tgt, false, 0).unwrap();
        let mem = m.encode(&src).unwrap();
        let mut st = m.start_state(mem);
        for (pos, &tok) in tgt.iter().enumerate() {
            let logits = m.decode_step(&mut st, tok).unwrap();
            for (a, b) in logits.iter().zip(full.row(pos)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(st.position(), 5);
    }
}
