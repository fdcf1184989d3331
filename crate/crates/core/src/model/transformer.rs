use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::smoothed_loss_rows;
use super::ops::{
    add_assign, c, layer_norm, layer_norm_backward, linear, linear_backward, matmul_acc,
    matmul_tn_acc, position_encoding, softmax_in_place, swish, swish_grad, LayerNormCache,
};
use super::{AttnIdx, FfnIdx, LinearIdx, NormIdx, Scalar, TransformerModel};
use crate::error::{Error, Result};

/// A teacher-forced training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    /// Decoder input: `bos` followed by the target without its last token.
    pub tgt_in: Vec<u32>,
    /// Expected next tokens, usually ending in `eos`.
    pub tgt_out: Vec<u32>,
}

impl Example {
    /// Builds decoder input/output from a target that already ends in `eos`.
    pub fn teacher_forced(src: Vec<u32>, tgt: Vec<u32>, bos: u32) -> Self {
        let mut tgt_in = Vec::with_capacity(tgt.len());
        tgt_in.push(bos);
        tgt_in.extend_from_slice(&tgt[..tgt.len().saturating_sub(1)]);
        Example {
            src,
            tgt_in,
            tgt_out: tgt,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Row-major `tgt_len × vocab`.
    pub logits: Vec<T>,
    pub tgt_len: usize,
    pub vocab: usize,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn row(&self, pos: usize) -> &[T] {
        &self.logits[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn log_probs(&self, pos: usize) -> Vec<f64> {
        super::ops::log_softmax(self.row(pos))
    }
}

#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    /// Mean label-smoothed loss over all non-pad target tokens of the batch.
    pub loss: f64,
    pub tokens: usize,
    /// Same layout as the parameters.
    pub grads: Vec<T>,
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub(crate) fn disabled() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    fn mask<T: Scalar>(&mut self, len: usize) -> Option<Vec<T>> {
        let rng = self.rng.as_mut()?;
        let keep = c::<T>(1.0 / (1.0 - self.rate));
        Some(
            (0..len)
                .map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep })
                .collect(),
        )
    }
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

fn split2<T>(g: &mut [T], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [T], &mut [T]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.len()])
}

fn linear_p<T: Scalar>(p: &[T], idx: &LinearIdx, x: &[T]) -> Vec<T> {
    linear(x, &p[idx.w_range()], &p[idx.b_range()], idx.fan_in, idx.fan_out)
}

fn linear_back<T: Scalar>(p: &[T], g: &mut [T], idx: &LinearIdx, x: &[T], dy: &[T], dx: &mut [T]) {
    let (dw, db) = split2(g, idx.w_range(), idx.b_range());
    linear_backward(x, &p[idx.w_range()], dy, idx.fan_in, idx.fan_out, dw, db, dx);
}

fn norm_p<T: Scalar>(p: &[T], idx: &NormIdx, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
    layer_norm(x, &p[idx.g_range()], &p[idx.b_range()], idx.d)
}

fn norm_back<T: Scalar>(p: &[T], g: &mut [T], idx: &NormIdx, cache: &LayerNormCache<T>, dy: &[T]) -> Vec<T> {
    let (dg, db) = split2(g, idx.g_range(), idx.b_range());
    layer_norm_backward(dy, cache, &p[idx.g_range()], dg, db, idx.d)
}

pub(crate) struct AttnCache<T> {
    q_in: Vec<T>,
    kv_in: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    n: usize,
    m: usize,
}

/// Multi-head scaled dot-product attention of `q_in` (n×d) over `kv_in` (m×d).
pub(crate) fn attention<T: Scalar>(
    p: &[T],
    idx: &AttnIdx,
    q_in: &[T],
    kv_in: &[T],
    heads: usize,
    causal: bool,
) -> (Vec<T>, AttnCache<T>) {
    let d = idx.q.fan_in;
    let (n, m) = (q_in.len() / d, kv_in.len() / d);
    let dk = d / heads;
    let scale = c::<T>(1.0 / (dk as f64).sqrt());
    let q = linear_p(p, &idx.q, q_in);
    let k = linear_p(p, &idx.k, kv_in);
    let v = linear_p(p, &idx.v, kv_in);
    let mut probs = vec![T::zero(); heads * n * m];
    let mut ctx = vec![T::zero(); n * d];
    for h in 0..heads {
        let off = h * dk;
        for i in 0..n {
            let row = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
            let qi = &q[i * d + off..i * d + off + dk];
            for (j, s) in row.iter_mut().enumerate() {
                *s = if causal && j > i {
                    T::neg_infinity()
                } else {
                    let kj = &k[j * d + off..j * d + off + dk];
                    qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale
                };
            }
            softmax_in_place(row);
            let out = &mut ctx[i * d + off..i * d + off + dk];
            for (j, &pij) in row.iter().enumerate() {
                if pij == T::zero() {
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + dk];
                for (o, &x) in out.iter_mut().zip(vj) {
                    *o = *o + pij * x;
                }
            }
        }
    }
    let out = linear_p(p, &idx.o, &ctx);
    let cache = AttnCache {
        q_in: q_in.to_vec(),
        kv_in: kv_in.to_vec(),
        q,
        k,
        v,
        probs,
        ctx,
        n,
        m,
    };
    (out, cache)
}

/// Returns `(d q_in, d kv_in)`.
fn attention_backward<T: Scalar>(
    p: &[T],
    g: &mut [T],
    idx: &AttnIdx,
    cache: &AttnCache<T>,
    dout: &[T],
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let d = idx.q.fan_in;
    let (n, m) = (cache.n, cache.m);
    let dk = d / heads;
    let scale = c::<T>(1.0 / (dk as f64).sqrt());

    let mut dctx = vec![T::zero(); n * d];
    linear_back(p, g, &idx.o, &cache.ctx, dout, &mut dctx);

    let mut dq = vec![T::zero(); n * d];
    let mut dk_ = vec![T::zero(); m * d];
    let mut dv = vec![T::zero(); m * d];
    let mut dp = vec![T::zero(); m];
    for h in 0..heads {
        let off = h * dk;
        for i in 0..n {
            let prow = &cache.probs[(h * n + i) * m..(h * n + i + 1) * m];
            let dci = &dctx[i * d + off..i * d + off + dk];
            let mut dot = T::zero();
            for j in 0..m {
                let vj = &cache.v[j * d + off..j * d + off + dk];
                dp[j] = dci.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                dot = dot + dp[j] * prow[j];
                let pij = prow[j];
                if pij != T::zero() {
                    let dvj = &mut dv[j * d + off..j * d + off + dk];
                    for (o, &x) in dvj.iter_mut().zip(dci) {
                        *o = *o + pij * x;
                    }
                }
            }
            let qi = &cache.q[i * d + off..i * d + off + dk];
            for j in 0..m {
                let pij = prow[j];
                if pij == T::zero() {
                    continue;
                }
                let ds = pij * (dp[j] - dot) * scale;
                let kj = &cache.k[j * d + off..j * d + off + dk];
                let dqi = &mut dq[i * d + off..i * d + off + dk];
                for (o, &x) in dqi.iter_mut().zip(kj) {
                    *o = *o + ds * x;
                }
                let dkj = &mut dk_[j * d + off..j * d + off + dk];
                for (o, &x) in dkj.iter_mut().zip(qi) {
                    *o = *o + ds * x;
                }
            }
        }
    }
    let mut dq_in = vec![T::zero(); n * d];
    linear_back(p, g, &idx.q, &cache.q_in, &dq, &mut dq_in);
    let mut dkv_in = vec![T::zero(); m * d];
    linear_back(p, g, &idx.k, &cache.kv_in, &dk_, &mut dkv_in);
    linear_back(p, g, &idx.v, &cache.kv_in, &dv, &mut dkv_in);
    (dq_in, dkv_in)
}

pub(crate) struct FfnCache<T> {
    x: Vec<T>,
    h1: Vec<T>,
    a: Vec<T>,
}

pub(crate) fn ffn<T: Scalar>(p: &[T], idx: &FfnIdx, x: &[T]) -> (Vec<T>, FfnCache<T>) {
    let h1 = linear_p(p, &idx.l1, x);
    let a: Vec<T> = h1.iter().map(|&v| swish(v)).collect();
    let y = linear_p(p, &idx.l2, &a);
    (
        y,
        FfnCache {
            x: x.to_vec(),
            h1,
            a,
        },
    )
}

fn ffn_backward<T: Scalar>(p: &[T], g: &mut [T], idx: &FfnIdx, cache: &FfnCache<T>, dy: &[T]) -> Vec<T> {
    let mut da = vec![T::zero(); cache.a.len()];
    linear_back(p, g, &idx.l2, &cache.a, dy, &mut da);
    for (d, &h) in da.iter_mut().zip(&cache.h1) {
        *d = *d * swish_grad(h);
    }
    let mut dx = vec![T::zero(); cache.x.len()];
    linear_back(p, g, &idx.l1, &cache.x, &da, &mut dx);
    dx
}

pub(crate) struct EncLayerCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    ffn: FfnCache<T>,
    drop2: Option<Vec<T>>,
}

struct DecLayerCache<T> {
    ln1: LayerNormCache<T>,
    self_attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    cross: AttnCache<T>,
    drop2: Option<Vec<T>>,
    ln3: LayerNormCache<T>,
    ffn: FfnCache<T>,
    drop3: Option<Vec<T>>,
}

struct SeqCache<T> {
    src: Vec<u32>,
    tgt: Vec<u32>,
    src_drop: Option<Vec<T>>,
    tgt_drop: Option<Vec<T>>,
    enc: Vec<EncLayerCache<T>>,
    enc_norm: LayerNormCache<T>,
    dec: Vec<DecLayerCache<T>>,
    dec_norm: LayerNormCache<T>,
    h_final: Vec<T>,
}

impl<T: Scalar> TransformerModel<T> {
    pub(crate) fn embed_tokens(&self, ids: &[u32], start_pos: usize) -> Vec<T> {
        let d = self.config.d_model;
        let e = self.embedding();
        let scale = c::<T>((d as f64).sqrt());
        let mut x = vec![T::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            position_encoding(start_pos + i, d, row);
            let er = &e[id as usize * d..(id as usize + 1) * d];
            for (o, &v) in row.iter_mut().zip(er) {
                *o = *o + v * scale;
            }
        }
        x
    }

    /// Runs the encoder stack, returning the normalized memory.
    pub(crate) fn encode_with(&self, src: &[u32], drop: &mut Dropout) -> (Vec<T>, Option<Vec<T>>, Vec<EncLayerCache<T>>, LayerNormCache<T>) {
        let p = &self.params;
        let heads = self.config.heads;
        let mut x = self.embed_tokens(src, 0);
        let src_drop = drop.mask(x.len());
        apply_mask(&mut x, &src_drop);
        let mut caches = Vec::with_capacity(self.layout.enc.len());
        for l in &self.layout.enc {
            let (n1, ln1) = norm_p(p, &l.ln1, &x);
            let (mut a, attn) = attention(p, &l.attn, &n1, &n1, heads, false);
            let drop1 = drop.mask(a.len());
            apply_mask(&mut a, &drop1);
            add_assign(&mut x, &a);
            let (n2, ln2) = norm_p(p, &l.ln2, &x);
            let (mut f, ffn_c) = ffn(p, &l.ffn, &n2);
            let drop2 = drop.mask(f.len());
            apply_mask(&mut f, &drop2);
            add_assign(&mut x, &f);
            caches.push(EncLayerCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn: ffn_c,
                drop2,
            });
        }
        let (mem, enc_norm) = norm_p(p, &self.layout.enc_norm, &x);
        (mem, src_drop, caches, enc_norm)
    }

    fn forward_cached(&self, src: &[u32], tgt: &[u32], proj: &[T], drop: &mut Dropout) -> Result<(Vec<T>, SeqCache<T>)> {
        self.check_ids(src)?;
        self.check_ids(tgt)?;
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Empty("forward needs non-empty source and target"));
        }
        let p = &self.params;
        let (v, heads) = (self.config.vocab_size, self.config.heads);
        let (mem, src_drop, enc, enc_norm) = self.encode_with(src, drop);

        let mut y = self.embed_tokens(tgt, 0);
        let tgt_drop = drop.mask(y.len());
        apply_mask(&mut y, &tgt_drop);
        let mut dec = Vec::with_capacity(self.layout.dec.len());
        for l in &self.layout.dec {
            let (n1, ln1) = norm_p(p, &l.ln1, &y);
            let (mut a, self_attn) = attention(p, &l.self_attn, &n1, &n1, heads, true);
            let drop1 = drop.mask(a.len());
            apply_mask(&mut a, &drop1);
            add_assign(&mut y, &a);
            let (n2, ln2) = norm_p(p, &l.ln2, &y);
            let (mut ca, cross) = attention(p, &l.cross_attn, &n2, &mem, heads, false);
            let drop2 = drop.mask(ca.len());
            apply_mask(&mut ca, &drop2);
            add_assign(&mut y, &ca);
            let (n3, ln3) = norm_p(p, &l.ln3, &y);
            let (mut f, ffn_c) = ffn(p, &l.ffn, &n3);
            let drop3 = drop.mask(f.len());
            apply_mask(&mut f, &drop3);
            add_assign(&mut y, &f);
            dec.push(DecLayerCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross,
                drop2,
                ln3,
                ffn: ffn_c,
                drop3,
            });
        }
        let (h, dec_norm) = norm_p(p, &self.layout.dec_norm, &y);
        let logits = self.project(&h, proj);
        debug_assert_eq!(logits.len(), tgt.len() * v);
        Ok((
            logits,
            SeqCache {
                src: src.to_vec(),
                tgt: tgt.to_vec(),
                src_drop,
                tgt_drop,
                enc,
                enc_norm,
                dec,
                dec_norm,
                h_final: h,
            },
        ))
    }

    /// `h · projᵀ + output bias`.
    pub(crate) fn project(&self, h: &[T], proj: &[T]) -> Vec<T> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let n = h.len() / d;
        let bias = &self.params[self.layout.out_bias..self.layout.out_bias + v];
        let mut logits = Vec::with_capacity(n * v);
        for _ in 0..n {
            logits.extend_from_slice(bias);
        }
        super::ops::matmul_nt_acc(h, proj, n, d, v, &mut logits);
        logits
    }

    /// Accumulates gradients of one sequence into `g` (non-embedding and
    /// lookup-path embedding) and `g_proj` (projection-path embedding).
    fn backward(&self, cache: &SeqCache<T>, dlogits: &[T], proj: &[T], g: &mut [T], g_proj: &mut [T]) {
        let p = &self.params;
        let (d, v, heads) = (self.config.d_model, self.config.vocab_size, self.config.heads);
        let n = cache.tgt.len();

        let ob = self.layout.out_bias;
        for i in 0..n {
            add_assign(&mut g[ob..ob + v], &dlogits[i * v..(i + 1) * v]);
        }
        let mut dh = vec![T::zero(); n * d];
        matmul_acc(dlogits, proj, n, v, d, &mut dh);
        matmul_tn_acc(dlogits, &cache.h_final, n, v, d, g_proj);

        let mut dy = norm_back(p, g, &self.layout.dec_norm, &cache.dec_norm, &dh);
        let mut dmem = vec![T::zero(); cache.src.len() * d];
        for (l, lc) in self.layout.dec.iter().zip(&cache.dec).rev() {
            let mut df = dy.clone();
            apply_mask(&mut df, &lc.drop3);
            let dn3 = ffn_backward(p, g, &l.ffn, &lc.ffn, &df);
            add_assign(&mut dy, &norm_back(p, g, &l.ln3, &lc.ln3, &dn3));

            let mut dca = dy.clone();
            apply_mask(&mut dca, &lc.drop2);
            let (dn2, dm) = attention_backward(p, g, &l.cross_attn, &lc.cross, &dca, heads);
            add_assign(&mut dmem, &dm);
            add_assign(&mut dy, &norm_back(p, g, &l.ln2, &lc.ln2, &dn2));

            let mut da = dy.clone();
            apply_mask(&mut da, &lc.drop1);
            let (mut dn1, dkv) = attention_backward(p, g, &l.self_attn, &lc.self_attn, &da, heads);
            add_assign(&mut dn1, &dkv);
            add_assign(&mut dy, &norm_back(p, g, &l.ln1, &lc.ln1, &dn1));
        }
        apply_mask(&mut dy, &cache.tgt_drop);
        self.embed_backward(&cache.tgt, &dy, g);

        let mut dx = norm_back(p, g, &self.layout.enc_norm, &cache.enc_norm, &dmem);
        for (l, lc) in self.layout.enc.iter().zip(&cache.enc).rev() {
            let mut df = dx.clone();
            apply_mask(&mut df, &lc.drop2);
            let dn2 = ffn_backward(p, g, &l.ffn, &lc.ffn, &df);
            add_assign(&mut dx, &norm_back(p, g, &l.ln2, &lc.ln2, &dn2));

            let mut da = dx.clone();
            apply_mask(&mut da, &lc.drop1);
            let (mut dn1, dkv) = attention_backward(p, g, &l.attn, &lc.attn, &da, heads);
            add_assign(&mut dn1, &dkv);
            add_assign(&mut dx, &norm_back(p, g, &l.ln1, &lc.ln1, &dn1));
        }
        apply_mask(&mut dx, &cache.src_drop);
        self.embed_backward(&cache.src, &dx, g);
    }

    fn embed_backward(&self, ids: &[u32], dx: &[T], g: &mut [T]) {
        let d = self.config.d_model;
        let scale = c::<T>((d as f64).sqrt());
        let base = self.layout.embed;
        for (i, &id) in ids.iter().enumerate() {
            let row = &mut g[base + id as usize * d..base + (id as usize + 1) * d];
            for (o, &x) in row.iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                *o = *o + x * scale;
            }
        }
    }

    fn dropout(&self, train_mode: bool, seed: u64) -> Dropout {
        Dropout {
            rate: self.config.dropout,
            rng: (train_mode && self.config.dropout > 0.0)
                .then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Teacher-forced logits for every target position. Dropout is active
    /// only in `train_mode` and is deterministic under `seed`.
    pub fn forward(&self, src: &[u32], tgt: &[u32], train_mode: bool, seed: u64) -> Result<ForwardOutput<T>> {
        let mut drop = self.dropout(train_mode, seed);
        let (logits, _) = self.forward_cached(src, tgt, self.embedding(), &mut drop)?;
        Ok(ForwardOutput {
            logits,
            tgt_len: tgt.len(),
            vocab: self.config.vocab_size,
        })
    }

    /// Mean label-smoothed loss over a batch without gradients.
    pub fn batch_loss(&self, batch: &[Example], smoothing: f64, pad_id: u32) -> Result<f64> {
        let mut sum = 0.0;
        let mut tokens = 0;
        for ex in batch {
            let out = self.forward(&ex.src, &ex.tgt_in, false, 0)?;
            let (s, n, _) = smoothed_loss_rows(&out.logits, out.vocab, &ex.tgt_out, smoothing, pad_id, None);
            sum += s;
            tokens += n;
        }
        if tokens == 0 {
            return Err(Error::Empty("batch has no non-pad target tokens"));
        }
        Ok(sum / tokens as f64)
    }

    /// Exact gradients of the batch-mean label-smoothed loss.
    ///
    /// Sequences are processed in fixed chunks whose partial gradients are
    /// summed in chunk order, so the result does not depend on the thread
    /// schedule.
    pub fn gradients(
        &self,
        batch: &[Example],
        smoothing: f64,
        pad_id: u32,
        train_mode: bool,
        seed: u64,
    ) -> Result<BatchGradients<T>> {
        self.gradients_split(batch, smoothing, pad_id, train_mode, seed, None)
            .map(|(g, proj)| {
                let mut g = g;
                add_assign(&mut g.grads[self.embed_range()], &proj);
                g
            })
    }

    /// Like [`gradients`](Self::gradients) but keeps the output-projection
    /// contribution to the shared embedding separate. When `proj_override`
    /// is given it replaces the tied matrix in the output projection only,
    /// which evaluates the equivalent untied model.
    pub fn gradients_split(
        &self,
        batch: &[Example],
        smoothing: f64,
        pad_id: u32,
        train_mode: bool,
        seed: u64,
        proj_override: Option<&[T]>,
    ) -> Result<(BatchGradients<T>, Vec<T>)> {
        if batch.is_empty() {
            return Err(Error::Empty("gradients of an empty batch"));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("smoothing {smoothing} outside [0, 1)")));
        }
        for ex in batch {
            if ex.tgt_in.len() != ex.tgt_out.len() {
                return Err(Error::ShapeMismatch {
                    expected: ex.tgt_in.len(),
                    got: ex.tgt_out.len(),
                });
            }
            self.check_ids(&ex.tgt_out)?;
        }
        let total_tokens: usize = batch
            .iter()
            .map(|ex| ex.tgt_out.iter().filter(|&&t| t != pad_id).count())
            .sum();
        if total_tokens == 0 {
            return Err(Error::Empty("batch has no non-pad target tokens"));
        }
        let proj = proj_override.unwrap_or_else(|| self.embedding());
        let scale = 1.0 / total_tokens as f64;
        let n_embed = self.config.vocab_size * self.config.d_model;

        const CHUNK: usize = 8;
        let partials: Vec<Result<(f64, Vec<T>, Vec<T>)>> = batch
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut g = vec![T::zero(); self.params.len()];
                let mut gp = vec![T::zero(); n_embed];
                let mut loss = 0.0;
                for (j, ex) in chunk.iter().enumerate() {
                    let idx = (ci * CHUNK + j) as u64;
                    let mut drop = self.dropout(train_mode, splitmix(seed ^ splitmix(idx)));
                    let (logits, cache) = self.forward_cached(&ex.src, &ex.tgt_in, proj, &mut drop)?;
                    let (s, _, dl) = smoothed_loss_rows(
                        &logits,
                        self.config.vocab_size,
                        &ex.tgt_out,
                        smoothing,
                        pad_id,
                        Some(scale),
                    );
                    loss += s;
                    self.backward(&cache, &dl, proj, &mut g, &mut gp);
                }
                Ok((loss, g, gp))
            })
            .collect();

        let mut grads = vec![T::zero(); self.params.len()];
        let mut gproj = vec![T::zero(); n_embed];
        let mut loss = 0.0;
        for part in partials {
            let (l, g, gp) = part?;
            loss += l;
            add_assign(&mut grads, &g);
            add_assign(&mut gproj, &gp);
        }
        Ok((
            BatchGradients {
                loss: loss * scale,
                tokens: total_tokens,
                grads,
            },
            gproj,
        ))
    }
}
