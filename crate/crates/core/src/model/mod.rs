//! Transformer encoder-decoder with tied embeddings, Swish feed-forward
//! layers, pre-layer-norm residual blocks and exact reverse-mode gradients.
//!
//! All parameters live in one flat buffer described by a [`Layout`]. The
//! shared embedding matrix is a single region of that buffer, read both by
//! the encoder/decoder lookups and by the output projection.

mod checkpoint;
mod incremental;
mod loss;
pub(crate) mod ops;
mod transformer;

use std::fmt::Debug;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, OptimizerSnapshot};
pub use incremental::{DecoderState, Memory};
pub use loss::{label_smoothed_loss, label_smoothing_floor};
pub use ops::{log_softmax, sigmoid, swish};
pub use transformer::{BatchGradients, Example, ForwardOutput};
pub(crate) use transformer::splitmix;

/// Floating-point element type of a model.
pub trait Scalar:
    num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    const NAME: &'static str;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: 2+2 layers, width 64, 4 heads.
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 512,
            dropout: 0.1,
            max_positions: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.heads,
            self.d_model,
            self.d_ff,
            self.vocab_size,
            self.max_positions,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be >= 1"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let norm = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let enc = 2 * norm + attn + ffn;
        let dec = 3 * norm + 2 * attn + ffn;
        v * d + v + self.enc_layers * enc + norm + self.dec_layers * dec + norm
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LinearIdx {
    pub fn w_range(&self) -> Range<usize> {
        self.w..self.w + self.fan_in * self.fan_out
    }
    pub fn b_range(&self) -> Range<usize> {
        self.b..self.b + self.fan_out
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub g: usize,
    pub b: usize,
    pub d: usize,
}

impl NormIdx {
    pub fn g_range(&self) -> Range<usize> {
        self.g..self.g + self.d
    }
    pub fn b_range(&self) -> Range<usize> {
        self.b..self.b + self.d
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub l1: LinearIdx,
    pub l2: LinearIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIdx {
    pub ln1: NormIdx,
    pub attn: AttnIdx,
    pub ln2: NormIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIdx {
    pub ln1: NormIdx,
    pub self_attn: AttnIdx,
    pub ln2: NormIdx,
    pub cross_attn: AttnIdx,
    pub ln3: NormIdx,
    pub ffn: FfnIdx,
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) embed: usize,
    pub(crate) out_bias: usize,
    pub(crate) enc: Vec<EncLayerIdx>,
    pub(crate) enc_norm: NormIdx,
    pub(crate) dec: Vec<DecLayerIdx>,
    pub(crate) dec_norm: NormIdx,
    total: usize,
    /// `(name, range, fan_in, fan_out)` in buffer order; fans are zero for
    /// tensors that are not initialized randomly.
    tensors: Vec<(String, Range<usize>, usize, usize)>,
}

struct Builder {
    off: usize,
    tensors: Vec<(String, Range<usize>, usize, usize)>,
}

impl Builder {
    fn alloc(&mut self, name: String, len: usize, fan_in: usize, fan_out: usize) -> usize {
        let start = self.off;
        self.off += len;
        self.tensors.push((name, start..self.off, fan_in, fan_out));
        start
    }
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        let w = self.alloc(format!("{name}.w"), fan_in * fan_out, fan_in, fan_out);
        let b = self.alloc(format!("{name}.b"), fan_out, 0, 0);
        LinearIdx { w, b, fan_in, fan_out }
    }
    fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        let g = self.alloc(format!("{name}.gamma"), d, 0, 0);
        let b = self.alloc(format!("{name}.beta"), d, 0, 0);
        NormIdx { g, b, d }
    }
    fn attn(&mut self, name: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }
    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            l1: self.linear(&format!("{name}.ff1"), d, f),
            l2: self.linear(&format!("{name}.ff2"), f, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut b = Builder {
            off: 0,
            tensors: Vec::new(),
        };
        let embed = b.alloc("embedding".into(), v * d, v, d);
        let out_bias = b.alloc("output.b".into(), v, 0, 0);
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncLayerIdx {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    attn: b.attn(&format!("{p}.self"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    ffn: b.ffn(&p, d, f),
                }
            })
            .collect();
        let enc_norm = b.norm("enc.final", d);
        let dec = (0..cfg.dec_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecLayerIdx {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    self_attn: b.attn(&format!("{p}.self"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    cross_attn: b.attn(&format!("{p}.cross"), d),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                    ffn: b.ffn(&p, d, f),
                }
            })
            .collect();
        let dec_norm = b.norm("dec.final", d);
        Layout {
            embed,
            out_bias,
            enc,
            enc_norm,
            dec,
            dec_norm,
            total: b.off,
            tensors: b.tensors,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Named tensor ranges in buffer order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, Range<usize>)> {
        self.tensors.iter().map(|(n, r, _, _)| (n.as_str(), r.clone()))
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel<T: Scalar> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<T>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains.
    /// Deterministic under `seed`; f32 and f64 models built from the same
    /// seed agree up to rounding.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, range, fan_in, fan_out) in &layout.tensors {
            if *fan_in > 0 {
                let a = (6.0 / (*fan_in + *fan_out) as f64).sqrt();
                for p in &mut params[range.clone()] {
                    *p = ops::c(rng.gen_range(-a..a));
                }
            } else if name.ends_with(".gamma") {
                params[range.clone()].iter_mut().for_each(|p| *p = T::one());
            }
        }
        Ok(TransformerModel {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch {
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(TransformerModel {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn embed_range(&self) -> Range<usize> {
        self.layout.embed..self.layout.embed + self.config.vocab_size * self.config.d_model
    }

    /// Shared `vocab × d_model` embedding matrix.
    pub fn embedding(&self) -> &[T] {
        &self.params[self.embed_range()]
    }

    pub fn embedding_mut(&mut self) -> &mut [T] {
        let r = self.embed_range();
        &mut self.params[r]
    }

    /// Output projection; the same storage as [`embedding`](Self::embedding).
    pub fn output_projection(&self) -> &[T] {
        self.embedding()
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| U::from(*p).expect("finite parameter"))
                .collect(),
        }
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_positions {
            return Err(Error::LengthOverflow {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}
