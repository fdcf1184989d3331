//! Versioned binary checkpoint container.
//!
//! Layout (little endian): 8-byte magic, precision byte, model config,
//! training step, parameters as `f64`, optional optimizer moments, and a
//! length-prefixed UTF-8 blob for trainer bookkeeping.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, Scalar, TransformerModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTCKPT\x00\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: TransformerModel<T>,
    pub step: u64,
    pub optimizer: Option<OptimizerSnapshot>,
    /// Free-form `key=value` lines owned by the trainer.
    pub extra: String,
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, xs: impl Iterator<Item = f64>) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(b)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: TransformerModel<T>) -> Self {
        Checkpoint {
            model,
            step: 0,
            optimizer: None,
            extra: String::new(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let cfg = self.model.config();
        w.write_all(MAGIC)?;
        w.write_all(&[std::mem::size_of::<T>() as u8])?;
        for v in [
            cfg.enc_layers,
            cfg.dec_layers,
            cfg.heads,
            cfg.d_model,
            cfg.d_ff,
            cfg.vocab_size,
            cfg.max_positions,
        ] {
            put_u64(&mut w, v as u64)?;
        }
        w.write_all(&cfg.dropout.to_le_bytes())?;
        put_u64(&mut w, self.step)?;
        let params = self.model.params();
        put_u64(&mut w, params.len() as u64)?;
        put_f64s(&mut w, params.iter().map(|p| p.to_f64().unwrap_or(f64::NAN)))?;
        match &self.optimizer {
            Some(opt) => {
                w.write_all(&[1])?;
                put_u64(&mut w, opt.t)?;
                put_f64s(&mut w, opt.m.iter().copied())?;
                put_f64s(&mut w, opt.v.iter().copied())?;
            }
            None => w.write_all(&[0])?,
        }
        put_u64(&mut w, self.extra.len() as u64)?;
        w.write_all(self.extra.as_bytes())?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader { r };
        if &r.bytes::<8>()? != MAGIC {
            return Err(Error::Checkpoint("bad magic header or unsupported version".into()));
        }
        let [_precision] = r.bytes::<1>()?;
        let config = ModelConfig {
            enc_layers: r.usize()?,
            dec_layers: r.usize()?,
            heads: r.usize()?,
            d_model: r.usize()?,
            d_ff: r.usize()?,
            vocab_size: r.usize()?,
            max_positions: r.usize()?,
            dropout: r.f64()?,
        };
        config.validate()?;
        let step = r.u64()?;
        let n = r.usize()?;
        if n != config.parameter_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {n} does not match config ({})",
                config.parameter_count()
            )));
        }
        let params = r
            .f64s(n)?
            .into_iter()
            .map(|x| T::from(x).ok_or_else(|| Error::Checkpoint("unrepresentable value".into())))
            .collect::<Result<Vec<T>>>()?;
        let model = TransformerModel::from_params(config, params)?;
        let optimizer = match r.bytes::<1>()? {
            [0] => None,
            [1] => {
                let t = r.u64()?;
                let m = r.f64s(n)?;
                let v = r.f64s(n)?;
                Some(OptimizerSnapshot { t, m, v })
            }
            _ => return Err(Error::Checkpoint("bad optimizer flag".into())),
        };
        let len = r.usize()?;
        let mut extra = vec![0u8; len];
        r.r.read_exact(&mut extra)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        let extra = String::from_utf8(extra).map_err(|_| Error::Checkpoint("extra blob is not UTF-8".into()))?;
        Ok(Checkpoint {
            model,
            step,
            optimizer,
            extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
