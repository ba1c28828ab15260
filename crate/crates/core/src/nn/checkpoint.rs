//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `SADC`, `u32` version, `u32` layer count,
//! `u32` encoder layer count, then per layer `u64` rows, `u64` cols,
//! `u8` activation tag, row-major `f64` weights and the `f64` bias vector.
//! Encoder layers come first, decoder layers after.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::mlp::{Activation, Layer, Mlp};
use super::train::Autoencoder;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SADC";
const VERSION: u32 = 1;

pub fn encode(ae: &Autoencoder) -> Vec<u8> {
    let layers: Vec<&Layer> = ae.encoder.layers.iter().chain(&ae.decoder.layers).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ae.encoder.layers.len() as u32).to_le_bytes());
    for l in layers {
        let (r, c) = l.weight.shape();
        out.extend_from_slice(&(r as u64).to_le_bytes());
        out.extend_from_slice(&(c as u64).to_le_bytes());
        out.push(l.activation.tag());
        for i in 0..r {
            for j in 0..c {
                out.extend_from_slice(&l.weight[(i, j)].to_le_bytes());
            }
        }
        for v in l.bias.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::input("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Autoencoder> {
    let mut rd = Reader { buf, pos: 0 };
    if rd.take(4)? != MAGIC {
        return Err(Error::input("not a checkpoint (bad magic)"));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::input(format!("unsupported checkpoint version {version}")));
    }
    let count = rd.u32()? as usize;
    let enc_count = rd.u32()? as usize;
    if enc_count == 0 || enc_count >= count {
        return Err(Error::input("checkpoint must hold a non-empty encoder and decoder"));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rd.u64()? as usize;
        let c = rd.u64()? as usize;
        let tag = rd.take(1)?[0];
        let activation =
            Activation::from_tag(tag).ok_or_else(|| Error::input(format!("unknown activation tag {tag}")))?;
        if r.checked_mul(c).is_none_or(|n| n.saturating_mul(8) > buf.len()) {
            return Err(Error::input("checkpoint layer dimensions exceed file size"));
        }
        let mut weight = DMatrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                weight[(i, j)] = rd.f64()?;
            }
        }
        let mut bias = DVector::zeros(r);
        for i in 0..r {
            bias[i] = rd.f64()?;
        }
        layers.push(Layer {
            weight,
            bias,
            activation,
        });
    }
    if rd.pos != buf.len() {
        return Err(Error::input("trailing bytes after checkpoint"));
    }
    let decoder = layers.split_off(enc_count);
    let ae = Autoencoder {
        encoder: Mlp::from_layers(layers)?,
        decoder: Mlp::from_layers(decoder)?,
    };
    if ae.encoder.output_dim() != ae.decoder.input_dim() {
        return Err(Error::input("encoder output does not feed decoder input"));
    }
    Ok(ae)
}

pub fn save(path: impl AsRef<Path>, ae: &Autoencoder) -> Result<()> {
    fs::write(path, encode(ae))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Autoencoder> {
    decode(&fs::read(path)?)
}
