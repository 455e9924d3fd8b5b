//! Binary weights file.
//!
//! Layout (little endian): `b"CDNW"`, `u8` version, `u32` input_dim,
//! `u32` stage count, one `u32` per encoder width, `u32` kernel, `f64`
//! dropout rate, then every layer's `f32` weights followed by its biases in
//! [`NetworkConfig::layer_plan`] order.

use std::fs;
use std::path::Path;

use super::{NetworkConfig, NetworkWeights};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CDNW";
const VERSION: u8 = 1;

pub fn encode_weights(w: &NetworkWeights<f32>) -> Vec<u8> {
    let c = &w.config;
    let mut out = Vec::with_capacity(64 + 4 * w.param_count());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(c.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(c.encoder_channels.len() as u32).to_le_bytes());
    for &ch in &c.encoder_channels {
        out.extend_from_slice(&(ch as u32).to_le_bytes());
    }
    out.extend_from_slice(&(c.kernel as u32).to_le_bytes());
    out.extend_from_slice(&c.dropout_rate.to_le_bytes());
    for l in &w.layers {
        for v in l.weight.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("weights truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_weights(buf: &[u8]) -> Result<NetworkWeights<f32>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a weights file".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let input_dim = r.u32()?;
    let stages = r.u32()?;
    if stages > 16 {
        return Err(Error::Format(format!("implausible stage count {stages}")));
    }
    let encoder_channels = (0..stages).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let kernel = r.u32()?;
    let dropout_rate = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let config = NetworkConfig { input_dim, encoder_channels, kernel, dropout_rate };
    let mut w = NetworkWeights::zeros(&config).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    for l in &mut w.layers {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(w)
}

pub fn save_weights(w: &NetworkWeights<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(w))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights<f32>> {
    decode_weights(&fs::read(path)?)
}
