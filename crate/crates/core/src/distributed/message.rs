//! Wire encoding of configuration batches and small numeric vectors.
//!
//! A batch is a little-endian `u32` entry count followed by, per entry:
//! `u16` key length and key bytes, `u16` window length `L`, `L × u16`
//! forward states, `L × u16` backward states, then weight and sum as
//! `f64` re/im pairs.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::pathstore::{masked_key, Configuration, Mask, PathKey};

/// One decoded batch entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeEntry {
    pub key: PathKey,
    pub config: Configuration,
}

/// A serialized batch of configurations with their masked keys.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeMessage {
    pub entries: Vec<MergeEntry>,
}

impl MergeMessage {
    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Writer::with_entries(self.entries.len());
        for e in &self.entries {
            w.entry(&e.key, &e.config);
        }
        w.finish()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(bytes.len() / 40));
        for _ in 0..n {
            let klen = r.u16()? as usize;
            let key = PathKey::from_slice(r.take(klen)?);
            let len = r.u16()? as usize;
            if len == 0 {
                return Err(Error::Wire("empty path window".into()));
            }
            let mut states = vec![0u8; 2 * len];
            for side in 0..2 {
                for k in 0..len {
                    let s = r.u16()?;
                    states[2 * k + side] = u8::try_from(s)
                        .ok()
                        .filter(|&s| (s as usize) < crate::pathstore::MAX_STATES)
                        .ok_or_else(|| Error::Wire(format!("state index {s} out of range")))?;
                }
            }
            let weight = r.complex()?;
            let sum = r.complex()?;
            entries.push(MergeEntry { key, config: Configuration::from_raw(&states, weight, sum) });
        }
        if r.pos != bytes.len() {
            return Err(Error::Wire(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }
}

/// Encodes `configs` directly, keyed on `mask` (empty keys without one).
pub fn encode_configs(configs: &[Configuration], mask: Option<&Mask>, states: usize) -> Vec<u8> {
    let mut w = Writer::with_entries(configs.len());
    for c in configs {
        let key = mask.map(|m| masked_key(c, m, states)).unwrap_or_default();
        w.entry(&key, c);
    }
    w.finish()
}

pub fn decode_configs(bytes: &[u8]) -> Result<Vec<Configuration>> {
    Ok(MergeMessage::deserialize(bytes)?.entries.into_iter().map(|e| e.config).collect())
}

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() & 7 != 0 {
        return Err(Error::Wire(format!("{} bytes is not a whole number of f64s", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn with_entries(n: usize) -> Self {
        let mut buf = Vec::with_capacity(4 + n * 64);
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        Self { buf }
    }

    fn entry(&mut self, key: &[u8], c: &Configuration) {
        let b = &mut self.buf;
        b.extend_from_slice(&(key.len() as u16).to_le_bytes());
        b.extend_from_slice(key);
        let raw = c.raw_states();
        b.extend_from_slice(&(c.len() as u16).to_le_bytes());
        for side in 0..2 {
            for s in raw.iter().skip(side).step_by(2) {
                b.extend_from_slice(&(*s as u16).to_le_bytes());
            }
        }
        for v in [c.weight.re, c.weight.im, c.sum.re, c.sum.im] {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(self) -> Vec<u8> {
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Wire(format!("truncated message: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn complex(&mut self) -> Result<Complex64> {
        Ok(Complex64::new(self.f64()?, self.f64()?))
    }
}
