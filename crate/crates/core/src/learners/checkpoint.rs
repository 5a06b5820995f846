//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//! `b"SKL1"`, head code `u8`, dropout `f64`, layer count `u32`,
//! `layer count + 1` dims as `u32`, then per layer the `outputs × inputs`
//! weights followed by the biases as `f64`.

use std::path::Path;

use super::mlp::{Dense, Head, Mlp};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SKL1";

pub fn encode(m: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.param_count());
    out.extend_from_slice(MAGIC);
    out.push(m.head().code());
    out.extend_from_slice(&m.dropout().to_le_bytes());
    out.extend_from_slice(&(m.layers().len() as u32).to_le_bytes());
    out.extend_from_slice(&(m.input_dim() as u32).to_le_bytes());
    for l in m.layers() {
        out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
    }
    for v in m.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.bytes.len() < N {
            return Err(Error::format("checkpoint", self.path, "truncated"));
        }
        let (head, rest) = self.bytes.split_at(N);
        self.bytes = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Mlp> {
    let mut r = Reader { bytes, path };
    if &r.take::<4>()? != MAGIC {
        return Err(Error::format("checkpoint", path, "bad magic"));
    }
    let [code] = r.take::<1>()?;
    let head = Head::from_code(code).ok_or_else(|| Error::format("checkpoint", path, format!("unknown head {code}")))?;
    let dropout = r.f64()?;
    let count = r.u32()?;
    if count == 0 || count > 64 {
        return Err(Error::format("checkpoint", path, format!("implausible layer count {count}")));
    }
    let dims = (0..=count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(count);
    for d in dims.windows(2) {
        let mut layer = Dense::zeros(d[0], d[1]);
        if r.bytes.len() < 8 * (layer.weights.len() + layer.biases.len()) {
            return Err(Error::format("checkpoint", path, "truncated"));
        }
        for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            *w = r.f64()?;
        }
        layers.push(layer);
    }
    if !r.bytes.is_empty() {
        return Err(Error::format("checkpoint", path, "trailing bytes"));
    }
    Mlp::from_layers(layers, head, dropout).map_err(|e| Error::format("checkpoint", path, e.to_string()))
}

pub fn save(m: &Mlp, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(m))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Mlp> {
    decode(&std::fs::read(path)?, path)
}
