//! Binary feature files (`NXF1`) and checkpoints (`NXCK`), little-endian.
//!
//! Feature file: magic, `u32 T`, `u32 F`, `u32` dtype tag (1 = f32), then
//! `T·F` f32 values row-major.
//!
//! Checkpoint: magic, `u32` entry count, then per entry `u16` name length,
//! UTF-8 name, `u8` rank, `rank × u32` dims and the f32 values.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"NXF1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NXCK";
pub const DTYPE_F32: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let mut found = [0u8; 4];
        let got = self.buf.len().min(4);
        found[..got].copy_from_slice(&self.buf[..got]);
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        self.pos = 4;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::InvalidArgument("payload size overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(Error::TrailingBytes(n)),
        }
    }
}

fn push_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
}

/// Serialize a `[T × F]` matrix. Values are stored as f32.
pub fn encode_features(x: &Tensor) -> Result<Vec<u8>> {
    let [t, f] = *x.shape() else {
        return Err(Error::invalid_shape(
            "feature file",
            x.shape(),
            "expected [T, F]",
        ));
    };
    let mut out = Vec::with_capacity(16 + 4 * x.numel());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&to_u32(t, "frames")?.to_le_bytes());
    out.extend_from_slice(&to_u32(f, "feature dim")?.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    push_f32s(&mut out, x.data());
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(FEATURE_MAGIC)?;
    let t = r.u32()? as usize;
    let f = r.u32()? as usize;
    let tag = r.u32()?;
    if tag != DTYPE_F32 {
        return Err(Error::DtypeMismatch(tag));
    }
    let n = t
        .checked_mul(f)
        .ok_or_else(|| Error::InvalidArgument("feature extent overflows".into()))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Tensor::new(&[t, f], data)
}

/// Per-utterance mean and variance normalization of each feature column.
pub fn normalize_utterance(x: &Tensor) -> Tensor {
    let (t, f) = (x.shape()[0], x.shape()[1]);
    if t == 0 {
        return x.clone();
    }
    let mut mean = vec![0.0; f];
    let mut var = vec![0.0; f];
    for r in 0..t {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / t as f64;
        }
    }
    for r in 0..t {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / t as f64;
        }
    }
    Tensor::from_fn(x.shape(), |i| {
        let j = i % f;
        (x.data()[i] - mean[j]) / (var[j] + 1e-10).sqrt()
    })
}

pub fn write_features(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    std::fs::write(path, encode_features(x)?)?;
    Ok(())
}

/// Read a feature file, optionally normalizing it per utterance.
pub fn read_features(path: impl AsRef<Path>, normalize: bool) -> Result<Tensor> {
    let x = decode_features(&std::fs::read(path)?)?;
    Ok(if normalize {
        normalize_utterance(&x)
    } else {
        x
    })
}

pub fn encode_checkpoint(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&to_u32(store.len(), "entry count")?.to_le_bytes());
    for id in store.ids() {
        let name = store.name(id);
        let value = store.get(id)?;
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(value.rank())
            .map_err(|_| Error::InvalidArgument(format!("rank of {name} exceeds u8")))?;
        out.push(rank);
        for &d in value.shape() {
            out.extend_from_slice(&to_u32(d, "extent")?.to_le_bytes());
        }
        push_f32s(&mut out, value.data());
    }
    Ok(out)
}

/// Parsed checkpoint entries in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::InvalidArgument("checkpoint name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::InvalidArgument(format!("extent of {name} overflows")))?;
        let data = r.f32s(n)?;
        entries.push((name, Tensor::new(&shape, data)?));
    }
    r.finish()?;
    Ok(entries)
}

/// Load a checkpoint into `store`, which must have exactly the same names
/// and shapes. Nothing is written unless every entry matches.
pub fn load_checkpoint(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let entries = decode_checkpoint(bytes)?;
    let mut by_name: HashMap<&str, &Tensor> = HashMap::new();
    for (name, t) in &entries {
        if by_name.insert(name, t).is_some() {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                reason: "duplicate entry".into(),
            });
        }
    }
    let mut plan = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id);
        let expected = &store.entries()[id.index()].shape;
        match by_name.remove(name) {
            None => {
                return Err(Error::CheckpointMismatch {
                    name: name.to_string(),
                    reason: "missing from checkpoint".into(),
                })
            }
            Some(t) if t.shape() != expected.as_slice() => {
                return Err(Error::CheckpointMismatch {
                    name: name.to_string(),
                    reason: format!("shape {:?}, model expects {:?}", t.shape(), expected),
                })
            }
            Some(t) => plan.push((id, t.clone())),
        }
    }
    if let Some((name, _)) = entries
        .iter()
        .find(|(n, _)| by_name.contains_key(n.as_str()))
    {
        return Err(Error::CheckpointMismatch {
            name: name.clone(),
            reason: "not a parameter of this model".into(),
        });
    }
    for (id, t) in plan {
        store.set(id, t)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<()> {
    load_checkpoint(store, &std::fs::read(path)?)
}
