//! Binary checkpoint format.
//!
//! ```text
//! "ROBAD" | version u8 | config hash u64 LE
//! per tensor: name_len u16 LE | name | rank u8 | dims u32 LE × rank | values f32 LE
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"ROBAD";
pub const VERSION: u8 = 1;

pub fn checkpoint_bytes(params: &ModelParams, cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&cfg.shape_hash().to_le_bytes());
    for (name, t) in params.named() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Parses a checkpoint and checks it against `cfg`. Nothing is returned
/// unless every tensor is present with the expected shape.
pub fn parse_checkpoint(bytes: &[u8], cfg: &ModelConfig) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.array::<1>()?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hash = u64::from_le_bytes(r.array()?);
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    while r.pos < bytes.len() {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array()?) as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let raw = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = r
            .take(raw)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if hash != cfg.shape_hash() {
        return Err(Error::Compatibility(format!(
            "config hash {hash:016x} does not match {:016x}",
            cfg.shape_hash()
        )));
    }
    let shapes = param_shapes(cfg);
    let mut missing = Vec::new();
    let params = shapes.map(|name, shape| match tensors.remove(name) {
        Some(t) if t.shape() == shape.as_slice() => t,
        Some(t) => {
            missing.push(format!("{name} has shape {:?}, expected {shape:?}", t.shape()));
            Tensor::zeros(shape)
        }
        None => {
            missing.push(format!("{name} missing"));
            Tensor::zeros(shape)
        }
    });
    if let Some(extra) = tensors.keys().min() {
        missing.push(format!("unexpected tensor {extra}"));
    }
    if !missing.is_empty() {
        return Err(Error::Compatibility(missing.join("; ")));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(params, cfg)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, cfg)
}
