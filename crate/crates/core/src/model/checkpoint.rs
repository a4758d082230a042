//! `CS2S` checkpoint files.
//!
//! Layout (little-endian): magic `CS2S`, u32 version, u32 length + JSON
//! config block `{"model": .., "pipeline": ..}`, u32 record count, then per
//! parameter: u32 name length + UTF-8 name, u32 rank + u32 extents, f32
//! values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvS2S, ModelConfig};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const CS2S_MAGIC: &[u8; 4] = b"CS2S";
pub const CS2S_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    #[serde(default)]
    pipeline: serde_json::Value,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Input-assembly settings stored alongside the weights.
    pub pipeline: serde_json::Value,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    /// Rebuilds the model. With `expected` set, the stored configuration
    /// must match it exactly.
    pub fn to_model<T: Scalar>(&self, expected: Option<&ModelConfig>) -> Result<ConvS2S<T>> {
        if let Some(exp) = expected {
            if exp != &self.model {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint has {:?}, runtime requested {:?}",
                    self.model, exp
                )));
            }
        }
        let model = ConvS2S::<T>::new(self.model.clone(), 0)?;
        let named = model.named_parameters();
        if named.len() != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter records, found {}",
                named.len(),
                self.params.len()
            )));
        }
        for ((name, tensor), (stored_name, shape, values)) in named.iter().zip(&self.params) {
            if name != stored_name || tensor.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {stored_name} {shape:?} does not match {name} {:?}",
                    tensor.shape()
                )));
            }
            let mut d = tensor.data_mut();
            for (dst, &v) in d.iter_mut().zip(values) {
                *dst = T::lit(v as f64);
            }
        }
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint<T: Scalar>(model: &ConvS2S<T>, pipeline: &serde_json::Value) -> Vec<u8> {
    let block = ConfigBlock {
        model: model.config().clone(),
        pipeline: pipeline.clone(),
    };
    let config = serde_json::to_vec(&block).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CS2S_MAGIC);
    out.extend_from_slice(&CS2S_VERSION.to_le_bytes());
    put_u32(&mut out, config.len());
    out.extend_from_slice(&config);
    let params = model.named_parameters();
    put_u32(&mut out, params.len());
    for (name, t) in &params {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data().iter() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4).ok() != Some(CS2S_MAGIC.as_slice()) {
        return Err(Error::format(path, "bad magic, expected CS2S"));
    }
    let version = r.u32()?;
    if version != CS2S_VERSION as usize {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let len = r.u32()?;
    let block: ConfigBlock = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(path, format!("config block: {e}")))?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| Error::format(path, format!("parameter name: {e}")))?
            .to_owned();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::format(path, "shape overflow"))?,
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, shape, values));
    }
    if r.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last parameter"));
    }
    Ok(Checkpoint {
        model: block.model,
        pipeline: block.pipeline,
        params,
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &ConvS2S<T>,
    pipeline: &serde_json::Value,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, pipeline))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
