//! Binary checkpoint, little-endian:
//!
//! ```text
//! "MGTC" | version u32 | tensor count u32
//! per tensor: name length u16 | UTF-8 name | ndim u8 | dims u32 x ndim | f64 data
//! text length u32 | UTF-8 key=value block (model and training settings)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::{parse_pairs, render_pairs};
use crate::error::{Error, Result};
use crate::model::{MgtModel, ModelConfig};

use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MGTC";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &MgtModel, train: &TrainConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut pairs = model.config().to_pairs();
    pairs.extend(train.to_pairs());
    let text = render_pairs(&pairs);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: start as u64,
            detail: format!("{what} is not UTF-8"),
        })
    }
}

/// Decodes a checkpoint into a model and the training settings it was
/// produced with.
pub fn from_bytes(bytes: &[u8]) -> Result<(MgtModel, TrainConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, not an MGTC checkpoint".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = r.utf8(len, "tensor name")?;
        let ndim = r.u8("rank")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(dims, data).map_err(|e| r.err(e.to_string()))?));
    }
    let text_len = r.u32("settings length")? as usize;
    let text = r.utf8(text_len, "settings block")?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after settings block"));
    }
    let mut pairs: BTreeMap<String, String> = parse_pairs(&text)?;
    let config = ModelConfig::from_pairs(&mut pairs)?;
    let train = TrainConfig::from_pairs(&mut pairs)?;
    if let Some(k) = pairs.keys().next() {
        return Err(Error::config(format!("unknown checkpoint setting `{k}`")));
    }
    let mut model = MgtModel::new(config, 0)?;
    model.params.load_from(&tensors)?;
    Ok((model, train))
}

pub fn save(path: &Path, model: &MgtModel, train: &TrainConfig) -> Result<()> {
    std::fs::write(path, to_bytes(model, train)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(MgtModel, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
}
