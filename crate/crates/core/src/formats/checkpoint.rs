use std::path::Path;

use super::{put_f32s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TSCK";
const VERSION: u32 = 1;

/// A model configuration with its parameters, as stored in a TSCK file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    /// The stored parameters, provided they fit `config`.
    pub fn params_for(&self, config: &ModelConfig) -> Result<&ModelParams> {
        self.params.check_compatible(config)?;
        Ok(&self.params)
    }
}

/// Serialize parameters then buffers, each in name order, as 32-bit floats.
pub fn write_checkpoint(params: &ModelParams, config: &ModelConfig) -> Result<Vec<u8>> {
    params.check_compatible(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let text = config.to_kv_text();
    put_u32(&mut out, to_u32(text.len(), "config block length")?);
    out.extend_from_slice(text.as_bytes());
    let entries: Vec<_> = params.entries().collect();
    put_u32(&mut out, to_u32(entries.len(), "entry count")?);
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank of `{name}` too large")))?);
        for &d in t.shape() {
            put_u32(&mut out, to_u32(d, "dimension")?);
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "TSCK");
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let text_len = r.u32()? as usize;
    let text = r.string(text_len)?;
    let config = ModelConfig::from_kv_text(&text)?;
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("TSCK: shape of `{name}` overflows")))?;
        let data = r.f32s(numel)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("TSCK: `{name}`: {e}")))?;
        entries.push((name, t));
    }
    r.finish()?;
    let params = ModelParams::from_entries(&config, entries)?;
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, write_checkpoint(params, config)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}
