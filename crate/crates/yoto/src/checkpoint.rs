//! `YOTO1` checkpoints: magic, then per parameter the name length (u32 LE),
//! UTF-8 name, rank (u32 LE), extents (u64 LE each) and values (f64 LE).
//! The model configuration is kept in a JSON file beside it.

use std::path::{Path, PathBuf};

use yoto_core::model::{Model, ModelConfig};
use yoto_core::Tensor;

use crate::error::{self, CliError, Result};
use crate::manifest::write_json;

pub const MAGIC: &[u8; 5] = b"YOTO1";

pub fn encode(named: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    if bytes.len() < 5 || &bytes[..5] != MAGIC {
        return Err("not a YOTO1 checkpoint".into());
    }
    let mut r = Reader { bytes, pos: 5 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| format!("parameter name: {e}"))?.to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| "extent overflows usize".to_string())?);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or("tensor too large")?;
        let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Path of the configuration file accompanying a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    error::write(path, encode(&model.named_tensors()))?;
    write_json(&config_path(path), model.config())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let cfg_path = config_path(path);
    let cfg: ModelConfig =
        serde_json::from_slice(&error::read(&cfg_path)?).map_err(|e| CliError::config(&cfg_path, e.to_string()))?;
    let named = decode(&error::read(path)?).map_err(|m| CliError::format(path, m))?;
    let mut model = Model::new(cfg, 0)?;
    model.load_named(&named)?;
    Ok(model)
}
