//! `YSEG1` segment files: magic, window (u32 LE), count (u32 LE), then
//! `count * window` f64 LE samples. Labels and domains live in the manifest.

use std::path::Path;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 5] = b"YSEG1";
pub const HEADER_LEN: u64 = 13;

/// Byte offset of segment `i`.
pub fn offset_of(window: usize, i: usize) -> u64 {
    HEADER_LEN + (i * window * 8) as u64
}

pub fn encode<'a>(window: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> std::result::Result<Vec<u8>, String> {
    let w = u32::try_from(window).map_err(|_| format!("window {window} does not fit in u32"))?;
    let mut body = Vec::new();
    let mut count: u32 = 0;
    for row in rows {
        if row.len() != window {
            return Err(format!("segment {count} has {} samples, expected {window}", row.len()));
        }
        for v in row {
            body.extend_from_slice(&v.to_le_bytes());
        }
        count = count.checked_add(1).ok_or("more than u32::MAX segments")?;
    }
    let mut out = Vec::with_capacity(HEADER_LEN as usize + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Parsed header plus the sample bytes.
#[derive(Debug)]
pub struct SegFile<'a> {
    pub window: usize,
    pub count: usize,
    bytes: &'a [u8],
}

impl<'a> SegFile<'a> {
    pub fn parse(bytes: &'a [u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN as usize || &bytes[..5] != MAGIC {
            return Err("not a YSEG1 segment file".to_string());
        }
        let window = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let count = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        let want = HEADER_LEN as usize + count * window * 8;
        if bytes.len() != want {
            return Err(format!("file holds {} bytes, header implies {want}", bytes.len()));
        }
        Ok(Self { window, count, bytes })
    }

    /// Samples stored at byte `offset`, which must be a segment boundary.
    pub fn at_offset(&self, offset: u64) -> std::result::Result<Vec<f64>, String> {
        let rel = offset
            .checked_sub(HEADER_LEN)
            .filter(|r| self.window > 0 && r % (self.window as u64 * 8) == 0)
            .ok_or_else(|| format!("offset {offset} is not a segment boundary"))?;
        let i = (rel / (self.window as u64 * 8)) as usize;
        if i >= self.count {
            return Err(format!("offset {offset} lies past the last segment"));
        }
        Ok(self.row(i))
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        let start = HEADER_LEN as usize + i * self.window * 8;
        self.bytes[start..start + self.window * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.count).map(|i| self.row(i)).collect()
    }
}

pub fn write_file<'a>(path: &Path, window: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
    let bytes = encode(window, rows).map_err(|m| CliError::format(path, m))?;
    crate::error::write(path, bytes)
}
