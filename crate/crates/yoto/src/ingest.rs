//! Raw recordings to segment files: resample to 25.6 kHz, frame, z-score.
//!
//! A recording is either text (numbers separated by commas, whitespace or
//! newlines; a non-numeric first line is taken as a header) or raw
//! little-endian f64 (`.f64` / `.bin`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use yoto_core::data::{FaultLabel, SignalSegment};
use yoto_core::signal::{resample, segment, zscore, DEFAULT_WINDOW, TARGET_RATE_HZ};

use crate::config::parse_json;
use crate::error::{self, CliError, Result};
use crate::manifest::{write_dataset, DatasetManifest};
use crate::stats::StatsRow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingEntry {
    /// Relative to the spec file's directory.
    pub path: PathBuf,
    /// `inner` or `outer`.
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSpec {
    pub name: String,
    pub from_hz: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Frame step; defaults to `window` (no overlap).
    #[serde(default)]
    pub hop: Option<usize>,
    pub files: Vec<RecordingEntry>,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

impl IngestSpec {
    pub fn load(path: &Path) -> Result<Self> {
        parse_json(path)
    }
}

pub fn read_recording(path: &Path) -> Result<Vec<f64>> {
    let bytes = error::read(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "f64" || ext == "bin" {
        if bytes.len() % 8 != 0 {
            return Err(CliError::format(path, format!("{} bytes is not a whole number of f64 values", bytes.len())));
        }
        return Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
    }
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) => out.extend(v),
            Err(_) if i == 0 => {}
            Err(e) => return Err(CliError::format(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

/// Segments every listed recording; errors name the offending entry.
pub fn ingest_segments(spec: &IngestSpec, base: &Path) -> Result<Vec<SignalSegment>> {
    let hop = spec.hop.unwrap_or(spec.window);
    let mut out = Vec::new();
    for (i, entry) in spec.files.iter().enumerate() {
        let label: FaultLabel = entry.label.parse().map_err(|_| {
            CliError::Usage(format!(
                "files[{i}] ({}): unknown label {:?}; expected inner or outer",
                entry.path.display(),
                entry.label
            ))
        })?;
        let path = base.join(&entry.path);
        let raw = read_recording(&path)?;
        let resampled = resample(&raw, spec.from_hz, TARGET_RATE_HZ)?;
        for frame in segment(&resampled, spec.window, hop)? {
            out.push(SignalSegment {
                samples: zscore(&frame),
                sample_rate: TARGET_RATE_HZ,
                label,
                domain: spec.name.clone(),
            });
        }
    }
    Ok(out)
}

pub fn ingest(spec_path: &Path, out_dir: &Path) -> Result<(DatasetManifest, StatsRow)> {
    let spec = IngestSpec::load(spec_path)?;
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let segs = ingest_segments(&spec, base)?;
    if segs.is_empty() {
        return Err(CliError::config(spec_path, format!("no recording is longer than one window of {}", spec.window)));
    }
    let m = write_dataset(out_dir, &spec.name, &segs, None)?;
    let row = StatsRow::of(&m);
    Ok((m, row))
}
