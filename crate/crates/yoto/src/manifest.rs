//! Per-domain JSON manifests next to their `YSEG1` sample files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use yoto_core::data::{FaultLabel, SignalSegment};
use yoto_core::protocol::DomainData;
use yoto_core::signal::TARGET_RATE_HZ;
use yoto_core::Error as CoreError;

use crate::error::{self, CliError, Result};
use crate::segfile::{self, SegFile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    /// Byte offset of the segment in the data file.
    pub offset: u64,
    pub label: FaultLabel,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub window: usize,
    pub sample_rate: f64,
    pub created_with_seed: Option<u64>,
    /// Sample file name, relative to the manifest's directory.
    pub data_file: String,
    pub segments: Vec<SegmentEntry>,
}

impl DatasetManifest {
    pub fn label_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for s in &self.segments {
            c[s.label.index()] += 1;
        }
        c
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.window == 0 {
            return Err("window must be positive".into());
        }
        if self.sample_rate != TARGET_RATE_HZ {
            return Err(format!("sample_rate {} differs from {TARGET_RATE_HZ}", self.sample_rate));
        }
        for w in self.segments.windows(2) {
            if w[1].offset <= w[0].offset {
                return Err(format!("offsets not strictly increasing at {}", w[1].offset));
            }
        }
        Ok(())
    }
}

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

/// Writes `<dir>/<name>.yseg` and `<dir>/<name>.json`.
pub fn write_dataset(dir: &Path, name: &str, segments: &[SignalSegment], seed: Option<u64>) -> Result<DatasetManifest> {
    let window = segments.first().map(|s| s.window()).unwrap_or(0);
    let data_file = format!("{name}.yseg");
    segfile::write_file(&dir.join(&data_file), window, segments.iter().map(|s| s.samples.as_slice()))?;
    let manifest = DatasetManifest {
        name: name.to_string(),
        window,
        sample_rate: TARGET_RATE_HZ,
        created_with_seed: seed,
        data_file,
        segments: segments
            .iter()
            .enumerate()
            .map(|(i, s)| SegmentEntry {
                offset: segfile::offset_of(window, i),
                label: s.label,
                domain: s.domain.clone(),
            })
            .collect(),
    };
    let path = manifest_path(dir, name);
    manifest.validate().map_err(|m| CliError::format(&path, m))?;
    write_json(&path, &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = error::read(path)?;
    let m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e.to_string()))?;
    m.validate().map_err(|msg| CliError::format(path, msg))?;
    Ok(m)
}

/// Reads a manifest and every segment it lists, checking the sample file
/// against it in full.
pub fn load_dataset(dir: &Path, name: &str) -> Result<(DatasetManifest, Vec<SignalSegment>)> {
    let path = manifest_path(dir, name);
    if !path.exists() {
        return Err(CoreError::Data(format!("no manifest for domain {name} at {}", path.display())).into());
    }
    let m = read_manifest(&path)?;
    let data_path = dir.join(&m.data_file);
    let bytes = error::read(&data_path)?;
    let file = SegFile::parse(&bytes).map_err(|msg| CliError::format(&data_path, msg))?;
    if file.window != m.window || file.count != m.segments.len() {
        return Err(CliError::format(
            &data_path,
            format!(
                "holds {} segments of {} samples, manifest lists {} of {}",
                file.count,
                file.window,
                m.segments.len(),
                m.window
            ),
        ));
    }
    let mut segs = Vec::with_capacity(m.segments.len());
    for e in &m.segments {
        let samples = file.at_offset(e.offset).map_err(|msg| CliError::format(&data_path, msg))?;
        segs.push(SignalSegment {
            samples,
            sample_rate: m.sample_rate,
            label: e.label,
            domain: e.domain.clone(),
        });
    }
    Ok((m, segs))
}

/// Loads the named domains from `dir`.
pub fn load_domains(dir: &Path, names: &[String]) -> Result<DomainData> {
    let mut out = BTreeMap::new();
    for n in names {
        let (_, segs) = load_dataset(dir, n)?;
        out.insert(n.clone(), segs);
    }
    Ok(out)
}

/// Pretty JSON with a trailing newline; field order follows the type.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    s.push('\n');
    error::write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(label: FaultLabel, v: f64) -> SignalSegment {
        SignalSegment {
            samples: vec![v; 4],
            sample_rate: TARGET_RATE_HZ,
            label,
            domain: "d".into(),
        }
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let segs = vec![seg(FaultLabel::Inner, 1.0), seg(FaultLabel::Outer, 2.0), seg(FaultLabel::Outer, 3.0)];
        let m = write_dataset(dir.path(), "d", &segs, Some(5)).unwrap();
        assert_eq!(read_manifest(&manifest_path(dir.path(), "d")).unwrap(), m);
        let (m2, back) = load_dataset(dir.path(), "d").unwrap();
        assert_eq!(m2, m);
        assert_eq!(back, segs);
        assert_eq!(m.label_counts(), [1, 2]);
    }

    #[test]
    fn missing_domain_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        match load_domains(dir.path(), &["ghost".to_string()]) {
            Err(CliError::Core(CoreError::Data(m))) => assert!(m.contains("ghost")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_sample_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), "d", &[seg(FaultLabel::Inner, 1.0)], None).unwrap();
        let p = dir.path().join("d.yseg");
        let mut b = std::fs::read(&p).unwrap();
        b.pop();
        std::fs::write(&p, b).unwrap();
        assert!(matches!(load_dataset(dir.path(), "d"), Err(CliError::Format { .. })));
    }
}
