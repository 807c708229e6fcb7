//! In-memory sample types shared by the model, training and protocol code.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary label space: inner-race versus outer-race fault.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultLabel {
    Inner = 0,
    Outer = 1,
}

impl FaultLabel {
    pub const ALL: [FaultLabel; 2] = [FaultLabel::Inner, FaultLabel::Outer];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(FaultLabel::Inner),
            1 => Ok(FaultLabel::Outer),
            _ => Err(Error::Data(format!("label index {i} is outside {{0, 1}}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FaultLabel::Inner => "inner",
            FaultLabel::Outer => "outer",
        }
    }
}

impl fmt::Display for FaultLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaultLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inner" | "inner_race" | "ir" | "0" => Ok(FaultLabel::Inner),
            "outer" | "outer_race" | "or" | "1" => Ok(FaultLabel::Outer),
            _ => Err(Error::Data(format!("unknown fault label {s:?}"))),
        }
    }
}

/// One fixed-length vibration window.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSegment {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub label: FaultLabel,
    pub domain: String,
}

impl SignalSegment {
    pub fn window(&self) -> usize {
        self.samples.len()
    }
}

/// Counts per label: `[inner, outer]`.
pub fn label_counts(segments: &[SignalSegment]) -> [usize; 2] {
    let mut c = [0; 2];
    for s in segments {
        c[s.label.index()] += 1;
    }
    c
}

pub fn labels_of(segments: &[&SignalSegment]) -> Vec<usize> {
    segments.iter().map(|s| s.label.index()).collect()
}
