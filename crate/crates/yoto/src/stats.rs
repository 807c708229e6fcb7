//! Dataset statistics table.

use serde::Serialize;

use crate::manifest::DatasetManifest;

pub const HEADER: &str = "dataset,total,inner,outer,rate_hz";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsRow {
    pub dataset: String,
    pub total: usize,
    pub inner: usize,
    pub outer: usize,
    pub rate_hz: f64,
}

impl StatsRow {
    pub fn of(m: &DatasetManifest) -> Self {
        let [inner, outer] = m.label_counts();
        Self {
            dataset: m.name.clone(),
            total: m.segments.len(),
            inner,
            outer,
            rate_hz: m.sample_rate,
        }
    }
}

pub fn to_csv(rows: &[StatsRow]) -> String {
    crate::report::csv_string(rows)
}
