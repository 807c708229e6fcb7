//! CSV tables and the JSON run summary.

use serde::{Deserialize, Serialize};
use yoto_core::model::{ModelConfig, Variant};
use yoto_core::objective::LossWeights;
use yoto_core::protocol::{AblationRow, MetricsReport, ScalingRow};
use yoto_core::train::{TrainConfig, TrainLog};

pub const SPLIT_HEADER: &str = "split_id,train_domains,test_domains,variant,f1_inner,f1_outer,f1_avg";
pub const LOG_HEADER: &str = "epoch,step,main,aux,gate,total";

/// Serializes records with a header row taken from the field names.
pub fn csv_string<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV write");
    }
    let s = String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8");
    if s.is_empty() {
        // the header only appears with the first record
        return String::new();
    }
    s
}

#[derive(Serialize)]
struct SplitRow<'a> {
    split_id: usize,
    train_domains: String,
    test_domains: String,
    variant: &'a str,
    f1_inner: f64,
    f1_outer: f64,
    f1_avg: f64,
}

pub fn split_csv(reports: &[MetricsReport]) -> String {
    let rows: Vec<SplitRow> = reports
        .iter()
        .map(|r| SplitRow {
            split_id: r.split_id,
            train_domains: r.split.train_label(),
            test_domains: r.split.test_label(),
            variant: r.variant.name(),
            f1_inner: r.per_class_f1[0],
            f1_outer: r.per_class_f1[1],
            f1_avg: r.sample_avg_f1,
        })
        .collect();
    with_header(csv_string(&rows), SPLIT_HEADER)
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    step: usize,
    main: f64,
    aux: f64,
    gate: f64,
    total: f64,
}

pub fn log_csv(log: &TrainLog) -> String {
    let rows: Vec<LogRow> = log
        .steps
        .iter()
        .map(|s| LogRow {
            epoch: s.epoch,
            step: s.step,
            main: s.report.main,
            aux: s.report.aux,
            gate: s.report.gate,
            total: s.report.total,
        })
        .collect();
    with_header(csv_string(&rows), LOG_HEADER)
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    with_header(csv_string(rows), "task,mean_f1,count")
}

/// One row per split: each variant's F1, the best variant and Full's gap to it.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["split_id".to_string(), "test_domains".to_string()];
    header.extend(Variant::ALL.iter().map(|v| v.name().to_string()));
    header.extend(["best".to_string(), "full_vs_best".to_string()]);
    w.write_record(&header).expect("in-memory CSV write");
    for r in rows {
        let mut rec = vec![r.split_id.to_string(), r.test_domains.clone()];
        for v in Variant::ALL {
            rec.push(r.scores.iter().find(|(x, _)| *x == v).map(|(_, f)| f.to_string()).unwrap_or_default());
        }
        rec.push(r.best.name().to_string());
        rec.push(r.full_vs_best.to_string());
        w.write_record(&rec).expect("in-memory CSV write");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
}

fn with_header(body: String, header: &str) -> String {
    if body.is_empty() {
        format!("{header}\n")
    } else {
        body
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub split_id: usize,
    pub variant: Variant,
    pub error: String,
}

/// Run settings recorded with every summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub header: RunHeader,
    pub n_reports: usize,
    /// Present when every split of the enumeration has a report.
    pub scaling: Option<Vec<ScalingRow>>,
    pub ablation: Vec<AblationRow>,
    pub failures: Vec<Failure>,
}

/// Text rendering of the scaling table for the terminal.
pub fn scaling_table(rows: &[ScalingRow]) -> String {
    let mut s = String::from("task  splits  mean_f1\n");
    for r in rows {
        s.push_str(&format!("{:>4}  {:>6}  {:.4}\n", r.task, r.count, r.mean_f1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use yoto_core::protocol::{Confusion, SplitSpec};

    fn report() -> MetricsReport {
        MetricsReport {
            split_id: 3,
            split: SplitSpec::new(&["a"], &["b", "c"]),
            variant: Variant::NoFft,
            seed: 1,
            confusion: Confusion::default(),
            per_class_f1: [0.5, 0.25],
            sample_avg_f1: 0.375,
            gate_utilization: vec![],
            per_domain: vec![],
            test_domain_updates: 0,
        }
    }

    #[test]
    fn split_csv_layout() {
        let s = split_csv(&[report()]);
        assert_eq!(s, format!("{SPLIT_HEADER}\n3,a,b+c,NoFFT,0.5,0.25,0.375\n"));
        assert_eq!(split_csv(&[]), format!("{SPLIT_HEADER}\n"));
    }

    #[test]
    fn log_csv_header() {
        assert_eq!(log_csv(&TrainLog::default()), format!("{LOG_HEADER}\n"));
    }

    #[test]
    fn ablation_csv_has_a_column_per_variant() {
        let rows = yoto_core::protocol::ablation_summary(&[report()]);
        let s = ablation_csv(&rows);
        let mut lines = s.lines();
        assert_eq!(
            lines.next().unwrap(),
            "split_id,test_domains,Full,RandomExpert,NoBalance,AvgFusion,NoFFT,NoDualAttn,best,full_vs_best"
        );
        assert_eq!(lines.next().unwrap(), "3,b+c,,,,,0.375,,NoFFT,NaN");
    }
}
