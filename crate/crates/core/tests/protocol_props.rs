use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yoto_core::model::{ModelConfig, Variant};
use yoto_core::protocol::{
    ablation_summary, enumerate_splits, f1_scores, run_ablation, run_split, scaling_report, Confusion, DomainData, SplitSpec,
    N_SPLITS,
};
use yoto_core::synth::{separable_domains, synth_domain};
use yoto_core::train::TrainConfig;
use yoto_core::Error;

type Task = (usize, BTreeSet<String>, BTreeSet<String>);

fn fixture() -> Vec<Task> {
    include_str!("fixtures/transfer_tasks.tsv")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            let task = cols[0].trim_start_matches("Task ").parse().unwrap();
            let set = |s: &str| s.split_whitespace().map(String::from).collect();
            (task, set(cols[1]), set(cols[2]))
        })
        .collect()
}

fn as_task(s: &SplitSpec) -> Task {
    (
        s.task(),
        s.train_domains.iter().cloned().collect(),
        s.test_domains.iter().cloned().collect(),
    )
}

#[test]
fn enumeration_matches_transfer_task_table() {
    let names: Vec<String> = ["CWRU", "MFPT", "XJTU", "OTTAWA", "HUST"].iter().map(|s| s.to_string()).collect();
    let splits = enumerate_splits(&names).unwrap();
    assert_eq!(splits.len(), N_SPLITS);
    let mut got: Vec<Task> = splits.iter().map(as_task).collect();
    let mut want = fixture();
    assert_eq!(want.len(), 30);
    got.sort();
    want.sort();
    assert_eq!(got, want);
    let sizes: Vec<usize> = splits.iter().map(SplitSpec::task).collect();
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    for s in &splits {
        s.validate().unwrap();
        assert_eq!(s.train_domains.len() + s.test_domains.len(), 5);
    }
    // input order does not matter
    let mut shuffled = names.clone();
    shuffled.reverse();
    assert_eq!(enumerate_splits(&shuffled).unwrap(), splits);
}

fn f1_oracle(c: &[[u64; 2]; 2]) -> ([f64; 2], f64) {
    let mut f = [0.0; 2];
    for k in 0..2 {
        let o = 1 - k;
        let (tp, fp, fnn) = (c[k][k] as f64, c[o][k] as f64, c[k][o] as f64);
        let denom = 2.0 * tp + fp + fnn;
        f[k] = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    let (s0, s1) = ((c[0][0] + c[0][1]) as f64, (c[1][0] + c[1][1]) as f64);
    let avg = if s0 + s1 == 0.0 { 0.0 } else { (s0 * f[0] + s1 * f[1]) / (s0 + s1) };
    (f, avg)
}

#[test]
fn f1_matches_oracle_on_random_confusions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..1000 {
        let hi = if i % 10 == 0 { 3 } else { 500 };
        let counts = [[rng.random_range(0..hi), rng.random_range(0..hi)], [rng.random_range(0..hi), rng.random_range(0..hi)]];
        let (f, avg) = f1_scores(&Confusion { counts });
        let (wf, wavg) = f1_oracle(&counts);
        for k in 0..2 {
            assert!((f[k] - wf[k]).abs() < 1e-12, "{counts:?}");
        }
        assert!((avg - wavg).abs() < 1e-12, "{counts:?}");
    }
}

#[test]
fn f1_degenerate_cases() {
    assert_eq!(f1_scores(&Confusion::default()), ([0.0, 0.0], 0.0));
    // everything predicted as class 0
    let (f, avg) = f1_scores(&Confusion { counts: [[5, 0], [5, 0]] });
    assert!((f[0] - 2.0 / 3.0).abs() < 1e-15 && f[1] == 0.0);
    assert!((avg - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(f1_scores(&Confusion { counts: [[7, 0], [0, 3]] }), ([1.0, 1.0], 1.0));
}

fn report_for(split: &SplitSpec, f1: f64) -> yoto_core::protocol::MetricsReport {
    yoto_core::protocol::MetricsReport {
        split_id: 0,
        split: split.clone(),
        variant: Variant::Full,
        seed: 0,
        confusion: Confusion::default(),
        per_class_f1: [f1, f1],
        sample_avg_f1: f1,
        gate_utilization: vec![],
        per_domain: vec![],
        test_domain_updates: 0,
    }
}

fn letters() -> Vec<String> {
    ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect()
}

#[test]
fn scaling_report_averages_per_task() {
    let splits = enumerate_splits(&letters()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut reports = Vec::new();
    let mut sums = [0.0; 5];
    let mut counts = [0usize; 5];
    for s in &splits {
        for _ in 0..3 {
            let f = rng.random_range(0.0..1.0);
            sums[s.task()] += f;
            counts[s.task()] += 1;
            reports.push(report_for(s, f));
        }
    }
    let rows = scaling_report(&splits, &reports).unwrap();
    assert_eq!(rows.iter().map(|r| r.task).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert_eq!(rows.iter().map(|r| r.count).collect::<Vec<_>>(), vec![5, 10, 10, 5]);
    for r in &rows {
        let want = sums[r.task] / counts[r.task] as f64;
        assert!((r.mean_f1 - want).abs() < 1e-12);
    }

    let same: Vec<_> = splits.iter().map(|s| report_for(s, 0.8)).collect();
    for r in scaling_report(&splits, &same).unwrap() {
        assert!((r.mean_f1 - 0.8).abs() < 1e-15);
    }
}

#[test]
fn scaling_report_names_missing_splits() {
    let splits = enumerate_splits(&letters()).unwrap();
    let reports: Vec<_> = splits.iter().skip(1).map(|s| report_for(s, 0.5)).collect();
    match scaling_report(&splits, &reports) {
        Err(Error::Protocol(m)) => assert!(m.contains("#0 a -> b+c+d+e"), "{m}"),
        other => panic!("expected a protocol error, got {other:?}"),
    }
}

fn tiny_cfgs(window: usize) -> (ModelConfig, TrainConfig) {
    let mc = ModelConfig {
        in_len: window,
        channels: 4,
        pool_stride: 16,
        d_model: 8,
        n_experts: 4,
        top_k: 2,
        expert_hidden: 8,
        head_hidden: 8,
        ..Default::default()
    };
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 3e-3,
        ..Default::default()
    };
    (mc, tc)
}

fn separable_data(n_per: usize, window: usize) -> DomainData {
    separable_domains()
        .iter()
        .map(|s| (s.name.clone(), synth_domain(s, n_per, window, 1).unwrap()))
        .collect()
}

#[test]
fn run_split_is_reproducible_and_pure() {
    let data = separable_data(6, 256);
    let (mc, tc) = tiny_cfgs(256);
    let split = SplitSpec::new(&["sepA", "sepB"], &["sepC", "sepD", "sepE"]);
    let a = run_split(7, &split, &data, &mc, &tc, Variant::Full, 3).unwrap();
    let b = run_split(7, &split, &data, &mc, &tc, Variant::Full, 3).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.log, b.log);
    assert_eq!(a.report.test_domain_updates, 0);
    assert_eq!(a.report.confusion.total(), 36);
    let mut merged = Confusion::default();
    for d in &a.report.per_domain {
        assert_eq!(d.confusion.total(), 12);
        merged.merge(&d.confusion);
    }
    assert_eq!(merged, a.report.confusion);
    let u: f64 = a.report.gate_utilization.iter().sum();
    assert!((u - 1.0).abs() < 1e-12);
}

#[test]
fn run_split_rejects_leaks_and_missing_data() {
    let data = separable_data(2, 256);
    let (mc, tc) = tiny_cfgs(256);
    let leak = SplitSpec::new(&["sepA", "sepB"], &["sepB", "sepC"]);
    assert!(matches!(run_split(0, &leak, &data, &mc, &tc, Variant::Full, 0), Err(Error::Protocol(_))));
    let missing = SplitSpec::new(&["sepA"], &["nowhere"]);
    assert!(matches!(run_split(0, &missing, &data, &mc, &tc, Variant::Full, 0), Err(Error::Data(_))));
}

#[test]
fn ablation_grid_yields_one_report_per_pair() {
    let data = separable_data(2, 256);
    let (mc, tc) = tiny_cfgs(256);
    let names: Vec<String> = data.keys().cloned().collect();
    let splits: Vec<(usize, SplitSpec)> = enumerate_splits(&names).unwrap().into_iter().enumerate().take(5).collect();
    let reports = run_ablation(&splits, &Variant::ALL, &data, &mc, &tc, 0).unwrap();
    assert_eq!(reports.len(), 30);
    assert!(reports.iter().all(|r| r.test_domain_updates == 0));
    let pairs: BTreeSet<(usize, Variant)> = reports.iter().map(|r| (r.split_id, r.variant)).collect();
    assert_eq!(pairs.len(), 30);
    let rows = ablation_summary(&reports);
    assert_eq!(rows.len(), 5);
    for row in &rows {
        assert_eq!(row.scores.len(), 6);
        assert!(row.full_vs_best <= 0.0);
        assert!(row.scores.iter().all(|(_, f)| *f <= row.best_f1));
    }
}

/// When source and target share clean, strongly periodic fault signatures
/// the pipeline must transfer almost perfectly.
#[test]
fn separable_domains_transfer() {
    let window = 2048;
    let data = separable_data(64, window);
    let mc = ModelConfig {
        in_len: window,
        channels: 8,
        pool_stride: 16,
        d_model: 32,
        n_experts: 8,
        top_k: 2,
        expert_hidden: 32,
        head_hidden: 32,
        ..Default::default()
    };
    let tc = TrainConfig {
        epochs: 8,
        batch_size: 16,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let names: Vec<String> = data.keys().cloned().collect();
    let splits = enumerate_splits(&names).unwrap();
    for id in [0, 10, 29] {
        let out = run_split(id, &splits[id], &data, &mc, &tc, Variant::Full, 0).unwrap();
        assert!(out.report.sample_avg_f1 >= 0.95, "split {id}: {}", out.report.sample_avg_f1);
    }
}

proptest! {
    #[test]
    fn f1_is_bounded_and_symmetric(a in 0u64..50, b in 0u64..50, c in 0u64..50, d in 0u64..50) {
        let (f, avg) = f1_scores(&Confusion { counts: [[a, b], [c, d]] });
        prop_assert!((0.0..=1.0).contains(&avg));
        // relabeling the classes swaps the per-class scores
        let (g, avg2) = f1_scores(&Confusion { counts: [[d, c], [b, a]] });
        prop_assert!((f[0] - g[1]).abs() < 1e-12 && (f[1] - g[0]).abs() < 1e-12);
        prop_assert!((avg - avg2).abs() < 1e-12);
    }
}
