//! Cross-dataset evaluation: split enumeration, per-split train/evaluate,
//! F1 metrics, the scaling table and the ablation matrix.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::SignalSegment;
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, Model, ModelConfig, Variant};
use crate::rng;
use crate::train::{finetune_adapters, train, TrainConfig, TrainLog, UpdateAudit};

/// Number of domains the protocol partitions.
pub const N_DOMAINS: usize = 5;
/// Total number of train/test partitions of five domains with 1..=4 sources.
pub const N_SPLITS: usize = 30;
const EVAL_BATCH: usize = 64;

/// One train/test partition of the domain set.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_domains: Vec<String>,
    pub test_domains: Vec<String>,
}

impl SplitSpec {
    pub fn new(train: &[&str], test: &[&str]) -> Self {
        Self {
            train_domains: train.iter().map(|s| s.to_string()).collect(),
            test_domains: test.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Number of training domains, i.e. the "Task" index of the split.
    pub fn task(&self) -> usize {
        self.train_domains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_domains.is_empty() || self.test_domains.is_empty() {
            return Err(Error::Protocol("split needs non-empty train and test sets".to_string()));
        }
        if let Some(d) = self.train_domains.iter().find(|d| self.test_domains.contains(d)) {
            return Err(Error::Protocol(format!("domain {d} is in both train and test sets")));
        }
        Ok(())
    }

    /// `a+b` joined names, as used in report rows.
    pub fn train_label(&self) -> String {
        self.train_domains.join("+")
    }

    pub fn test_label(&self) -> String {
        self.test_domains.join("+")
    }
}

/// All train sets of size 1..=4 with the complement as test set, ordered by
/// size then lexicographically (domain names are sorted first).
pub fn enumerate_splits(domains: &[String]) -> Result<Vec<SplitSpec>> {
    let set: BTreeSet<&String> = domains.iter().collect();
    if domains.len() != N_DOMAINS || set.len() != N_DOMAINS {
        return Err(Error::Config(format!(
            "the protocol needs exactly {N_DOMAINS} distinct domains, got {domains:?}"
        )));
    }
    let names: Vec<&String> = set.into_iter().collect();
    let mut out = Vec::with_capacity(N_SPLITS);
    for size in 1..N_DOMAINS {
        let mut by_size: Vec<(Vec<usize>, SplitSpec)> = Vec::new();
        for mask in 0u32..(1 << N_DOMAINS) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let train: Vec<usize> = (0..N_DOMAINS).filter(|i| mask & (1 << i) != 0).collect();
            let spec = SplitSpec {
                train_domains: train.iter().map(|&i| names[i].clone()).collect(),
                test_domains: (0..N_DOMAINS)
                    .filter(|i| mask & (1 << i) == 0)
                    .map(|i| names[i].clone())
                    .collect(),
            };
            by_size.push((train, spec));
        }
        by_size.sort();
        out.extend(by_size.into_iter().map(|(_, s)| s));
    }
    Ok(out)
}

/// `counts[true][pred]` over the two fault classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
}

impl Confusion {
    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &Confusion) {
        for t in 0..2 {
            for p in 0..2 {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        (self.counts[0][0] + self.counts[1][1]) as f64 / n as f64
    }
}

/// Per-class F1 with the `0/0 -> 0` convention, and their support-weighted
/// mean (the sample-averaged F1).
pub fn f1_scores(c: &Confusion) -> ([f64; 2], f64) {
    let mut f1 = [0.0; 2];
    let mut support = [0u64; 2];
    for k in 0..2 {
        let tp = c.counts[k][k] as f64;
        let predicted: u64 = (0..2).map(|t| c.counts[t][k]).sum();
        support[k] = c.counts[k].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support[k] == 0 { 0.0 } else { tp / support[k] as f64 };
        f1[k] = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    let n = support[0] + support[1];
    let avg = if n == 0 {
        0.0
    } else {
        (support[0] as f64 * f1[0] + support[1] as f64 * f1[1]) / n as f64
    };
    (f1, avg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub confusion: Confusion,
    pub sample_avg_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split_id: usize,
    pub split: SplitSpec,
    pub variant: Variant,
    pub seed: u64,
    pub confusion: Confusion,
    pub per_class_f1: [f64; 2],
    pub sample_avg_f1: f64,
    /// Fraction of routing slots taken by each expert over the test set.
    pub gate_utilization: Vec<f64>,
    /// Same metrics restricted to each test domain.
    pub per_domain: Vec<DomainMetrics>,
    /// Optimizer updates attributable to test-domain data; always 0.
    pub test_domain_updates: u64,
}

/// Confusion matrix and expert utilization of `model` on `segments`.
/// Evaluation only reads the model.
pub fn evaluate(model: &Model, segments: &[&SignalSegment], seed: u64) -> Result<(Vec<usize>, Confusion, Vec<f64>)> {
    let mut route = rng::stream(seed, "route-eval");
    let n = model.config().n_experts;
    let mut slots = vec![0.0; n];
    let mut conf = Confusion::default();
    let mut preds = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(EVAL_BATCH) {
        let out = model.predict(chunk, &mut route)?;
        let c = out.main_logits.shape()[1];
        for (row, s) in out.main_logits.data().chunks(c).zip(chunk) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0;
            preds.push(pred);
            conf.add(s.label.index(), pred.min(1));
        }
        for (i, v) in out.gate.mask.data().iter().enumerate() {
            slots[i % n] += v;
        }
    }
    let total: f64 = slots.iter().sum();
    if total > 0.0 {
        slots.iter_mut().for_each(|v| *v /= total);
    }
    Ok((preds, conf, slots))
}

/// Seed of split `split_id` under a run's global seed.
pub fn split_seed(global_seed: u64, split_id: usize) -> u64 {
    rng::derive_indexed(global_seed, split_id as u64)
}

pub type DomainData = BTreeMap<String, Vec<SignalSegment>>;

/// Everything produced by one split run.
#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub report: MetricsReport,
    pub log: TrainLog,
    pub model: Model,
}

fn gather<'a>(data: &'a DomainData, names: &[String]) -> Result<Vec<&'a SignalSegment>> {
    let mut out = Vec::new();
    for n in names {
        let segs = data
            .get(n)
            .ok_or_else(|| Error::Data(format!("no data loaded for domain {n}")))?;
        out.extend(segs.iter());
    }
    Ok(out)
}

/// Trains a fresh model on the split's sources and evaluates it once on the
/// pooled held-out domains.
pub fn run_split(
    split_id: usize,
    split: &SplitSpec,
    data: &DomainData,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variant: Variant,
    global_seed: u64,
) -> Result<SplitOutcome> {
    split.validate()?;
    let seed = split_seed(global_seed, split_id);
    let train_set = gather(data, &split.train_domains)?;
    let test_set = gather(data, &split.test_domains)?;
    let mut model = Model::new(model_cfg.clone().with_variant(variant), seed)?;
    let mut cfg = train_cfg.clone();
    cfg.seed = seed;
    let mut audit = UpdateAudit::default();
    let log = train(&mut model, &train_set, &cfg, &mut audit)?;
    let test_domain_updates = audit.updates_from_any(&split.test_domains);
    if test_domain_updates != 0 {
        return Err(Error::Protocol(format!(
            "{test_domain_updates} optimizer updates drew on test-domain data in split {split_id}"
        )));
    }
    let (preds, confusion, gate_utilization) = evaluate(&model, &test_set, seed)?;
    let (per_class_f1, sample_avg_f1) = f1_scores(&confusion);
    let per_domain = split
        .test_domains
        .iter()
        .map(|d| {
            let mut c = Confusion::default();
            for (s, &p) in test_set.iter().zip(&preds).filter(|(s, _)| &s.domain == d) {
                c.add(s.label.index(), p.min(1));
            }
            DomainMetrics {
                domain: d.clone(),
                confusion: c,
                sample_avg_f1: f1_scores(&c).1,
            }
        })
        .collect();
    let report = MetricsReport {
        split_id,
        split: split.clone(),
        variant,
        seed,
        confusion,
        per_class_f1,
        sample_avg_f1,
        gate_utilization,
        per_domain,
        test_domain_updates,
    };
    debug_assert_eq!(report.confusion.total() as usize, test_set.len());
    Ok(SplitOutcome { report, log, model })
}

/// Runs every (split, variant) pair sequentially.
pub fn run_ablation(
    splits: &[(usize, SplitSpec)],
    variants: &[Variant],
    data: &DomainData,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    global_seed: u64,
) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::with_capacity(splits.len() * variants.len());
    for (id, split) in splits {
        for &v in variants {
            out.push(run_split(*id, split, data, model_cfg, train_cfg, v, global_seed)?.report);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub task: usize,
    pub mean_f1: f64,
    pub count: usize,
}

/// Mean sample-averaged F1 per training-set size. Every split of `splits`
/// must have at least one report; reports from several seeds are averaged.
pub fn scaling_report(splits: &[SplitSpec], reports: &[MetricsReport]) -> Result<Vec<ScalingRow>> {
    let missing: Vec<String> = splits
        .iter()
        .enumerate()
        .filter(|(_, s)| !reports.iter().any(|r| &r.split == *s))
        .map(|(i, s)| format!("#{i} {} -> {}", s.train_label(), s.test_label()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("missing split reports: {}", missing.join("; "))));
    }
    let mut rows = Vec::new();
    for task in 1..N_DOMAINS {
        let group: Vec<f64> = reports
            .iter()
            .filter(|r| r.split.task() == task && splits.contains(&r.split))
            .map(|r| r.sample_avg_f1)
            .collect();
        let count = splits.iter().filter(|s| s.task() == task).count();
        if count == 0 {
            continue;
        }
        rows.push(ScalingRow {
            task,
            mean_f1: group.iter().sum::<f64>() / group.len() as f64,
            count,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub split_id: usize,
    pub test_domains: String,
    /// `(variant, mean F1)` in the order of [`Variant::ALL`].
    pub scores: Vec<(Variant, f64)>,
    pub best: Variant,
    pub best_f1: f64,
    /// `F1(Full) - F1(best)`; zero when Full is the best.
    pub full_vs_best: f64,
}

/// Per-split table of variant scores with the best variant and the gap
/// between the full model and it.
pub fn ablation_summary(reports: &[MetricsReport]) -> Vec<AblationRow> {
    let mut by_split: BTreeMap<usize, BTreeMap<Variant, Vec<f64>>> = BTreeMap::new();
    let mut labels: BTreeMap<usize, String> = BTreeMap::new();
    for r in reports {
        by_split
            .entry(r.split_id)
            .or_default()
            .entry(r.variant)
            .or_default()
            .push(r.sample_avg_f1);
        labels.insert(r.split_id, r.split.test_label());
    }
    by_split
        .into_iter()
        .map(|(split_id, vars)| {
            let scores: Vec<(Variant, f64)> = Variant::ALL
                .iter()
                .filter_map(|v| vars.get(v).map(|xs| (*v, xs.iter().sum::<f64>() / xs.len() as f64)))
                .collect();
            let (best, best_f1) = scores
                .iter()
                .fold((Variant::Full, f64::NEG_INFINITY), |(bv, bf), &(v, f)| if f > bf { (v, f) } else { (bv, bf) });
            let full = scores.iter().find(|(v, _)| *v == Variant::Full).map(|x| x.1);
            AblationRow {
                split_id,
                test_domains: labels[&split_id].clone(),
                scores,
                best,
                best_f1,
                full_vs_best: full.map(|f| f - best_f1).unwrap_or(f64::NAN),
            }
        })
        .collect()
}

/// Zero-shot versus adapted scores on the shot-excluded remainder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub target: String,
    pub n_shots: usize,
    pub n_eval: usize,
    pub zero_shot_f1: f64,
    pub adapted_f1: f64,
    pub backbone_checksum_before: u64,
    pub backbone_checksum_after: u64,
}

/// Seeded disjoint `(shots, remainder)` index sets over `n` target samples.
pub fn split_shots(n: usize, n_shots: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_shots >= n {
        return Err(Error::Config(format!(
            "{n_shots} shots leave nothing to evaluate in a target of {n} samples"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "shots"));
    let rest = idx.split_off(n_shots);
    Ok((idx, rest))
}

/// Adapts a copy of a trained model to the target domain with low-rank
/// adapters and reports F1 before and after on the same held-out remainder.
pub fn run_fewshot(
    trained: &Model,
    target: &[SignalSegment],
    acfg: &AdapterConfig,
    train_cfg: &TrainConfig,
) -> Result<(FewShotReport, Model)> {
    let domain = target.first().map(|s| s.domain.clone()).unwrap_or_default();
    let (shot_idx, eval_idx) = split_shots(target.len(), acfg.n_shots, train_cfg.seed)?;
    if shot_idx.iter().any(|i| eval_idx.contains(i)) {
        return Err(Error::Protocol("adaptation shots overlap the evaluation set".to_string()));
    }
    let shots: Vec<&SignalSegment> = shot_idx.iter().map(|&i| &target[i]).collect();
    let eval: Vec<&SignalSegment> = eval_idx.iter().map(|&i| &target[i]).collect();
    let (_, before, _) = evaluate(trained, &eval, train_cfg.seed)?;
    let backbone = |m: &Model| m.params().checksum_where(|p| !p.name.starts_with("lora."));
    let checksum_before = backbone(trained);
    let mut adapted = trained.clone();
    let mut audit = UpdateAudit::default();
    finetune_adapters(&mut adapted, &shots, acfg, train_cfg, &mut audit)?;
    let (_, after, _) = evaluate(&adapted, &eval, train_cfg.seed)?;
    let report = FewShotReport {
        target: domain,
        n_shots: shots.len(),
        n_eval: eval.len(),
        zero_shot_f1: f1_scores(&before).1,
        adapted_f1: f1_scores(&after).1,
        backbone_checksum_before: checksum_before,
        backbone_checksum_after: backbone(&adapted),
    };
    Ok((report, adapted))
}
