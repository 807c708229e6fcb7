//! Parallel execution of (split, variant) jobs.

use rayon::prelude::*;
use yoto_core::model::{ModelConfig, Variant};
use yoto_core::protocol::{run_split, DomainData, SplitOutcome, SplitSpec, N_DOMAINS};
use yoto_core::train::TrainConfig;
use yoto_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub split_id: usize,
    pub split: SplitSpec,
    pub variant: Variant,
}

/// Selects split ids from a comma-separated filter. Terms are `all`,
/// `task<N>` (every split with N training domains), an id, or an inclusive
/// id range `a-b`. The result is sorted and free of duplicates.
pub fn parse_split_filter(filter: &str, splits: &[SplitSpec]) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for term in filter.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let lower = term.to_ascii_lowercase();
        if lower == "all" {
            ids.extend(0..splits.len());
        } else if let Some(n) = lower.strip_prefix("task") {
            let n: usize = n.parse().map_err(|_| Error::Config(format!("bad split filter term {term:?}")))?;
            if !(1..N_DOMAINS).contains(&n) {
                return Err(Error::Config(format!("task size {n} outside 1..={}", N_DOMAINS - 1)));
            }
            ids.extend(splits.iter().enumerate().filter(|(_, s)| s.task() == n).map(|(i, _)| i));
        } else {
            let bad = || Error::Config(format!("bad split filter term {term:?}"));
            let (a, b) = match lower.split_once('-') {
                Some((a, b)) => (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
                None => {
                    let v: usize = lower.parse().map_err(|_| bad())?;
                    (v, v)
                }
            };
            if a > b || b >= splits.len() {
                return Err(Error::Config(format!("split range {term:?} outside 0..{}", splits.len())));
            }
            ids.extend(a..=b);
        }
    }
    if ids.is_empty() {
        return Err(Error::Config(format!("split filter {filter:?} selects nothing")));
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

pub fn jobs(splits: &[SplitSpec], ids: &[usize], variants: &[Variant]) -> Vec<Job> {
    ids.iter()
        .flat_map(|&i| {
            variants.iter().map(move |&v| Job {
                split_id: i,
                split: splits[i].clone(),
                variant: v,
            })
        })
        .collect()
}

/// Runs every job on `n_jobs` worker threads. Each job owns its model and
/// RNG streams, so results do not depend on scheduling; they come back in
/// job order.
pub fn run_jobs(
    jobs: &[Job],
    data: &DomainData,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    global_seed: u64,
    n_jobs: usize,
) -> Result<Vec<Result<SplitOutcome>>> {
    let run = |j: &Job| run_split(j.split_id, &j.split, data, model_cfg, train_cfg, j.variant, global_seed);
    if n_jobs <= 1 {
        return Ok(jobs.iter().map(run).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n_jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {n_jobs} workers: {e}")))?;
    Ok(pool.install(|| jobs.par_iter().map(run).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use yoto_core::protocol::enumerate_splits;

    fn splits() -> Vec<SplitSpec> {
        let names: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        enumerate_splits(&names).unwrap()
    }

    #[test]
    fn filter_semantics() {
        let s = splits();
        assert_eq!(parse_split_filter("all", &s).unwrap().len(), 30);
        assert_eq!(parse_split_filter("task4", &s).unwrap(), (25..30).collect::<Vec<_>>());
        assert_eq!(parse_split_filter("task1, 7, 3-4", &s).unwrap(), vec![0, 1, 2, 3, 4, 7]);
        for bad in ["task5", "x", "31", "4-2", ""] {
            assert!(matches!(parse_split_filter(bad, &s), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn job_grid() {
        let s = splits();
        let j = jobs(&s, &[0, 5], &Variant::ALL);
        assert_eq!(j.len(), 12);
        assert_eq!(j[6].split_id, 5);
        assert_eq!(j[7].variant, Variant::RandomExpert);
    }
}
