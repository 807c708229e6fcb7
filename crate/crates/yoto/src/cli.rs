//! The `yoto` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use yoto_core::data::SignalSegment;
use yoto_core::model::{AdapterConfig, Variant};
use yoto_core::protocol::{
    ablation_summary, enumerate_splits, evaluate, f1_scores, run_fewshot, scaling_report, Confusion, MetricsReport, SplitSpec,
    N_SPLITS,
};
use yoto_core::synth::synth_domain;
use yoto_core::train::{train, UpdateAudit};

use crate::checkpoint::{load_model, save_model};
use crate::config::{parse_json, RunConfig, SynthConfig};
use crate::error::{self, exit, CliError, Result};
use crate::manifest::{load_dataset, load_domains, write_dataset, write_json};
use crate::report::{self, Failure, RunHeader, Summary};
use crate::runner::{jobs, parse_split_filter, run_jobs};
use crate::stats::{self, StatsRow};

#[derive(Debug, Parser)]
#[command(name = "yoto", version, about = "Zero-shot cross-domain bearing fault diagnosis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic domains of a generator spec.
    Synth(SynthArgs),
    /// Resample, frame and normalize raw recordings into a dataset.
    Ingest(IngestArgs),
    /// Train one model on the configured domains and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a set of domains.
    Eval(EvalArgs),
    /// Run the leave-domains-out protocol for one variant.
    Protocol(ProtocolArgs),
    /// Run the protocol for several model variants.
    Ablate(AblateArgs),
    /// Adapt a checkpoint to a target domain with low-rank adapters.
    Finetune(FinetuneArgs),
    /// Rebuild the summary tables from a directory of saved reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator spec (JSON); the built-in five-domain table if omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory for manifests and segment files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads, one domain each.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Ingestion spec (JSON): name, from_hz, window, hop and labeled files.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated training domains; all configured domains if omitted.
    #[arg(long, value_delimiter = ',')]
    pub domains: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated evaluation domains.
    #[arg(long, value_delimiter = ',', required = true)]
    pub domains: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "Full")]
    pub variant: String,
    /// Split filter: `all`, `task<N>`, ids and ranges, comma-separated.
    #[arg(long, default_value = "all")]
    pub splits: String,
    /// Worker threads, one split each.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated variants; all six if omitted.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long, default_value = "all")]
    pub splits: String,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Target domain to adapt to.
    #[arg(long)]
    pub target: String,
    /// Labeled target samples used for adaptation.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Adapter rank.
    #[arg(long)]
    pub rank: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding a `reports.json`.
    #[arg(long)]
    pub dir: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Protocol(a) => cmd_protocol(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn load_run(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn check_jobs(n: usize) -> Result<usize> {
    if n == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    Ok(n)
}

fn pool(n: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {n} workers: {e}")))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let spec = match &a.spec {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    let n = check_jobs(a.jobs)?;
    let rows: Vec<Result<StatsRow>> = pool(n)?.install(|| {
        spec.domains
            .par_iter()
            .map(|d| {
                let segs = synth_domain(d, spec.n_per_class, spec.window, a.seed)?;
                let m = write_dataset(&a.out, &d.name, &segs, Some(a.seed))?;
                Ok(StatsRow::of(&m))
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let csv = stats::to_csv(&rows);
    error::write(&a.out.join("stats.csv"), &csv)?;
    print!("{csv}");
    Ok(exit::OK)
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<i32> {
    let (m, row) = crate::ingest::ingest(&a.spec, &a.out)?;
    let csv = stats::to_csv(&[row]);
    error::write(&a.out.join(format!("{}_stats.csv", m.name)), &csv)?;
    print!("{csv}");
    Ok(exit::OK)
}

fn pooled<'a>(data: &'a yoto_core::protocol::DomainData, names: &[String]) -> Vec<&'a SignalSegment> {
    names.iter().flat_map(|n| data[n].iter()).collect()
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = load_run(&a.run)?;
    let names = a.domains.clone().unwrap_or_else(|| cfg.domains.clone());
    let data = load_domains(&cfg.data_dir, &names)?;
    let mut model = yoto_core::model::Model::new(cfg.model.clone(), cfg.seed)?;
    let mut audit = UpdateAudit::default();
    let log = train(&mut model, &pooled(&data, &names), &cfg.train_config(), &mut audit)?;
    save_model(&cfg.out_dir.join("model.yoto"), &model)?;
    error::write(&cfg.out_dir.join("train_log.csv"), report::log_csv(&log))?;
    if let Some(last) = log.epoch_means().last() {
        println!("trained on {} ({} steps), final epoch loss {last:.6}", names.join("+"), log.steps.len());
    }
    Ok(exit::OK)
}

#[derive(Serialize)]
struct EvalReport {
    domains: Vec<String>,
    confusion: Confusion,
    per_class_f1: [f64; 2],
    sample_avg_f1: f64,
    gate_utilization: Vec<f64>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let cfg = load_run(&a.run)?;
    let model = load_model(&a.checkpoint)?;
    let data = load_domains(&cfg.data_dir, &a.domains)?;
    let (_, confusion, gate_utilization) = evaluate(&model, &pooled(&data, &a.domains), cfg.seed)?;
    let (per_class_f1, sample_avg_f1) = f1_scores(&confusion);
    let r = EvalReport {
        domains: a.domains.clone(),
        confusion,
        per_class_f1,
        sample_avg_f1,
        gate_utilization,
    };
    write_json(&cfg.out_dir.join("eval.json"), &r)?;
    println!(
        "{}: f1_inner {:.4} f1_outer {:.4} f1_avg {:.4}",
        a.domains.join("+"),
        per_class_f1[0],
        per_class_f1[1],
        sample_avg_f1
    );
    Ok(exit::OK)
}

fn header(cfg: &RunConfig) -> RunHeader {
    RunHeader {
        seed: cfg.seed,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        weights: cfg.weights,
    }
}

/// Runs the selected (split, variant) grid and writes reports into `dir`.
fn run_grid(cfg: &RunConfig, variants: &[Variant], filter: &str, n_jobs: usize, dir: &Path) -> Result<(Summary, i32)> {
    let n_jobs = check_jobs(n_jobs)?;
    let splits = enumerate_splits(&cfg.domains)?;
    let ids = parse_split_filter(filter, &splits)?;
    let data = load_domains(&cfg.data_dir, &cfg.domains)?;
    let grid = jobs(&splits, &ids, variants);
    let outcomes = run_jobs(&grid, &data, &cfg.model, &cfg.train_config(), cfg.seed, n_jobs)?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut code = exit::OK;
    for (job, out) in grid.iter().zip(outcomes) {
        match out {
            Ok(o) => {
                let log = dir.join("logs").join(format!("split{:02}_{}.csv", job.split_id, job.variant.name()));
                error::write(&log, report::log_csv(&o.log))?;
                reports.push(o.report);
            }
            Err(e) => {
                let e = CliError::from(e);
                eprintln!("split {} {}: {e}", job.split_id, job.variant);
                if code == exit::OK || e.exit_code() == exit::PROTOCOL {
                    code = e.exit_code();
                }
                failures.push(Failure {
                    split_id: job.split_id,
                    variant: job.variant,
                    error: e.to_string(),
                });
            }
        }
    }
    let leaked: u64 = reports.iter().map(|r| r.test_domain_updates).sum();
    if leaked != 0 {
        code = exit::PROTOCOL;
    }
    error::write(&dir.join("splits.csv"), report::split_csv(&reports))?;
    write_json(&dir.join("reports.json"), &reports)?;
    let summary = summarize(header(cfg), &splits, &reports, failures);
    write_outputs(dir, &summary)?;
    Ok((summary, code))
}

fn summarize(header: RunHeader, splits: &[SplitSpec], reports: &[MetricsReport], failures: Vec<Failure>) -> Summary {
    let variants: std::collections::BTreeSet<Variant> = reports.iter().map(|r| r.variant).collect();
    // the scaling table is defined per variant; only a single-variant run gets one
    let scaling = if variants.len() == 1 && splits.len() == N_SPLITS {
        scaling_report(splits, reports).ok()
    } else {
        None
    };
    Summary {
        header,
        n_reports: reports.len(),
        scaling,
        ablation: ablation_summary(reports),
        failures,
    }
}

fn write_outputs(dir: &Path, summary: &Summary) -> Result<()> {
    if let Some(rows) = &summary.scaling {
        error::write(&dir.join("scaling.csv"), report::scaling_csv(rows))?;
    }
    error::write(&dir.join("ablation.csv"), report::ablation_csv(&summary.ablation))?;
    write_json(&dir.join("summary.json"), summary)
}

fn print_summary(summary: &Summary) {
    match &summary.scaling {
        Some(rows) => print!("{}", report::scaling_table(rows)),
        None => {
            for row in &summary.ablation {
                let scores: Vec<String> = row.scores.iter().map(|(v, f)| format!("{v} {f:.4}")).collect();
                println!("split {:>2} -> {}: {}", row.split_id, row.test_domains, scores.join(", "));
            }
        }
    }
}

pub fn cmd_protocol(a: &ProtocolArgs) -> Result<i32> {
    let cfg = load_run(&a.run)?;
    let variant: Variant = a.variant.parse()?;
    let (summary, code) = run_grid(&cfg, &[variant], &a.splits, a.jobs, &cfg.out_dir.join("protocol"))?;
    print_summary(&summary);
    Ok(code)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<i32> {
    let cfg = load_run(&a.run)?;
    let variants: Vec<Variant> = match &a.variants {
        Some(v) => v.iter().map(|s| s.parse()).collect::<yoto_core::Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let (summary, code) = run_grid(&cfg, &variants, &a.splits, a.jobs, &cfg.out_dir.join("ablation"))?;
    for row in &summary.ablation {
        println!(
            "split {:>2} -> {}: best {} ({:.4}), Full - best {:+.4}",
            row.split_id, row.test_domains, row.best, row.best_f1, row.full_vs_best
        );
    }
    Ok(code)
}

pub fn cmd_finetune(a: &FinetuneArgs) -> Result<i32> {
    let cfg = load_run(&a.run)?;
    let model = load_model(&a.checkpoint)?;
    let (_, target) = load_dataset(&cfg.data_dir, &a.target)?;
    let acfg = AdapterConfig {
        n_shots: a.shots.unwrap_or(cfg.adapter.n_shots),
        rank: a.rank.unwrap_or(cfg.adapter.rank),
        ..cfg.adapter.clone()
    };
    let (rep, adapted) = run_fewshot(&model, &target, &acfg, &cfg.train_config())?;
    let dir = cfg.out_dir.join("finetune");
    save_model(&dir.join("adapted.yoto"), &adapted)?;
    write_json(&dir.join("finetune.json"), &rep)?;
    println!(
        "{}: {} shots, {} evaluated; zero-shot f1 {:.4}, adapted f1 {:.4}",
        rep.target, rep.n_shots, rep.n_eval, rep.zero_shot_f1, rep.adapted_f1
    );
    Ok(exit::OK)
}

pub fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let reports: Vec<MetricsReport> = parse_json(&a.dir.join("reports.json"))?;
    let first = reports
        .first()
        .ok_or_else(|| CliError::config(&a.dir.join("reports.json"), "holds no reports"))?;
    let names: Vec<String> = first.split.train_domains.iter().chain(&first.split.test_domains).cloned().collect();
    let splits = enumerate_splits(&names)?;
    // keep the run settings and failures recorded by the run itself
    let (header, failures) = match parse_json::<Summary>(&a.dir.join("summary.json")) {
        Ok(s) => (s.header, s.failures),
        Err(_) => (header(&RunConfig::default()), Vec::new()),
    };
    let summary = summarize(header, &splits, &reports, failures);
    write_outputs(&a.dir, &summary)?;
    print_summary(&summary);
    Ok(exit::OK)
}
