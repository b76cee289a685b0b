//! Repeated simulate → split → train → evaluate runs per censoring regime.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tlsr_core::data::split_dataset;
use tlsr_core::evaluation::{evaluate, EvaluationReport};
use tlsr_core::simulator::{simulate_cohort, CensoringSpec};
use tlsr_core::training::{sub_seed, train, EpochTrace};

use crate::commands::write_trace;
use crate::config::RunConfig;
use crate::error::CliError;

/// Worker-count environment variable.
pub const WORKERS_ENV: &str = "TLSR_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    Medium,
    High,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Low, Regime::Medium, Regime::High];

    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Regime::Low),
            "medium" => Ok(Regime::Medium),
            "high" => Ok(Regime::High),
            _ => Err(CliError::Config(format!("reproduce.regimes: unknown regime `{s}` (expected low, medium or high)"))),
        }
    }

    pub fn censoring(self) -> CensoringSpec {
        match self {
            Regime::Low => CensoringSpec::LOW,
            Regime::Medium => CensoringSpec::MEDIUM,
            Regime::High => CensoringSpec::HIGH,
        }
    }

    /// Nominal censoring rate.
    pub fn label(self) -> &'static str {
        match self {
            Regime::Low => "2%",
            Regime::Medium => "13%",
            Regime::High => "59%",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Low => "low",
            Regime::Medium => "medium",
            Regime::High => "high",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub regime: Regime,
    pub repeat: usize,
    pub seed: u64,
    pub censoring_rate: f64,
    pub simulate_seconds: f64,
    pub train_seconds: f64,
    pub evaluate_seconds: f64,
    pub report: EvaluationReport,
    pub trace: Vec<EpochTrace>,
}

/// Seed of repeat `repeat` under `regime`.
pub fn job_seed(master: u64, regime: Regime, repeat: usize) -> u64 {
    sub_seed(master, 100 + regime.index(), repeat as u64)
}

/// One full pipeline run. The job seed drives simulation, split, training
/// and evaluation.
pub fn run_job(cfg: &RunConfig, regime: Regime, repeat: usize) -> Result<JobResult, CliError> {
    let seed = job_seed(cfg.seed.unwrap_or(0), regime, repeat);
    let mut sim = cfg.simulation.clone();
    sim.censoring = regime.censoring();
    sim.seed = seed;
    let t = Instant::now();
    let cohort = simulate_cohort(&sim).map_err(|e| CliError::from_core("simulation", e))?;
    let simulate_seconds = t.elapsed().as_secs_f64();
    let f = cfg.split.fractions;
    let dataset = split_dataset(&cohort.dataset, (f[0], f[1], f[2]), seed)?;

    let mut tc = cfg.training.clone();
    tc.seed = seed;
    let t = Instant::now();
    let out = train(&dataset, &cfg.model, &tc)?;
    let train_seconds = t.elapsed().as_secs_f64();

    let mut ec = cfg.evaluation.clone();
    ec.seed = seed;
    let t = Instant::now();
    let report = evaluate(&out.params, &dataset, Some(&cohort.oracles), &ec)?;
    let evaluate_seconds = t.elapsed().as_secs_f64();
    log::info!(
        "{} repeat {repeat}: censoring {:.3}, rmse {:?}, ibs {:.4}",
        regime.name(),
        cohort.censoring_rate(),
        report.rmse,
        report.ibs
    );
    Ok(JobResult {
        regime,
        repeat,
        seed,
        censoring_rate: cohort.censoring_rate(),
        simulate_seconds,
        train_seconds,
        evaluate_seconds,
        report,
        trace: out.trace,
    })
}

/// Worker count from the environment, at least 1; `deterministic` forces 1.
pub fn worker_count(deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n: &usize| n > 0).unwrap_or(1)
}

/// Runs every `(regime, repeat)` job on a bounded worker pool. Results come
/// back in job order regardless of scheduling.
pub fn run_jobs(cfg: &RunConfig, regimes: &[Regime], workers: usize) -> Result<Vec<JobResult>, CliError> {
    let jobs: Vec<(Regime, usize)> = regimes.iter().flat_map(|&r| (0..cfg.reproduce.repeats).map(move |k| (r, k))).collect();
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<Result<JobResult, CliError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&(regime, repeat)) = jobs.get(i) else { break };
                let r = run_job(cfg, regime, repeat);
                *slots[i].lock().expect("job slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("job slot").expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

/// Metric names, in table column order.
pub const METRICS: [&str; 8] = [
    "censoring_rate",
    "rmse_y1",
    "rmse_y2",
    "rmse_y3",
    "loglik_rmse_survival",
    "loglik_rmse_recurrent",
    "ibs",
    "train_seconds",
];

fn metric(job: &JobResult, name: &str) -> f64 {
    let r = &job.report;
    match name {
        "censoring_rate" => job.censoring_rate,
        "rmse_y1" => r.rmse.first().copied().unwrap_or(f64::NAN),
        "rmse_y2" => r.rmse.get(1).copied().unwrap_or(f64::NAN),
        "rmse_y3" => r.rmse.get(2).copied().unwrap_or(f64::NAN),
        "loglik_rmse_survival" => r.loglik_rmse_survival.unwrap_or(f64::NAN),
        "loglik_rmse_recurrent" => r.loglik_rmse_recurrent.unwrap_or(f64::NAN),
        "ibs" => r.ibs,
        "train_seconds" => job.train_seconds,
        _ => f64::NAN,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub regime: Regime,
    pub label: String,
    pub repeats: usize,
    /// One entry per name in [`METRICS`].
    pub metrics: Vec<(String, MeanSd)>,
}

impl SummaryRow {
    pub fn get(&self, name: &str) -> Option<MeanSd> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// One row per regime with mean ± sd of each metric over its repeats.
pub fn summarise(results: &[JobResult], regimes: &[Regime]) -> Vec<SummaryRow> {
    regimes
        .iter()
        .map(|&regime| {
            let jobs: Vec<&JobResult> = results.iter().filter(|j| j.regime == regime).collect();
            SummaryRow {
                regime,
                label: regime.label().to_string(),
                repeats: jobs.len(),
                metrics: METRICS
                    .iter()
                    .map(|&name| {
                        let values: Vec<f64> = jobs.iter().map(|j| metric(j, name)).collect();
                        (name.to_string(), MeanSd::of(&values))
                    })
                    .collect(),
            }
        })
        .collect()
}

/// `regime,<metric>_mean,<metric>_sd,...`.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let mut s = String::from("regime,repeats");
    for m in METRICS {
        s.push_str(&format!(",{m}_mean,{m}_sd"));
    }
    s.push('\n');
    for row in rows {
        s.push_str(&format!("{},{}", row.label, row.repeats));
        for (_, v) in &row.metrics {
            s.push_str(&format!(",{},{}", v.mean, v.sd));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Markdown table of `mean ± sd`.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = String::from("| censoring |");
    for m in METRICS {
        s.push_str(&format!(" {m} |"));
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(METRICS.len()));
    s.push('\n');
    for row in rows {
        s.push_str(&format!("| {} |", row.label));
        for (_, v) in &row.metrics {
            s.push_str(&format!(" {:.3} ± {:.3} |", v.mean, v.sd));
        }
        s.push('\n');
    }
    s
}

/// `<root>/run-YYYYmmddTHHMMSS`, suffixed if it already exists.
pub fn timestamped_dir(root: &Path) -> Result<PathBuf, CliError> {
    let stamp = chrono::Local::now().format("run-%Y%m%dT%H%M%S").to_string();
    let mut dir = root.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{k}"));
        k += 1;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes per-job reports and traces plus the consolidated summary.
pub fn write_results(dir: &Path, results: &[JobResult], rows: &[SummaryRow]) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    for job in results {
        let jd = dir.join(format!("{}_{:03}", job.regime.name(), job.repeat));
        std::fs::create_dir_all(&jd)?;
        let report = jd.join("report.json");
        std::fs::write(&report, serde_json::to_string_pretty(&serde_json::json!({
            "regime": job.regime,
            "repeat": job.repeat,
            "seed": job.seed,
            "censoring_rate": job.censoring_rate,
            "simulate_seconds": job.simulate_seconds,
            "train_seconds": job.train_seconds,
            "evaluate_seconds": job.evaluate_seconds,
            "report": job.report,
        }))?)?;
        let trace = jd.join("trace.csv");
        write_trace(&trace, &job.trace)?;
        written.push(report);
        written.push(trace);
    }
    let summary = dir.join("summary.json");
    std::fs::write(&summary, serde_json::to_string_pretty(rows)?)?;
    let csv = dir.join("summary.csv");
    write_summary_csv(&csv, rows)?;
    let md = dir.join("summary.md");
    std::fs::write(&md, summary_table(rows))?;
    written.extend([summary, csv, md]);
    Ok(written)
}
