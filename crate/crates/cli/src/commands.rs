//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tlsr_core::data::io::{load_dataset, save_dataset};
use tlsr_core::data::{split_dataset, Dataset, PatientRecord};
use tlsr_core::evaluation::{evaluate, write_bs_points, write_survival_curves};
use tlsr_core::inference::{
    conditional_survival, default_horizon, event_free_probability, mc_dropout, predict_longitudinal, rollout, ModelRates, RateProvider,
    RateQuery, UncertaintyInterval,
};
use tlsr_core::simulator::{load_truth, save_truth, simulate_cohort, GroundTruthOracle};
use tlsr_core::training::{sub_seed, train_with, EpochTrace};
use tlsr_core::transformer::ModelParameters;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{sibling, Manifest};
use crate::reproduce::{run_jobs, summarise, summary_table, timestamped_dir, worker_count, write_results, Regime};

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// TOML config; `[simulation]` and `[split]` are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cohort JSONL output.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth JSONL output [default: <out stem>.truth.jsonl].
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub n_patients: Option<usize>,
    /// Censoring regime preset.
    #[arg(long)]
    pub censoring: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML config; `[model]`, `[training]` and `[split]` are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Checkpoint file or directory holding `model.json`.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ground truth for log-likelihood RMSE.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report JSON; CSV tables go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Longitudinal,
    SurvivalProb,
    EventFreeProb,
    Intensity,
    Hazard,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub patient: String,
    /// Lag after the last history visit.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: f64,
    #[arg(long, value_enum)]
    pub quantity: Quantity,
    /// Number of leading visits used as history [default: all].
    #[arg(long)]
    pub history: Option<usize>,
    /// MC-dropout passes for an uncertainty interval.
    #[arg(long)]
    pub mc_dropout: Option<usize>,
    /// MC samples for probabilities.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON output; a CSV with the same stem is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub patient: String,
    /// Sampling window after the last visit [default: twice the training 99th-percentile gap].
    #[arg(long, allow_negative_numbers = true)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub history: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON output; the trace CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReproduceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root under which a timestamped run directory is created.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Repeats per regime (up to 100).
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Comma-separated subset of low, medium, high.
    #[arg(long, value_delimiter = ',')]
    pub regimes: Option<Vec<String>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub n_patients: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
}

fn require_file(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::path(flag, path, "file not found"))
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>, deterministic: bool) -> Result<RunConfig, CliError> {
    if let Some(p) = path {
        require_file("--config", p)?;
    }
    let mut cfg = RunConfig::load_or_default(path)?;
    cfg.apply_seed(seed);
    cfg.deterministic |= deterministic;
    Ok(cfg)
}

fn checkpoint_path(ckpt: &Path) -> PathBuf {
    if ckpt.is_dir() {
        ckpt.join("model.json")
    } else {
        ckpt.to_path_buf()
    }
}

fn load_checkpoint(ckpt: &Path) -> Result<(PathBuf, ModelParameters), CliError> {
    let path = checkpoint_path(ckpt);
    require_file("--ckpt", &path)?;
    let params = ModelParameters::load(&path).map_err(|e| CliError::Runtime(format!("cannot load checkpoint {}: {e}", path.display())))?;
    Ok((path, params))
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    require_file("--data", path)?;
    load_dataset(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))
}

/// Uses stored split labels, or splits with the configured fractions.
fn with_splits(ds: Dataset, cfg: &RunConfig) -> Result<Dataset, CliError> {
    if ds.splits.is_some() {
        return Ok(ds);
    }
    let f = cfg.split.fractions;
    Ok(split_dataset(&ds, (f[0], f[1], f[2]), cfg.simulation.seed)?)
}

fn patient_history<'a>(ds: &'a Dataset, id: &str, history: Option<usize>) -> Result<(&'a PatientRecord, PatientRecord), CliError> {
    let record = ds.find(id).ok_or_else(|| CliError::Config(format!("--patient: unknown patient `{id}`")))?;
    let j = history.unwrap_or(record.n_visits());
    if j == 0 || j > record.n_visits() {
        return Err(CliError::Config(format!("--history: must lie in 1..={}, got {j}", record.n_visits())));
    }
    Ok((record, record.truncated(j)))
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref(), args.seed, args.deterministic)?;
    if let Some(n) = args.n_patients {
        cfg.simulation.n_patients = n;
    }
    if let Some(c) = &args.censoring {
        cfg.simulation.censoring = Regime::parse(c).map_err(|_| CliError::Config(format!("--censoring: unknown regime `{c}`")))?.censoring();
    }
    cfg.validate()?;
    let cohort = simulate_cohort(&cfg.simulation).map_err(|e| CliError::from_core("simulation", e))?;
    let f = cfg.split.fractions;
    let dataset = split_dataset(&cohort.dataset, (f[0], f[1], f[2]), cfg.simulation.seed)?;
    let truth = args.truth.clone().unwrap_or_else(|| sibling(&args.out, "truth.jsonl"));
    ensure_parent(&args.out)?;
    ensure_parent(&truth)?;
    save_dataset(&dataset, &args.out)?;
    save_truth(&truth, &cfg.simulation, &cohort.oracles)?;
    log::info!(
        "simulated {} patients, censoring rate {:.3}, {} resampled",
        dataset.len(),
        cohort.censoring_rate(),
        cohort.resampled
    );

    let mut manifest = Manifest::new("simulate", &cfg);
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    manifest.output(&args.out)?;
    manifest.output(&truth)?;
    manifest.metrics = serde_json::json!({
        "n_patients": dataset.len(),
        "censoring_rate": cohort.censoring_rate(),
        "resampled": cohort.resampled,
        "n_visits": dataset.records.iter().map(|r| r.n_visits()).sum::<usize>(),
    });
    manifest.write(&sibling(&args.out, "manifest.json"))
}

/// `epoch,train_*,val_*` rows.
pub fn write_trace(path: &Path, trace: &[EpochTrace]) -> Result<(), CliError> {
    let mut s = String::from("epoch,train_mse,train_recurrent_nll,train_survival_nll,train_total,val_mse,val_recurrent_nll,val_survival_nll,val_total\n");
    for e in trace {
        let t = &e.train;
        s.push_str(&format!("{},{},{},{},{}", e.epoch, t.mse, t.recurrent_nll, t.survival_nll, t.total()));
        match &e.val {
            Some(v) => s.push_str(&format!(",{},{},{},{}\n", v.mse, v.recurrent_nll, v.survival_nll, v.total())),
            None => s.push_str(",,,,\n"),
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref(), args.seed, args.deterministic)?;
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    cfg.validate()?;
    let data = with_splits(load_data(&args.data)?, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let out = train_with(&data, &cfg.model, &cfg.training, |e| {
        let v = e.val.map(|v| v.total()).unwrap_or(f64::NAN);
        log::info!(
            "epoch {}: mse {:.4} recurrent {:.4} survival {:.4} val total {:.4}",
            e.epoch,
            e.train.mse,
            e.train.recurrent_nll,
            e.train.survival_nll,
            v
        );
    })
    .map_err(|e| CliError::from_core("", e))?;
    let model = args.out.join("model.json");
    out.params.save(&model)?;
    let trace = args.out.join("trace.csv");
    write_trace(&trace, &out.trace)?;

    let mut manifest = Manifest::new("train", &cfg);
    manifest.input(&args.data)?;
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    manifest.output(&model)?;
    manifest.output(&trace)?;
    manifest.metrics = serde_json::json!({
        "final_epoch": out.trace.last(),
        "gradient_check": out.gradient_check,
        "n_parameters": out.params.n_scalars(),
    });
    manifest.write(&args.out.join("manifest.json"))
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref(), args.seed, args.deterministic)?;
    cfg.validate()?;
    let (ckpt, params) = load_checkpoint(&args.ckpt)?;
    let data = with_splits(load_data(&args.data)?, &cfg)?;
    let oracles: Option<Vec<GroundTruthOracle>> = match &args.truth {
        Some(p) => {
            require_file("--truth", p)?;
            Some(load_truth(p).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?.1)
        }
        None => None,
    };
    let report = evaluate(&params, &data, oracles.as_deref(), &cfg.evaluation).map_err(|e| CliError::from_core("evaluation", e))?;
    ensure_parent(&args.out)?;
    let dir = args.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    let bs = dir.join("bs_points.csv");
    write_bs_points(std::io::BufWriter::new(std::fs::File::create(&bs)?), &report.bs_points)?;
    let curves = dir.join("survival_curves.csv");
    write_survival_curves(std::io::BufWriter::new(std::fs::File::create(&curves)?), &report.survival_curves)?;
    log::info!("rmse {:?}, ibs {:.4}", report.rmse, report.ibs);

    let mut manifest = Manifest::new("evaluate", &cfg);
    manifest.input(&ckpt)?;
    manifest.input(&args.data)?;
    if let Some(p) = &args.truth {
        manifest.input(p)?;
    }
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    manifest.output(&args.out)?;
    manifest.output(&bs)?;
    manifest.output(&curves)?;
    manifest.metrics = serde_json::to_value(&report)?;
    manifest.write(&sibling(&args.out, "manifest.json"))
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionValue {
    pub name: String,
    pub value: f64,
    pub interval: Option<UncertaintyInterval>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub patient: String,
    pub history: usize,
    pub t_last: f64,
    pub tau: f64,
    pub time: f64,
    pub quantity: Quantity,
    pub values: Vec<PredictionValue>,
}

fn point_values(params: &ModelParameters, history: &PatientRecord, args: &PredictArgs, dropout: Option<(f64, u64)>) -> tlsr_core::Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(args.seed, 1, 0));
    let mut provider = ModelRates { params, dropout };
    let t = history.visit_times().last().copied().unwrap_or(0.0) + args.tau;
    Ok(match args.quantity {
        Quantity::Longitudinal => predict_longitudinal(params, history, args.tau, &[], dropout)?,
        Quantity::SurvivalProb => vec![conditional_survival(&mut provider, history, args.tau, args.samples, &mut rng)?],
        Quantity::EventFreeProb => vec![event_free_probability(&mut provider, history, args.tau, args.samples, &mut rng)?],
        Quantity::Intensity | Quantity::Hazard => {
            let r = provider.rates(history, &[RateQuery { time: t, history: history.n_visits() }])?[0];
            vec![if args.quantity == Quantity::Intensity { r.intensity } else { r.hazard }]
        }
    })
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    if !(args.tau > 0.0 && args.tau.is_finite()) {
        return Err(CliError::Config(format!("--tau: must be positive and finite, got {}", args.tau)));
    }
    if args.samples == 0 {
        return Err(CliError::Config("--samples: must be at least 1".into()));
    }
    if matches!(args.mc_dropout, Some(n) if n < 2) {
        return Err(CliError::Config("--mc-dropout: need at least 2 passes".into()));
    }
    let (_, params) = load_checkpoint(&args.ckpt)?;
    let data = load_data(&args.data)?;
    let (_, history) = patient_history(&data, &args.patient, args.history)?;
    let point = point_values(&params, &history, args, None)?;
    let names: Vec<String> = match args.quantity {
        Quantity::Longitudinal => (0..point.len()).map(|u| format!("y{}", u + 1)).collect(),
        q => vec![serde_json::to_value(q)?.as_str().unwrap_or("value").to_string()],
    };
    let intervals: Vec<Option<UncertaintyInterval>> = match args.mc_dropout {
        Some(n) => {
            let rate = params.config.dropout;
            let seed = sub_seed(args.seed, 2, 0);
            (0..point.len())
                .map(|k| mc_dropout(|s| Ok(point_values(&params, &history, args, Some((rate, s)))?[k]), n, seed).map(Some))
                .collect::<Result<_, _>>()?
        }
        None => vec![None; point.len()],
    };
    let t_last = history.visit_times().last().copied().unwrap_or(0.0);
    let pred = Prediction {
        patient: args.patient.clone(),
        history: history.n_visits(),
        t_last,
        tau: args.tau,
        time: t_last + args.tau,
        quantity: args.quantity,
        values: names
            .into_iter()
            .zip(point)
            .zip(intervals)
            .map(|((name, value), interval)| PredictionValue { name, value, interval })
            .collect(),
    };
    ensure_parent(&args.out)?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&pred)?)?;
    let mut csv = String::from("patient,time,name,value,mean,q05,q95\n");
    for v in &pred.values {
        let (m, lo, hi) = v.interval.as_ref().map(|i| (i.mean.to_string(), i.q05.to_string(), i.q95.to_string())).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{},{m},{lo},{hi}\n", pred.patient, pred.time, v.name, v.value));
    }
    std::fs::write(args.out.with_extension("csv"), csv)?;
    Ok(())
}

pub fn rollout_cmd(args: &RolloutArgs) -> Result<(), CliError> {
    let (_, params) = load_checkpoint(&args.ckpt)?;
    let data = load_data(&args.data)?;
    let (_, history) = patient_history(&data, &args.patient, args.history)?;
    let horizon = match args.horizon {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(CliError::Config(format!("--horizon: must be positive and finite, got {h}"))),
        None => default_horizon(&params).map_err(|_| CliError::Config("--horizon: checkpoint stores no inter-visit gap statistic".into()))?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(args.seed, 3, 0));
    let r = rollout(&params, &history, horizon, &mut rng)?;
    if r.at_boundary {
        log::warn!("no thinning draw accepted within the horizon; t_next is the boundary");
    }
    ensure_parent(&args.out)?;
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&serde_json::json!({
            "patient": args.patient,
            "history": history.n_visits(),
            "horizon": horizon,
            "rollout": r,
        }))?,
    )?;
    let mut csv = String::from("kind,time,intensity,hazard\n");
    let n = r.trace.len();
    for (i, p) in r.trace.iter().enumerate() {
        let kind = if i + 1 == n { "next" } else { "visit" };
        csv.push_str(&format!("{kind},{},{},{}\n", p.time, p.intensity, p.hazard));
    }
    std::fs::write(args.out.with_extension("csv"), csv)?;
    Ok(())
}

pub fn reproduce_cmd(args: &ReproduceArgs) -> Result<PathBuf, CliError> {
    let mut cfg = load_config(args.config.as_deref(), args.seed, args.deterministic)?;
    if let Some(n) = args.repeats {
        cfg.reproduce.repeats = n;
    }
    if let Some(r) = &args.regimes {
        cfg.reproduce.regimes = r.clone();
    }
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    if let Some(n) = args.n_patients {
        cfg.simulation.n_patients = n;
    }
    cfg.validate()?;
    let regimes: Vec<Regime> = cfg.reproduce.regimes.iter().map(|r| Regime::parse(r)).collect::<Result<_, _>>()?;
    let workers = worker_count(cfg.deterministic);
    log::info!("{} jobs on {workers} worker(s)", regimes.len() * cfg.reproduce.repeats);
    let results = run_jobs(&cfg, &regimes, workers)?;
    let rows = summarise(&results, &regimes);
    let dir = timestamped_dir(&args.out)?;
    let written = write_results(&dir, &results, &rows)?;
    println!("{}", summary_table(&rows));

    let mut manifest = Manifest::new("reproduce", &cfg);
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    for p in &written {
        manifest.output(p)?;
    }
    manifest.metrics = serde_json::to_value(&rows)?;
    manifest.write(&dir.join("manifest.json"))?;
    println!("{}", dir.display());
    Ok(dir)
}
