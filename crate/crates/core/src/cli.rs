//! Command-line front end. Each command reads a [`RunConfig`], echoes the
//! resolved form into its output directory and writes CSV/JSON artifacts there.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::data::{DataError, Dataset, SeriesWindow, Split};
use crate::evaluation::{
    ablation, bench_decode, denormalize, evaluate_model, evaluate_persistence, gaussian_quantile,
    horizon_sweep, monotone_by_mode, CellResult, EvalError, ExperimentSpec, QuantileReport,
};
use crate::forecaster::{fit, Checkpoint, DecodeMode, ForecastError, PlanOptions, Prediction, ProNet};
use crate::numerics::Real;
use crate::scheduler::{build_mask, grid_ascii, SegmentPlan, StartSelection};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("configuration error: {0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) | Self::Forecast(ForecastError::Mismatch(_)) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pronet", version, about = "Partially-autoregressive probabilistic forecasting")]
pub struct Cli {
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info", env = "PRONET_LOG")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write its checkpoint and training log.
    Train(RunArgs),
    /// Forecast every window of a split with a trained checkpoint.
    Predict(PredictArgs),
    /// Quantile losses of a checkpoint and of the persistence baseline.
    Evaluate(EvalArgs),
    /// Decoding latency per mode on a fixed model.
    Bench(BenchArgs),
    /// Train and score one model per (horizon, mode).
    Sweep(SweepArgs),
    /// Train and score AR, even-plan and learned-plan decoding on one backbone.
    Ablate(RunArgs),
    /// Print the progressive attention mask of a segment plan.
    Mask(MaskArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: PathBuf,
    /// `key=value` override with a dotted key, e.g. `train.lr=0.005`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; replaces `output_dir`.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(o) = &self.output {
            overrides.push(format!("output_dir={}", toml_string(&o.to_string_lossy())));
        }
        Ok(RunConfig::load(&self.config, &overrides)?)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Decoding mode; defaults to `mode` from the configuration.
    #[arg(long)]
    pub mode: Option<DecodeMode>,
    /// Also write `plot_data.csv` with lookback history and a 10-90% band.
    #[arg(long)]
    pub plot_data: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub mode: Option<DecodeMode>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Trained model; without it a freshly initialized model is timed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Horizons in days (times `data.steps_per_day`); replaces `sweep.horizons`.
    #[arg(long, value_delimiter = ',')]
    pub days: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Horizon length.
    #[arg(long)]
    pub th: usize,
    /// 1-based segment starts.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["ng", "z"])]
    pub starts: Vec<usize>,
    /// Number of segments, with `--z`.
    #[arg(long, requires = "z")]
    pub ng: Option<usize>,
    /// Latent importance scores, one per horizon step.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "ng")]
    pub z: Vec<Real>,
    /// Select starts from the raw scores without spacing weights.
    #[arg(long)]
    pub no_reweight: bool,
    /// Plain top-n_g selection instead of forcing step 1.
    #[arg(long)]
    pub top_k: bool,
    /// Print every intermediate iteration as well.
    #[arg(long)]
    pub all: bool,
}

/// Runs `cli`, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Mask(a) => cmd_mask(a, out),
    }
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::Output {
        path: PathBuf::from("<stdout>"),
        message: e.to_string(),
    })
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn prepare_output(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn echo_config(dir: &Path, config: &RunConfig) -> Result<(), CliError> {
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml()).map_err(|e| io_err(&path, e))
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Dataset plus the configuration with its model widths resolved.
fn load_dataset(mut config: RunConfig) -> Result<(RunConfig, Dataset), CliError> {
    let raw = config.dataset.load()?;
    let ds = Dataset::prepare(&raw, config.data.clone())?;
    config.model = config.model_for(ds.covariate_dim(), ds.n_series());
    Ok((config, ds))
}

fn nonempty(windows: Vec<SeriesWindow>, split: Split) -> Result<Vec<SeriesWindow>, CliError> {
    if windows.is_empty() {
        let name = match split {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        return Err(ForecastError::EmptySplit(name).into());
    }
    Ok(windows)
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    train_nll: Real,
    val_nll: Real,
    kl: Real,
    lr: Real,
    seconds: Real,
}

#[derive(Serialize)]
struct HistogramRow {
    epoch: usize,
    step: usize,
    starts: u64,
}

#[derive(Serialize)]
struct TrainSummary {
    mode: DecodeMode,
    seed: u64,
    epochs: usize,
    best_epoch: usize,
    best_val_nll: Real,
    stopped_early: bool,
    seconds: Real,
}

pub fn cmd_train(args: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (config, ds) = load_dataset(args.load()?)?;
    let dir = prepare_output(&config)?;
    echo_config(&dir, &config)?;
    let train = nonempty(ds.windows(Split::Train), Split::Train)?;
    let validation = nonempty(ds.windows(Split::Validation), Split::Validation)?;
    say(
        out,
        format!(
            "training {} on {} train / {} validation windows",
            config.mode,
            train.len(),
            validation.len()
        ),
    )?;
    let started = Instant::now();
    let model = ProNet::new(&config.model, config.train.seed)?;
    let report = fit(model, &train, &validation, config.mode, &config.train, |_| {})?;
    let seconds = started.elapsed().as_secs_f64();

    Checkpoint::new(&report.model, config.mode, config.train.seed).save(dir.join("checkpoint.json"))?;
    let log: Vec<LogRow> = report
        .log
        .iter()
        .map(|e| LogRow {
            epoch: e.epoch,
            train_nll: e.train_nll,
            val_nll: e.val_nll,
            kl: e.kl,
            lr: e.lr,
            seconds: e.seconds,
        })
        .collect();
    write_csv(&dir.join("training_log.csv"), &log)?;
    let hist: Vec<HistogramRow> = report
        .log
        .iter()
        .flat_map(|e| {
            e.start_histogram.iter().enumerate().map(|(k, &n)| HistogramRow {
                epoch: e.epoch,
                step: k + 1,
                starts: n,
            })
        })
        .collect();
    write_csv(&dir.join("start_histogram.csv"), &hist)?;
    let summary = TrainSummary {
        mode: config.mode,
        seed: config.train.seed,
        epochs: report.log.len(),
        best_epoch: report.best_epoch,
        best_val_nll: report.best_val_nll,
        stopped_early: report.stopped_early,
        seconds,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    say(
        out,
        format!(
            "best validation NLL {:.6} at epoch {} of {}; wrote {}",
            report.best_val_nll,
            report.best_epoch,
            report.log.len(),
            dir.display()
        ),
    )
}

fn load_model(path: &Path, config: &RunConfig) -> Result<ProNet, CliError> {
    let ck = Checkpoint::load(path)?;
    if ck.mode != config.mode {
        log::info!("checkpoint was trained as {}, configuration decodes {}", ck.mode, config.mode);
    }
    Ok(ck.into_model(Some(&config.model))?)
}

#[derive(Serialize)]
struct ForecastRow<'a> {
    series_id: &'a str,
    window: usize,
    timestamp: String,
    step: usize,
    target: Real,
    mean: Real,
    std: Real,
    q50: Real,
    q90: Real,
    plan: String,
    final_write: usize,
}

#[derive(Serialize)]
struct PlotRow<'a> {
    series_id: &'a str,
    window: usize,
    timestamp: String,
    role: &'static str,
    actual: Real,
    mean: Option<Real>,
    q10: Option<Real>,
    q90: Option<Real>,
}

const TIMESTAMP: &str = "%Y-%m-%d %H:%M:%S";

fn predictions(
    config: &RunConfig,
    model: &ProNet,
    windows: &[SeriesWindow],
    mode: DecodeMode,
) -> Result<(QuantileReport, Vec<Prediction>), CliError> {
    Ok(evaluate_model(
        model,
        windows,
        mode,
        config.train.inference_z,
        &config.train.plan,
        config.train.seed,
    )?)
}

pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (mut config, ds) = load_dataset(args.run.load()?)?;
    if let Some(m) = args.mode {
        m.fixed_plan(config.data.horizon)
            .map_err(|e| CliError::Usage(format!("--mode: {e}")))?;
        config.mode = m;
    }
    let model = load_model(&args.checkpoint, &config)?;
    let split = Split::from(args.split);
    let windows = nonempty(ds.windows(split), split)?;
    let dir = prepare_output(&config)?;
    echo_config(&dir, &config)?;
    let (report, preds) = predictions(&config, &model, &windows, config.mode)?;

    let mut rows = Vec::with_capacity(windows.len() * config.data.horizon);
    let mut plot = Vec::new();
    for (i, (w, p)) in windows.iter().zip(&preds).enumerate() {
        let fc = denormalize(&p.forecast, w);
        let q10 = gaussian_quantile(&fc, 0.1)?;
        let q50 = gaussian_quantile(&fc, 0.5)?;
        let q90 = gaussian_quantile(&fc, 0.9)?;
        let target = w.target_denormalized();
        let plan = p.plan.describe();
        for k in 0..w.horizon() {
            rows.push(ForecastRow {
                series_id: &w.series_id,
                window: i,
                timestamp: w.horizon_timestamps[k].format(TIMESTAMP).to_string(),
                step: k + 1,
                target: target[k],
                mean: fc.mean[k],
                std: fc.std[k],
                q50: q50[k],
                q90: q90[k],
                plan: plan.clone(),
                final_write: p.trace.final_write[k],
            });
        }
        if args.plot_data {
            let ts = &w.horizon_timestamps;
            let step = ts[1] - ts[0];
            let past = w.past_denormalized();
            for (j, &v) in past.iter().enumerate() {
                let back = (past.len() - j) as i32;
                plot.push(PlotRow {
                    series_id: &w.series_id,
                    window: i,
                    timestamp: (ts[0] - step * back).format(TIMESTAMP).to_string(),
                    role: "history",
                    actual: v,
                    mean: None,
                    q10: None,
                    q90: None,
                });
            }
            for k in 0..w.horizon() {
                plot.push(PlotRow {
                    series_id: &w.series_id,
                    window: i,
                    timestamp: ts[k].format(TIMESTAMP).to_string(),
                    role: "forecast",
                    actual: target[k],
                    mean: Some(fc.mean[k]),
                    q10: Some(q10[k]),
                    q90: Some(q90[k]),
                });
            }
        }
    }
    write_csv(&dir.join("forecasts.csv"), &rows)?;
    if args.plot_data {
        write_csv(&dir.join("plot_data.csv"), &plot)?;
    }
    say(
        out,
        format!(
            "{} windows x {} steps with {}: rho0.5 {:.6}, rho0.9 {:.6}; wrote {}",
            windows.len(),
            config.data.horizon,
            config.mode,
            report.rho05,
            report.rho09,
            dir.join("forecasts.csv").display()
        ),
    )
}

#[derive(Serialize)]
struct EvaluationFile {
    mode: DecodeMode,
    split: Split,
    windows: usize,
    model: QuantileReport,
    persistence: QuantileReport,
}

pub fn cmd_evaluate(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (mut config, ds) = load_dataset(args.run.load()?)?;
    if let Some(m) = args.mode {
        m.fixed_plan(config.data.horizon)
            .map_err(|e| CliError::Usage(format!("--mode: {e}")))?;
        config.mode = m;
    }
    let model = load_model(&args.checkpoint, &config)?;
    let split = Split::from(args.split);
    let windows = nonempty(ds.windows(split), split)?;
    let dir = prepare_output(&config)?;
    echo_config(&dir, &config)?;
    let (report, _) = predictions(&config, &model, &windows, config.mode)?;
    let persistence = evaluate_persistence(&windows, config.data.steps_per_day)?;
    say(out, "series,model_rho05,model_rho09,persistence_rho05,persistence_rho09")?;
    for (m, p) in report.per_series.iter().zip(&persistence.per_series) {
        say(
            out,
            format!("{},{:.6},{:.6},{:.6},{:.6}", m.series_id, m.rho05, m.rho09, p.rho05, p.rho09),
        )?;
    }
    say(
        out,
        format!(
            "pooled,{:.6},{:.6},{:.6},{:.6}",
            report.rho05, report.rho09, persistence.rho05, persistence.rho09
        ),
    )?;
    write_json(
        &dir.join("evaluation.json"),
        &EvaluationFile {
            mode: config.mode,
            split,
            windows: windows.len(),
            model: report,
            persistence,
        },
    )
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (config, ds) = load_dataset(args.run.load()?)?;
    for m in &config.bench.modes {
        m.fixed_plan(config.data.horizon)
            .map_err(|e| CliError::Usage(format!("bench.modes: {e}")))?;
    }
    let model = match &args.checkpoint {
        Some(p) => load_model(p, &config)?,
        None => ProNet::new(&config.model, config.train.seed)?,
    };
    let mut windows = nonempty(ds.windows(Split::Test), Split::Test)?;
    windows.truncate(config.bench.windows);
    let dir = prepare_output(&config)?;
    echo_config(&dir, &config)?;
    let report = bench_decode(&model, &windows, &config.bench.modes, config.bench.runs, &config.train.plan)?;
    say(out, format!("{} windows, {} warm-up + {} timed runs", report.windows, report.warmup, config.bench.runs))?;
    say(out, format!("{:<12} {:>7} {:>7} {:>12} {:>10}", "mode", "passes", "max", "mean_ms", "std_ms"))?;
    for r in &report.rows {
        say(
            out,
            format!(
                "{:<12} {:>7} {:>7} {:>12.3} {:>10.3}",
                r.mode, r.passes_min, r.passes_max, r.mean_ms, r.std_ms
            ),
        )?;
    }
    write_csv(&dir.join("bench.csv"), &report.rows)
}

fn experiment(config: &RunConfig) -> ExperimentSpec {
    ExperimentSpec {
        data: config.data.clone(),
        model: config.model.clone(),
        train: config.train.clone(),
    }
}

fn print_cells(out: &mut dyn Write, rows: &[CellResult]) -> Result<(), CliError> {
    say(out, format!("{:<12} {:>8} {:>10} {:>10} {:>12}", "mode", "horizon", "rho0.5", "rho0.9", "persist0.5"))?;
    for r in rows {
        say(
            out,
            format!(
                "{:<12} {:>8} {:>10.5} {:>10.5} {:>12.5}",
                r.mode, r.horizon, r.rho05, r.rho09, r.persistence_rho05
            ),
        )?;
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = args.run.load()?;
    if !args.days.is_empty() {
        config.sweep.horizons = args.days.iter().map(|d| d * config.data.steps_per_day).collect();
    }
    let horizons = if config.sweep.horizons.is_empty() {
        vec![config.data.horizon]
    } else {
        config.sweep.horizons.clone()
    };
    let modes = if config.sweep.modes.is_empty() {
        vec![config.mode]
    } else {
        config.sweep.modes.clone()
    };
    for &h in &horizons {
        for m in &modes {
            m.fixed_plan(h)
                .map_err(|e| CliError::Usage(format!("sweep: mode {m} at horizon {h}: {e}")))?;
        }
    }
    let dir = prepare_output(&config)?;
    echo_config(&dir, &config)?;
    let raw = config.dataset.load()?;
    let rows = horizon_sweep(&raw, &experiment(&config), &horizons, &modes)?;
    print_cells(out, &rows)?;
    for (mode, ok) in monotone_by_mode(&rows) {
        say(out, format!("{mode}: rho0.5 {} in the horizon", if ok { "non-decreasing" } else { "not monotone" }))?;
    }
    write_csv(&dir.join("sweep.csv"), &rows)
}

/// AR, even plan and learned plan with the run's group count.
pub fn ablation_modes(config: &RunConfig) -> Vec<DecodeMode> {
    if !config.ablate.modes.is_empty() {
        return config.ablate.modes.clone();
    }
    let n = match config.mode {
        DecodeMode::ParEven(n) | DecodeMode::ProNet(n) => n,
        _ => (config.data.horizon / 2).max(1),
    };
    vec![DecodeMode::Ar, DecodeMode::ParEven(n), DecodeMode::ProNet(n)]
}

pub fn cmd_ablate(args: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = args.load()?;
    let modes = ablation_modes(&config);
    let dir = prepare_output(&config)?;
    echo_config(&dir, &config)?;
    let raw = config.dataset.load()?;
    let rows = ablation(&raw, &experiment(&config), &modes)?;
    print_cells(out, &rows)?;
    write_csv(&dir.join("ablation.csv"), &rows)
}

pub fn cmd_mask(args: &MaskArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let usage = |e: String| CliError::Usage(e);
    let plan = match args.ng {
        Some(ng) => {
            if args.z.len() != args.th {
                return Err(usage(format!("--z has {} scores for --th {}", args.z.len(), args.th)));
            }
            let options = PlanOptions {
                reweight: !args.no_reweight,
                selection: if args.top_k {
                    StartSelection::TopK
                } else {
                    StartSelection::ForcedFirst
                },
            };
            options.plan(&args.z, ng).map_err(|e| usage(e.to_string()))?
        }
        None => {
            let starts = if args.starts.is_empty() { vec![1] } else { args.starts.clone() };
            SegmentPlan::from_one_based(args.th, &starts).map_err(|e| usage(e.to_string()))?
        }
    };
    let mask = build_mask(&plan);
    say(out, format!("starts {}  n_step {}", plan.describe(), plan.n_step()))?;
    if args.all {
        for t in 0..mask.n_passes() {
            let written: Vec<String> = mask.written(t).iter().map(|p| (p + 1).to_string()).collect();
            say(out, format!("iteration {} writes {}", t + 1, written.join(",")))?;
            write!(out, "{}", grid_ascii(mask.snapshot(t), plan.horizon())).map_err(|e| io_err(Path::new("<stdout>"), e))?;
        }
        say(out, "final")?;
    }
    write!(out, "{}", mask.to_ascii()).map_err(|e| io_err(Path::new("<stdout>"), e))
}
