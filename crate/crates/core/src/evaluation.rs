//! Quantile losses, the persistence baseline, horizon sweeps, ablation grids
//! and decode-latency benchmarks. Every metric is computed in the original
//! (denormalized) units.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::backbone::{GaussianForecast, ModelConfig};
use crate::data::{Dataset, DatasetConfig, DataError, RawSeries, SeriesWindow, Split};
use crate::forecaster::{fit, DecodeMode, ForecastError, PlanOptions, Prediction, ProNet, TrainConfig};
use crate::latent::ZMode;
use crate::numerics::{Real, RngState};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("quantile loss: undefined denominator (sum of |y| is zero)")]
    ZeroDenominator,
    #[error("quantile loss: {0} targets but {1} predictions")]
    Length(usize, usize),
    #[error("quantile level {0} outside (0, 1)")]
    Rho(Real),
    #[error("persistence needs {needed} past steps, window has {got}")]
    History { needed: usize, got: usize },
    #[error("no windows to evaluate")]
    Empty,
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// `2 * sum P_rho(y, yhat) / sum |y|`, where `P_rho` charges `rho` per unit
/// of under-prediction and `1 - rho` per unit of over-prediction.
pub fn quantile_loss(y: &[Real], yhat: &[Real], rho: Real) -> Result<Real, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::Length(y.len(), yhat.len()));
    }
    let (num, den) = quantile_terms(y, yhat, rho);
    if den == 0.0 {
        return Err(EvalError::ZeroDenominator);
    }
    Ok(2.0 * num / den)
}

/// `(sum P_rho, sum |y|)`, for pooling over many windows.
fn quantile_terms(y: &[Real], yhat: &[Real], rho: Real) -> (Real, Real) {
    y.iter().zip(yhat).fold((0.0, 0.0), |(num, den), (&y, &q)| {
        let p = if y > q { rho * (y - q) } else { (1.0 - rho) * (q - y) };
        (num + p, den + y.abs())
    })
}

/// `mu + sigma * inverse_normal_cdf(rho)` per step.
pub fn gaussian_quantile(fc: &GaussianForecast, rho: Real) -> Result<Vec<Real>, EvalError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(EvalError::Rho(rho));
    }
    let z = Normal::standard().inverse_cdf(rho);
    Ok(fc.mean.iter().zip(&fc.std).map(|(m, s)| m + s * z).collect())
}

/// Maps a normalized forecast back to the window's original units.
pub fn denormalize(fc: &GaussianForecast, w: &SeriesWindow) -> GaussianForecast {
    GaussianForecast {
        mean: fc.mean.iter().map(|&m| w.norm.denormalize(m)).collect(),
        std: fc.std.iter().map(|&s| w.norm.denormalize_std(s)).collect(),
    }
}

/// Repeats the last full day of `past`: step `h` copies
/// `past[T_l - L_d + (h mod L_d)]`.
pub fn persistence_forecast(
    past: &[Real],
    horizon: usize,
    steps_per_day: usize,
) -> Result<Vec<Real>, EvalError> {
    if steps_per_day == 0 || past.len() < steps_per_day {
        return Err(EvalError::History {
            needed: steps_per_day.max(1),
            got: past.len(),
        });
    }
    let base = past.len() - steps_per_day;
    Ok((0..horizon).map(|h| past[base + h % steps_per_day]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesQuantiles {
    pub series_id: String,
    pub rho05: Real,
    pub rho09: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileReport {
    pub rho05: Real,
    pub rho09: Real,
    pub per_series: Vec<SeriesQuantiles>,
}

/// `(series_id, y, q05, q09)` of one window, in original units.
type ScoredWindow = (String, Vec<Real>, Vec<Real>, Vec<Real>);

/// Pools scored windows into a report.
fn report_from(rows: &[ScoredWindow]) -> Result<QuantileReport, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut ids: Vec<&str> = Vec::new();
    let mut acc: Vec<[Real; 3]> = Vec::new();
    let mut total = [0.0; 3];
    for (id, y, q5, q9) in rows {
        let k = match ids.iter().position(|s| s == id) {
            Some(k) => k,
            None => {
                ids.push(id);
                acc.push([0.0; 3]);
                ids.len() - 1
            }
        };
        let (n5, den) = quantile_terms(y, q5, 0.5);
        let (n9, _) = quantile_terms(y, q9, 0.9);
        for (slot, v) in [n5, n9, den].into_iter().enumerate() {
            acc[k][slot] += v;
            total[slot] += v;
        }
    }
    let ratio = |n: Real, d: Real| {
        if d == 0.0 {
            Err(EvalError::ZeroDenominator)
        } else {
            Ok(2.0 * n / d)
        }
    };
    let per_series = ids
        .iter()
        .zip(&acc)
        .map(|(id, a)| {
            Ok(SeriesQuantiles {
                series_id: id.to_string(),
                rho05: ratio(a[0], a[2])?,
                rho09: ratio(a[1], a[2])?,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(QuantileReport {
        rho05: ratio(total[0], total[2])?,
        rho09: ratio(total[1], total[2])?,
        per_series,
    })
}

/// Persistence baseline; its point forecast serves as every quantile.
pub fn evaluate_persistence(windows: &[SeriesWindow], steps_per_day: usize) -> Result<QuantileReport, EvalError> {
    let rows = windows
        .iter()
        .map(|w| {
            let f = persistence_forecast(&w.past_denormalized(), w.horizon(), steps_per_day)?;
            Ok((w.series_id.clone(), w.target_denormalized(), f.clone(), f))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    report_from(&rows)
}

/// Model forecasts for `windows` together with the pooled report.
pub fn evaluate_model(
    model: &ProNet,
    windows: &[SeriesWindow],
    mode: DecodeMode,
    z_mode: ZMode,
    plan: &PlanOptions,
    seed: u64,
) -> Result<(QuantileReport, Vec<Prediction>), EvalError> {
    let preds: Vec<Prediction> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = RngState::stream(seed, i as u64);
            model.predict(w, mode, z_mode, plan, Some(&mut rng))
        })
        .collect::<Result<_, _>>()?;
    let rows = windows
        .iter()
        .zip(&preds)
        .map(|(w, p)| {
            let fc = denormalize(&p.forecast, w);
            Ok((
                w.series_id.clone(),
                w.target_denormalized(),
                gaussian_quantile(&fc, 0.5)?,
                gaussian_quantile(&fc, 0.9)?,
            ))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok((report_from(&rows)?, preds))
}

/// Data, architecture and optimizer settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    /// Architecture with the dataset-derived widths filled in.
    pub fn resolved_model(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig {
            lookback: self.data.lookback,
            horizon: self.data.horizon,
            covariate_dim: ds.covariate_dim(),
            n_series: if self.data.series_embedding { ds.n_series() } else { 0 },
            ..self.model.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub mode: String,
    pub horizon: usize,
    pub rho05: Real,
    pub rho09: Real,
    pub persistence_rho05: Real,
    pub best_val_nll: Real,
    pub epochs: usize,
}

/// Trains `mode` on the training split, then scores the test split.
pub fn train_and_evaluate(raw: &[RawSeries], spec: &ExperimentSpec, mode: DecodeMode) -> Result<CellResult, EvalError> {
    let ds = Dataset::prepare(raw, spec.data.clone())?;
    let model_config = spec.resolved_model(&ds);
    let model = ProNet::new(&model_config, spec.train.seed)?;
    let report = fit(
        model,
        &ds.windows(Split::Train),
        &ds.windows(Split::Validation),
        mode,
        &spec.train,
        |_| {},
    )?;
    let test = ds.windows(Split::Test);
    let (q, _) = evaluate_model(
        &report.model,
        &test,
        mode,
        spec.train.inference_z,
        &spec.train.plan,
        spec.train.seed,
    )?;
    let persistence = evaluate_persistence(&test, spec.data.steps_per_day)?;
    Ok(CellResult {
        mode: mode.to_string(),
        horizon: spec.data.horizon,
        rho05: q.rho05,
        rho09: q.rho09,
        persistence_rho05: persistence.rho05,
        best_val_nll: report.best_val_nll,
        epochs: report.log.len(),
    })
}

/// One trained model per `(horizon, mode)`; rows ordered by horizon, then mode.
pub fn horizon_sweep(
    raw: &[RawSeries],
    spec: &ExperimentSpec,
    horizons: &[usize],
    modes: &[DecodeMode],
) -> Result<Vec<CellResult>, EvalError> {
    let mut rows = Vec::new();
    for &h in horizons {
        let mut s = spec.clone();
        s.data.horizon = h;
        for &mode in modes {
            log::info!("sweep: horizon {h}, mode {mode}");
            rows.push(train_and_evaluate(raw, &s, mode)?);
        }
    }
    Ok(rows)
}

/// Whether each mode's rho0.5 is non-decreasing in the horizon.
pub fn monotone_by_mode(rows: &[CellResult]) -> Vec<(String, bool)> {
    let mut modes: Vec<String> = Vec::new();
    for r in rows {
        if !modes.contains(&r.mode) {
            modes.push(r.mode.clone());
        }
    }
    modes
        .into_iter()
        .map(|m| {
            let mut v: Vec<(usize, Real)> = rows
                .iter()
                .filter(|r| r.mode == m)
                .map(|r| (r.horizon, r.rho05))
                .collect();
            v.sort_by_key(|x| x.0);
            let ok = v.windows(2).all(|p| p[1].1 >= p[0].1);
            (m, ok)
        })
        .collect()
}

/// Same backbone and data, one row per mode.
pub fn ablation(raw: &[RawSeries], spec: &ExperimentSpec, modes: &[DecodeMode]) -> Result<Vec<CellResult>, EvalError> {
    modes.iter().map(|&m| train_and_evaluate(raw, spec, m)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: String,
    /// Decoder passes per window, smallest and largest over the batch.
    pub passes_min: usize,
    pub passes_max: usize,
    pub mean_ms: Real,
    pub std_ms: Real,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub windows: usize,
    pub warmup: usize,
    pub rows: Vec<BenchRow>,
}

pub const BENCH_WARMUP: usize = 3;

/// Wall-clock time to forecast `batch` sequentially on the calling thread,
/// over `runs` timed repetitions after [`BENCH_WARMUP`] untimed ones.
pub fn bench_decode(
    model: &ProNet,
    batch: &[SeriesWindow],
    modes: &[DecodeMode],
    runs: usize,
    plan: &PlanOptions,
) -> Result<BenchReport, EvalError> {
    if batch.is_empty() {
        return Err(EvalError::Empty);
    }
    let runs = runs.max(1);
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let once = || -> Result<Vec<usize>, EvalError> {
            batch
                .iter()
                .map(|w| Ok(model.predict(w, mode, ZMode::Mean, plan, None)?.trace.n_passes()))
                .collect()
        };
        let mut passes = Vec::new();
        for _ in 0..BENCH_WARMUP {
            passes = once()?;
        }
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            std::hint::black_box(once()?);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<Real>() / runs as Real;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<Real>() / runs as Real;
        rows.push(BenchRow {
            mode: mode.to_string(),
            passes_min: *passes.iter().min().expect("non-empty batch"),
            passes_max: *passes.iter().max().expect("non-empty batch"),
            mean_ms: mean,
            std_ms: var.sqrt(),
            runs,
        });
    }
    Ok(BenchReport {
        windows: batch.len(),
        warmup: BENCH_WARMUP,
        rows,
    })
}
