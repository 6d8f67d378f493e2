//! Series ingestion, normalization, calendar covariates, sliding windows and a
//! synthetic generator.
//!
//! # CSV format
//!
//! One row per observation with a header line. The default column names are
//! `timestamp,series_id,value`; any further columns listed in
//! [`CsvSchema::covariates`] are read as real-valued covariates. Rows of one
//! series must appear in strictly increasing time order at a fixed step.

use std::collections::HashMap;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::numerics::{Real, RngState, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),
    #[error("series `{series}`: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { series: String, timestamp: NaiveDateTime },
    #[error("series `{series}`: timestamp {timestamp} is not after {previous}")]
    NonMonotone {
        series: String,
        timestamp: NaiveDateTime,
        previous: NaiveDateTime,
    },
    #[error("series `{series}`: gap between {from} and {to}")]
    Gap {
        series: String,
        from: NaiveDateTime,
        to: NaiveDateTime,
    },
    #[error("series `{series}`: step {got}s is not a multiple of the granularity {expected}s")]
    Misaligned {
        series: String,
        got: i64,
        expected: i64,
    },
    #[error("covariate dimension differs: series `{series}` has {got}, expected {expected}")]
    CovariateDim {
        series: String,
        got: usize,
        expected: usize,
    },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("no series to build a dataset from")]
    Empty,
}

/// One univariate series with optional real covariates per step.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub id: String,
    pub timestamps: Vec<NaiveDateTime>,
    pub values: Vec<Real>,
    /// One vector per timestamp, constant length within a dataset.
    pub covariates: Vec<Vec<Real>>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapPolicy {
    #[default]
    Reject,
    ForwardFill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub series_id: String,
    pub value: String,
    pub covariates: Vec<String>,
    /// `chrono` format string for the timestamp column.
    pub timestamp_format: String,
    /// Expected spacing between consecutive observations.
    pub step_minutes: i64,
    pub gaps: GapPolicy,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            series_id: "series_id".into(),
            value: "value".into(),
            covariates: Vec::new(),
            timestamp_format: "%Y-%m-%d %H:%M:%S".into(),
            step_minutes: 60,
            gaps: GapPolicy::Reject,
        }
    }
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<RawSeries>, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

/// Parses the CSV format from any reader.
pub fn read_csv(reader: impl std::io::Read, schema: &CsvSchema) -> Result<Vec<RawSeries>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let ts_col = col(&schema.timestamp)?;
    let id_col = col(&schema.series_id)?;
    let value_col = col(&schema.value)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, RawSeries> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse_real = |i: usize, what: &str| {
            field(i).parse::<Real>().map_err(|_| DataError::Parse {
                line,
                message: format!("cannot parse {what} `{}`", field(i)),
            })
        };
        let ts = NaiveDateTime::parse_from_str(field(ts_col), &schema.timestamp_format).map_err(
            |e| DataError::Parse {
                line,
                message: format!("timestamp `{}`: {e}", field(ts_col)),
            },
        )?;
        let value = parse_real(value_col, "value")?;
        let covs = cov_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&i, name)| parse_real(i, name))
            .collect::<Result<Vec<_>, _>>()?;

        let id = field(id_col).to_string();
        let series = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RawSeries {
                id: id.clone(),
                timestamps: Vec::new(),
                values: Vec::new(),
                covariates: Vec::new(),
            }
        });
        if let Some(&prev) = series.timestamps.last() {
            if ts == prev {
                return Err(DataError::DuplicateTimestamp {
                    series: id,
                    timestamp: ts,
                });
            }
            if ts < prev {
                return Err(DataError::NonMonotone {
                    series: id,
                    timestamp: ts,
                    previous: prev,
                });
            }
        }
        series.timestamps.push(ts);
        series.values.push(value);
        series.covariates.push(covs);
    }

    let step = Duration::minutes(schema.step_minutes);
    order
        .into_iter()
        .map(|id| {
            let s = by_id.remove(&id).expect("recorded id");
            regularize(s, step, schema.gaps)
        })
        .collect()
}

/// Checks the fixed step, filling or rejecting gaps.
fn regularize(s: RawSeries, step: Duration, policy: GapPolicy) -> Result<RawSeries, DataError> {
    let step_s = step.num_seconds();
    let mut out = RawSeries {
        id: s.id.clone(),
        timestamps: Vec::with_capacity(s.len()),
        values: Vec::with_capacity(s.len()),
        covariates: Vec::with_capacity(s.len()),
    };
    let mut filled = 0usize;
    for i in 0..s.len() {
        if i > 0 {
            let prev = s.timestamps[i - 1];
            let diff = (s.timestamps[i] - prev).num_seconds();
            if diff % step_s != 0 {
                return Err(DataError::Misaligned {
                    series: s.id.clone(),
                    got: diff,
                    expected: step_s,
                });
            }
            let missing = diff / step_s - 1;
            if missing > 0 {
                match policy {
                    GapPolicy::Reject => {
                        return Err(DataError::Gap {
                            series: s.id.clone(),
                            from: prev,
                            to: s.timestamps[i],
                        })
                    }
                    GapPolicy::ForwardFill => {
                        for k in 1..=missing {
                            out.timestamps.push(prev + step * k as i32);
                            out.values.push(s.values[i - 1]);
                            out.covariates.push(s.covariates[i - 1].clone());
                        }
                        filled += missing as usize;
                    }
                }
            }
        }
        out.timestamps.push(s.timestamps[i]);
        out.values.push(s.values[i]);
        out.covariates.push(s.covariates[i].clone());
    }
    if filled > 0 {
        log::warn!("series `{}`: forward-filled {filled} missing steps", s.id);
    }
    Ok(out)
}

/// Mean and standard deviation used to standardize one series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Real,
    pub std: Real,
}

impl NormStats {
    /// Population statistics of `values`; a zero (or undefined) spread falls
    /// back to `std = 1`.
    pub fn fit(values: &[Real]) -> Self {
        let n = values.len().max(1) as Real;
        let mean = values.iter().sum::<Real>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
        let std = var.sqrt();
        if values.len() < 2 || !(std > 0.0) || !std.is_finite() {
            log::warn!("degenerate spread over {} values; using std = 1", values.len());
            return Self { mean, std: 1.0 };
        }
        Self { mean, std }
    }

    pub fn normalize(&self, v: Real) -> Real {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: Real) -> Real {
        v * self.std + self.mean
    }

    /// Scale factor for standard deviations.
    pub fn denormalize_std(&self, s: Real) -> Real {
        s * self.std
    }
}

/// Standardizes `values` with statistics of the first `train_len` entries.
pub fn normalize(values: &[Real], train_len: usize) -> (Vec<Real>, NormStats) {
    let stats = NormStats::fit(&values[..train_len.min(values.len())]);
    (values.iter().map(|&v| stats.normalize(v)).collect(), stats)
}

/// Calendar covariates, each mapped linearly onto `[-0.5, 0.5)` as
/// `index / count - 0.5` (hour 12 of 24 gives 0, January gives -0.5).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalendarFeature {
    Month,
    DayOfWeek,
    HourOfDay,
    MinuteOfHour,
    /// Position of the step within its series, `index / length - 0.5`.
    Age,
}

impl CalendarFeature {
    /// Month, hour-of-day, minute-of-hour (half-hourly solar plants).
    pub const HALF_HOURLY: [CalendarFeature; 3] = [Self::Month, Self::HourOfDay, Self::MinuteOfHour];
    /// Month, hour-of-day, age.
    pub const SOLAR: [CalendarFeature; 3] = [Self::Month, Self::HourOfDay, Self::Age];
    /// Month, day-of-week, hour-of-day, age.
    pub const ELECTRICITY: [CalendarFeature; 4] =
        [Self::Month, Self::DayOfWeek, Self::HourOfDay, Self::Age];

    pub fn value(self, ts: &NaiveDateTime, index: usize, length: usize) -> Real {
        let (pos, count) = match self {
            Self::Month => (ts.month0() as Real, 12.0),
            Self::DayOfWeek => (ts.weekday().num_days_from_monday() as Real, 7.0),
            Self::HourOfDay => (ts.hour() as Real, 24.0),
            Self::MinuteOfHour => (ts.minute() as Real, 60.0),
            Self::Age => (index as Real, length.max(1) as Real),
        };
        pos / count - 0.5
    }
}

pub fn calendar_features(
    ts: &NaiveDateTime,
    index: usize,
    length: usize,
    features: &[CalendarFeature],
) -> Vec<Real> {
    features.iter().map(|f| f.value(ts, index, length)).collect()
}

/// One training or inference sample, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    pub series_index: usize,
    pub series_id: String,
    /// Index of the first past step within the series.
    pub offset: usize,
    pub past_y: Vec<Real>,
    /// `(T_l + T_h) x n_cov`.
    pub covariates: Tensor,
    pub target_y: Vec<Real>,
    pub norm: NormStats,
    pub horizon_timestamps: Vec<NaiveDateTime>,
}

impl SeriesWindow {
    pub fn lookback(&self) -> usize {
        self.past_y.len()
    }

    pub fn horizon(&self) -> usize {
        self.target_y.len()
    }

    pub fn target_denormalized(&self) -> Vec<Real> {
        self.target_y.iter().map(|&v| self.norm.denormalize(v)).collect()
    }

    pub fn past_denormalized(&self) -> Vec<Real> {
        self.past_y.iter().map(|&v| self.norm.denormalize(v)).collect()
    }
}

/// Start offsets of windows of `lookback + horizon` steps inside `range`.
pub fn window_offsets(
    range: std::ops::Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Vec<usize> {
    let span = lookback + horizon;
    if range.len() < span || stride == 0 {
        return Vec::new();
    }
    (range.start..=range.end - span).step_by(stride).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// Leading fraction for training, next fraction for validation, rest test.
    Fractions { train: Real, validation: Real },
    /// Validation starts at `validation_start`, test at `test_start`.
    Dates {
        validation_start: NaiveDateTime,
        test_start: NaiveDateTime,
    },
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::Fractions {
            train: 0.7,
            validation: 0.15,
        }
    }
}

impl SplitSpec {
    /// `[train_end, validation_end)` indices for one series.
    fn bounds(&self, s: &RawSeries) -> Result<(usize, usize), DataError> {
        let n = s.len();
        match *self {
            Self::Fractions { train, validation } => {
                if !(train > 0.0 && validation >= 0.0 && train + validation <= 1.0) {
                    return Err(DataError::Split(format!(
                        "fractions train={train} validation={validation}"
                    )));
                }
                let a = (train * n as Real).floor() as usize;
                let b = ((train + validation) * n as Real).floor() as usize;
                Ok((a, b.min(n)))
            }
            Self::Dates {
                validation_start,
                test_start,
            } => {
                if validation_start > test_start {
                    return Err(DataError::Split(
                        "validation_start after test_start".to_string(),
                    ));
                }
                let a = s.timestamps.partition_point(|t| *t < validation_start);
                let b = s.timestamps.partition_point(|t| *t < test_start);
                Ok((a, b))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub lookback: usize,
    pub horizon: usize,
    /// Steps per day, used by the persistence baseline.
    pub steps_per_day: usize,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub calendar: Vec<CalendarFeature>,
    /// Expose the series index for an ID embedding.
    pub series_embedding: bool,
    pub split: SplitSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            lookback: 24,
            horizon: 24,
            steps_per_day: 24,
            train_stride: 24,
            eval_stride: 24,
            calendar: CalendarFeature::ELECTRICITY.to_vec(),
            series_embedding: true,
            split: SplitSpec::default(),
        }
    }
}

#[derive(Clone, Debug)]
struct PreparedSeries {
    id: String,
    timestamps: Vec<NaiveDateTime>,
    values: Vec<Real>,
    features: Vec<Vec<Real>>,
    norm: NormStats,
    train_end: usize,
    validation_end: usize,
}

/// Normalized series with covariates, ready to be cut into windows.
#[derive(Clone, Debug)]
pub struct Dataset {
    config: DatasetConfig,
    series: Vec<PreparedSeries>,
    covariate_dim: usize,
}

impl Dataset {
    /// Normalizes each series (target and raw covariates) with statistics of
    /// its training portion and appends calendar features.
    pub fn prepare(raw: &[RawSeries], config: DatasetConfig) -> Result<Self, DataError> {
        let first = raw.first().ok_or(DataError::Empty)?;
        let raw_dim = first.covariate_dim();
        let mut series = Vec::with_capacity(raw.len());
        for s in raw {
            if s.covariates.iter().any(|c| c.len() != raw_dim) {
                return Err(DataError::CovariateDim {
                    series: s.id.clone(),
                    got: s.covariate_dim(),
                    expected: raw_dim,
                });
            }
            let (train_end, validation_end) = config.split.bounds(s)?;
            let (values, norm) = normalize(&s.values, train_end);
            let cov_stats: Vec<NormStats> = (0..raw_dim)
                .map(|j| {
                    let col: Vec<Real> = s.covariates[..train_end].iter().map(|c| c[j]).collect();
                    NormStats::fit(&col)
                })
                .collect();
            let n = s.len();
            let features = (0..n)
                .map(|i| {
                    let mut f: Vec<Real> = s.covariates[i]
                        .iter()
                        .zip(&cov_stats)
                        .map(|(&v, st)| st.normalize(v))
                        .collect();
                    f.extend(calendar_features(&s.timestamps[i], i, n, &config.calendar));
                    f
                })
                .collect();
            series.push(PreparedSeries {
                id: s.id.clone(),
                timestamps: s.timestamps.clone(),
                values,
                features,
                norm,
                train_end,
                validation_end,
            });
        }
        let covariate_dim = raw_dim + config.calendar.len();
        Ok(Self {
            config,
            series,
            covariate_dim,
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn n_series(&self) -> usize {
        self.series.len()
    }

    pub fn series_ids(&self) -> Vec<String> {
        self.series.iter().map(|s| s.id.clone()).collect()
    }

    fn range(&self, s: &PreparedSeries, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..s.train_end,
            Split::Validation => s.train_end..s.validation_end,
            Split::Test => s.validation_end..s.values.len(),
        }
    }

    /// Windows lying entirely inside `split`, using the configured stride.
    pub fn windows(&self, split: Split) -> Vec<SeriesWindow> {
        let stride = match split {
            Split::Train => self.config.train_stride,
            _ => self.config.eval_stride,
        };
        self.windows_with_stride(split, stride)
    }

    pub fn windows_with_stride(&self, split: Split, stride: usize) -> Vec<SeriesWindow> {
        let (tl, th) = (self.config.lookback, self.config.horizon);
        let mut out = Vec::new();
        for (si, s) in self.series.iter().enumerate() {
            let range = self.range(s, split);
            let offsets = window_offsets(range.clone(), tl, th, stride);
            if offsets.is_empty() {
                log::info!(
                    "series `{}`: {:?} split has {} steps, fewer than {}; skipped",
                    s.id,
                    split,
                    range.len(),
                    tl + th
                );
            }
            for off in offsets {
                let mut cov = Vec::with_capacity((tl + th) * self.covariate_dim);
                for f in &s.features[off..off + tl + th] {
                    cov.extend_from_slice(f);
                }
                out.push(SeriesWindow {
                    series_index: si,
                    series_id: s.id.clone(),
                    offset: off,
                    past_y: s.values[off..off + tl].to_vec(),
                    covariates: Tensor::from_rows(tl + th, self.covariate_dim, cov),
                    target_y: s.values[off + tl..off + tl + th].to_vec(),
                    norm: s.norm,
                    horizon_timestamps: s.timestamps[off + tl..off + tl + th].to_vec(),
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeasonalComponent {
    pub amplitude: Real,
    /// Period in steps.
    pub period: Real,
}

/// Sinusoid-plus-trend-plus-noise generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_series: usize,
    pub length: usize,
    pub level: Real,
    /// Added to the level for each successive series.
    pub level_step: Real,
    pub seasonal: Vec<SeasonalComponent>,
    /// Per-step slope.
    pub trend: Real,
    pub noise_std: Real,
    pub seed: u64,
    pub start: NaiveDateTime,
    pub step_minutes: i64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_series: 2,
            length: 2000,
            level: 10.0,
            level_step: 2.0,
            seasonal: vec![SeasonalComponent {
                amplitude: 3.0,
                period: 24.0,
            }],
            trend: 0.001,
            noise_std: 0.3,
            seed: 17,
            start: NaiveDateTime::parse_from_str("2014-01-01 00:00:00", "%Y-%m-%d %H:%M:%S")
                .expect("literal"),
            step_minutes: 60,
        }
    }
}

impl SyntheticSpec {
    /// Noise-free value of series `i` at step `t`.
    pub fn clean_value(&self, i: usize, t: usize) -> Real {
        let phase = std::f64::consts::TAU * i as Real / self.n_series.max(1) as Real;
        let seasonal: Real = self
            .seasonal
            .iter()
            .map(|c| c.amplitude * (std::f64::consts::TAU * t as Real / c.period + phase).sin())
            .sum();
        self.level + self.level_step * i as Real + self.trend * t as Real + seasonal
    }
}

pub fn synthesize(spec: &SyntheticSpec) -> Vec<RawSeries> {
    let step = Duration::minutes(spec.step_minutes);
    (0..spec.n_series)
        .map(|i| {
            let mut rng = RngState::stream(spec.seed, i as u64);
            let timestamps = (0..spec.length)
                .map(|t| spec.start + step * t as i32)
                .collect();
            let values = (0..spec.length)
                .map(|t| {
                    let noise = if spec.noise_std > 0.0 {
                        spec.noise_std * rng.normal()
                    } else {
                        0.0
                    };
                    spec.clean_value(i, t) + noise
                })
                .collect();
            RawSeries {
                id: format!("synthetic_{i}"),
                timestamps,
                values,
                covariates: vec![Vec::new(); spec.length],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ts(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").unwrap()
    }

    fn toy_csv(n_series: usize, len: usize) -> String {
        let mut out = String::from("timestamp,series_id,value\n");
        for i in 0..len {
            for s in 0..n_series {
                let t = ts("2014-03-01 00:00:00") + Duration::hours(i as i64);
                out.push_str(&format!("{},s{s},{}\n", t.format("%Y-%m-%d %H:%M:%S"), i * 10 + s));
            }
        }
        out
    }

    #[test]
    fn parses_interleaved_series() {
        let series = read_csv(toy_csv(2, 24).as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(series.len(), 2);
        assert!(series.iter().all(|s| s.len() == 24));
        assert_eq!(series[1].id, "s1");
        assert_eq!(series[1].values[3], 31.0);
    }

    #[test]
    fn many_ids_become_many_series() {
        let series = read_csv(toy_csv(370, 3).as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(series.len(), 370);
    }

    #[test]
    fn duplicate_timestamp_names_series_and_time() {
        let csv = "timestamp,series_id,value\n2014-01-01 00:00:00,a,1\n2014-01-01 00:00:00,a,2\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`a`") && msg.contains("2014-01-01 00:00:00"), "{msg}");
    }

    #[test]
    fn backwards_time_is_rejected() {
        let csv = "timestamp,series_id,value\n2014-01-01 01:00:00,a,1\n2014-01-01 00:00:00,a,2\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, DataError::NonMonotone { .. }));
    }

    #[test]
    fn bad_value_reports_line() {
        let csv = "timestamp,series_id,value\n2014-01-01 00:00:00,a,1\n2014-01-01 01:00:00,a,x\n";
        match read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err() {
            DataError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn gaps_rejected_or_filled() {
        let csv = "timestamp,series_id,value,temp\n2014-01-01 00:00:00,a,1,5\n2014-01-01 03:00:00,a,4,6\n";
        let mut schema = CsvSchema {
            covariates: vec!["temp".into()],
            ..CsvSchema::default()
        };
        assert!(matches!(
            read_csv(csv.as_bytes(), &schema).unwrap_err(),
            DataError::Gap { .. }
        ));
        schema.gaps = GapPolicy::ForwardFill;
        let s = &read_csv(csv.as_bytes(), &schema).unwrap()[0];
        assert_eq!(s.values, vec![1.0, 1.0, 1.0, 4.0]);
        assert_eq!(s.covariates[2], vec![5.0]);
        assert_eq!(s.timestamps[2], ts("2014-01-01 02:00:00"));
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "time,series_id,value\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert_eq!(err.to_string(), "missing column `timestamp` in CSV header");
    }

    #[test]
    fn normalize_small_series() {
        let (v, stats) = normalize(&[1.0, 2.0, 3.0], 3);
        assert_eq!(stats.mean, 2.0);
        assert_abs_diff_eq!(v[0], -v[2], epsilon = 1e-15);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn constant_series_falls_back_to_unit_std() {
        let (v, stats) = normalize(&[5.0, 5.0, 5.0], 3);
        assert_eq!(stats.std, 1.0);
        assert_eq!(v, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn calendar_scaling() {
        let noon = ts("2014-01-15 12:00:00");
        assert_eq!(CalendarFeature::HourOfDay.value(&noon, 0, 1), 0.0);
        assert_eq!(CalendarFeature::Month.value(&noon, 0, 1), -0.5);
        assert_eq!(calendar_features(&noon, 0, 10, &CalendarFeature::ELECTRICITY).len(), 4);
        assert_eq!(CalendarFeature::Age.value(&noon, 5, 10), 0.0);
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_offsets(0..100, 24, 24, 24).len(), 3);
        assert_eq!(window_offsets(0..48, 24, 24, 24).len(), 1);
        assert_eq!(window_offsets(0..47, 24, 24, 24).len(), 0);
    }

    #[test]
    fn windows_stay_inside_their_split() {
        let spec = SyntheticSpec {
            n_series: 1,
            length: 200,
            ..Default::default()
        };
        let raw = synthesize(&spec);
        let config = DatasetConfig {
            train_stride: 1,
            eval_stride: 1,
            split: SplitSpec::Fractions {
                train: 0.5,
                validation: 0.25,
            },
            ..Default::default()
        };
        let ds = Dataset::prepare(&raw, config).unwrap();
        let train = ds.windows(Split::Train);
        let val = ds.windows(Split::Validation);
        let test = ds.windows(Split::Test);
        // 100 train steps: offsets 0..=52
        assert_eq!(train.len(), 53);
        assert!(train.iter().all(|w| w.offset + 48 <= 100));
        assert!(val.iter().all(|w| w.offset >= 100 && w.offset + 48 <= 150));
        assert_eq!(val.len(), 3);
        assert!(test.iter().all(|w| w.offset >= 150));
        // the window that would cross the train/validation boundary is absent
        assert!(!train.iter().chain(&val).any(|w| w.offset == 60));
    }

    #[test]
    fn date_split() {
        let spec = SyntheticSpec {
            n_series: 1,
            length: 24 * 10,
            ..Default::default()
        };
        let raw = synthesize(&spec);
        let config = DatasetConfig {
            split: SplitSpec::Dates {
                validation_start: ts("2014-01-07 00:00:00"),
                test_start: ts("2014-01-09 00:00:00"),
            },
            ..Default::default()
        };
        let ds = Dataset::prepare(&raw, config).unwrap();
        let val = ds.windows(Split::Validation);
        assert_eq!(val.len(), 1);
        assert_eq!(val[0].horizon_timestamps[0], ts("2014-01-08 00:00:00"));
        let test = ds.windows(Split::Test);
        assert!(test
            .iter()
            .all(|w| w.horizon_timestamps[0] >= ts("2014-01-09 00:00:00")));
    }

    #[test]
    fn noise_free_synthetic_is_exact() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            length: 100,
            ..Default::default()
        };
        let series = synthesize(&spec);
        for (i, s) in series.iter().enumerate() {
            for t in 0..s.len() {
                assert_eq!(s.values[t], spec.clean_value(i, t));
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(synthesize(&spec), synthesize(&spec));
    }

    #[test]
    fn daily_sinusoid_has_lag_24_autocorrelation() {
        let spec = SyntheticSpec {
            n_series: 1,
            noise_std: 0.0,
            trend: 0.0,
            length: 24 * 30,
            ..Default::default()
        };
        let v = &synthesize(&spec)[0].values;
        let n = v.len();
        let mean = v.iter().sum::<Real>() / n as Real;
        let var: Real = v.iter().map(|x| (x - mean).powi(2)).sum();
        let cov: Real = (0..n - 24).map(|t| (v[t] - mean) * (v[t + 24] - mean)).sum();
        assert!(cov / var > 0.95, "{}", cov / var);
        // without the finite-sample shrinkage of the standard estimator
        let pearson = {
            let (a, b) = (&v[..n - 24], &v[24..]);
            let ma = a.iter().sum::<Real>() / a.len() as Real;
            let mb = b.iter().sum::<Real>() / b.len() as Real;
            let c: Real = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: Real = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: Real = b.iter().map(|y| (y - mb).powi(2)).sum();
            c / (va * vb).sqrt()
        };
        assert!(pearson > 0.99, "{pearson}");
    }

    proptest! {
        #[test]
        fn denormalize_inverts_normalize(values in proptest::collection::vec(-1e3f64..1e3, 2..50)) {
            let (norm, stats) = normalize(&values, values.len());
            for (n, v) in norm.iter().zip(&values) {
                prop_assert!((stats.denormalize(*n) - v).abs() <= 1e-10 * v.abs().max(1.0));
            }
        }

        #[test]
        fn calendar_scaling_is_monotone(h1 in 0u32..24, h2 in 0u32..24) {
            let a = ts("2014-01-01 00:00:00") + Duration::hours(h1 as i64);
            let b = ts("2014-01-01 00:00:00") + Duration::hours(h2 as i64);
            let (fa, fb) = (
                CalendarFeature::HourOfDay.value(&a, 0, 1),
                CalendarFeature::HourOfDay.value(&b, 0, 1),
            );
            prop_assert_eq!(h1.cmp(&h2), fa.partial_cmp(&fb).unwrap());
            prop_assert!((-0.5..0.5).contains(&fa));
        }

        #[test]
        fn window_shapes(len in 48usize..300, stride in 1usize..30) {
            let spec = SyntheticSpec { n_series: 1, length: len, ..Default::default() };
            let config = DatasetConfig {
                train_stride: stride,
                split: SplitSpec::Fractions { train: 1.0, validation: 0.0 },
                ..Default::default()
            };
            let ds = Dataset::prepare(&synthesize(&spec), config).unwrap();
            let w = ds.windows(Split::Train);
            prop_assert_eq!(w.len(), (len - 48) / stride + 1);
            for win in &w {
                prop_assert_eq!(win.past_y.len(), 24);
                prop_assert_eq!(win.target_y.len(), 24);
                prop_assert_eq!(win.covariates.rows(), 48);
            }
        }
    }
}
