//! Training and partially autoregressive inference.
//!
//! Training runs one teacher-forced decoder pass per sample under the final
//! progressive mask of that sample's plan. Inference runs one pass per plan
//! iteration, feeding back the prediction buffer and overwriting the
//! positions scheduled for that iteration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Dropout, GaussianForecast, ModelConfig, ModelError, Transformer};
use crate::data::SeriesWindow;
use crate::latent::{
    elbo_loss, kl_graph, sample_z, LatentError, LatentHeads, LatentImportance, ZMode,
};
use crate::numerics::{
    Adam, AdamConfig, Bound, Graph, NumericsError, ParamStore, Real, RngState, Tensor, Var,
};
use crate::scheduler::{
    build_mask, reweight, select_starts_with, SchedulerError, SegmentPlan, StartSelection,
};

const HALF_LN_TAU: Real = 0.918_938_533_204_672_7; // 0.5 * ln(2 pi)

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("{0} split has no windows")]
    EmptySplit(&'static str),
    #[error("invalid mode `{0}`")]
    Mode(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not match the configuration: {0}")]
    Mismatch(String),
}

/// Decoding strategy over the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DecodeMode {
    /// One step per pass.
    Ar,
    /// Every step in one pass.
    Nar,
    /// `n_g` evenly spaced segments.
    ParEven(usize),
    /// `n_g` segments chosen from the latent importance.
    ProNet(usize),
}

impl DecodeMode {
    /// The plan for every mode except `ProNet`, whose plan depends on `z`.
    pub fn fixed_plan(&self, horizon: usize) -> Result<Option<SegmentPlan>, ForecastError> {
        Ok(match *self {
            Self::Ar => Some(SegmentPlan::autoregressive(horizon)),
            Self::Nar => Some(SegmentPlan::non_autoregressive(horizon)),
            Self::ParEven(n) => Some(SegmentPlan::even(horizon, n)?),
            Self::ProNet(n) => {
                if n == 0 || n > horizon {
                    return Err(SchedulerError::GroupCount {
                        n_groups: n,
                        horizon,
                    }
                    .into());
                }
                None
            }
        })
    }

    pub fn uses_latent(&self) -> bool {
        matches!(self, Self::ProNet(_))
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ar => write!(f, "ar"),
            Self::Nar => write!(f, "nar"),
            Self::ParEven(n) => write!(f, "par_even:{n}"),
            Self::ProNet(n) => write!(f, "pronet:{n}"),
        }
    }
}

impl FromStr for DecodeMode {
    type Err = ForecastError;

    /// `ar`, `nar`, `par_even:<n_g>` or `pronet:<n_g>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ForecastError::Mode(s.to_string());
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a.parse::<usize>().map_err(|_| bad())?)),
            None => (s, None),
        };
        match (kind, arg) {
            ("ar", None) => Ok(Self::Ar),
            ("nar", None) => Ok(Self::Nar),
            ("par_even", Some(n)) => Ok(Self::ParEven(n)),
            ("pronet", Some(n)) => Ok(Self::ProNet(n)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for DecodeMode {
    type Error = ForecastError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DecodeMode> for String {
    fn from(m: DecodeMode) -> String {
        m.to_string()
    }
}

/// How a plan is derived from `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanOptions {
    pub reweight: bool,
    pub selection: StartSelection,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            reweight: true,
            selection: StartSelection::ForcedFirst,
        }
    }
}

impl PlanOptions {
    pub fn plan(&self, z: &[Real], n_groups: usize) -> Result<SegmentPlan, SchedulerError> {
        if self.reweight {
            select_starts_with(&reweight(z, n_groups), n_groups, self.selection)
        } else {
            select_starts_with(z, n_groups, self.selection)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: Real,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// KL weight.
    pub beta: Real,
    /// Ramp `beta` linearly over the first 10% of epochs.
    pub kl_warmup: bool,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: Real,
    pub plan: PlanOptions,
    /// How `z` is drawn from the prior at validation and prediction time.
    pub inference_z: ZMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            beta: 1.0,
            kl_warmup: false,
            clip_norm: 5.0,
            plan: PlanOptions::default(),
            inference_z: ZMode::Mean,
            seed: 0,
        }
    }
}

/// Loss terms of one sample, on its graph.
pub struct SampleLoss {
    pub loss: Var,
    pub nll: Var,
    pub kl: Option<Var>,
    pub plan: SegmentPlan,
}

/// Per-pass record of an inference run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DecodeTrace {
    /// 0-based positions written at each pass.
    pub written: Vec<Vec<usize>>,
    /// Decoder value inputs at each pass.
    pub inputs: Vec<Vec<Real>>,
    /// 1-based pass that last wrote each position.
    pub final_write: Vec<usize>,
}

impl DecodeTrace {
    pub fn n_passes(&self) -> usize {
        self.written.len()
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub forecast: GaussianForecast,
    pub plan: SegmentPlan,
    pub trace: DecodeTrace,
    pub latent: Option<LatentImportance>,
}

/// Value inputs for a plan: zero at segment starts, else the previous step.
pub fn decoder_inputs(plan: &SegmentPlan, values: &[Real]) -> Vec<Real> {
    (0..plan.horizon())
        .map(|s| if plan.is_start(s) { 0.0 } else { values[s - 1] })
        .collect()
}

/// Runs the progressive decode loop of `plan`. `pass(y_in, mask)` returns
/// per-position `(mu, sigma)` for the whole horizon.
pub fn progressive_decode<E>(
    plan: &SegmentPlan,
    mut pass: impl FnMut(&[Real], &[bool]) -> Result<(Vec<Real>, Vec<Real>), E>,
) -> Result<(GaussianForecast, DecodeTrace), E> {
    let th = plan.horizon();
    let mask = build_mask(plan);
    let mut mean = vec![0.0; th];
    let mut std = vec![0.0; th];
    let mut trace = DecodeTrace {
        final_write: vec![0; th],
        ..Default::default()
    };
    for t in 0..mask.n_passes() {
        let y_in = decoder_inputs(plan, &mean);
        let (mu, sigma) = pass(&y_in, mask.snapshot(t))?;
        for &pos in mask.written(t) {
            mean[pos] = mu[pos];
            std[pos] = sigma[pos];
            trace.final_write[pos] = t + 1;
        }
        trace.written.push(mask.written(t).to_vec());
        trace.inputs.push(y_in);
    }
    Ok((GaussianForecast { mean, std }, trace))
}

/// Mean over steps of `0.5 ln(2 pi) + ln sigma + (y - mu)^2 / (2 sigma^2)`.
pub fn gaussian_nll(g: &mut Graph, mu: Var, sigma: Var, target: &[Real]) -> Result<Var, NumericsError> {
    let y = g.constant(Tensor::column(target));
    let r = g.sub(y, mu)?;
    let r2 = g.square(r);
    let s2 = g.square(sigma);
    let s2 = g.scale(s2, 2.0);
    let quad = g.div(r2, s2)?;
    let ls = g.log(sigma);
    let terms = g.add(ls, quad)?;
    let m = g.mean(terms);
    Ok(g.add_scalar(m, HALF_LN_TAU))
}

/// Summed Gaussian NLL of plain values.
pub fn gaussian_nll_sum(mean: &[Real], std: &[Real], target: &[Real]) -> Real {
    mean.iter()
        .zip(std)
        .zip(target)
        .map(|((m, s), y)| HALF_LN_TAU + s.ln() + (y - m) * (y - m) / (2.0 * s * s))
        .sum()
}

/// Transformer backbone plus prior and posterior heads over one store.
#[derive(Clone, Debug)]
pub struct ProNet {
    config: ModelConfig,
    params: ParamStore,
    backbone: Transformer,
    latent: LatentHeads,
}

impl ProNet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ForecastError> {
        let mut params = ParamStore::new();
        let mut rng = RngState::new(seed);
        let backbone = Transformer::new(config, &mut params, &mut rng)?;
        let latent = LatentHeads::new(config, &mut params, &mut rng);
        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            latent,
        })
    }

    /// Rebuilds the layout for `config` and adopts `params`, which must
    /// match it name for name and shape for shape.
    pub fn from_params(config: &ModelConfig, params: ParamStore) -> Result<Self, ForecastError> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(ForecastError::Checkpoint(format!(
                "{} parameters, layout expects {}",
                params.len(),
                model.params.len()
            )));
        }
        for (a, b) in model.params.ids().zip(params.ids()) {
            let (na, nb) = (model.params.name(a), params.name(b));
            if na != nb || model.params.get(a).shape() != params.get(b).shape() {
                return Err(ForecastError::Checkpoint(format!(
                    "parameter `{nb}` {:?} does not match `{na}` {:?}",
                    params.get(b).shape(),
                    model.params.get(a).shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone(&self) -> &Transformer {
        &self.backbone
    }

    pub fn latent(&self) -> &LatentHeads {
        &self.latent
    }

    fn series_index(&self, w: &SeriesWindow) -> usize {
        if self.config.n_series > 0 {
            w.series_index
        } else {
            0
        }
    }

    /// Builds the training loss of one window on `g`. `rng` drives the
    /// posterior sample and dropout.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        w: &SeriesWindow,
        mode: DecodeMode,
        config: &TrainConfig,
        beta: Real,
        rng: &mut RngState,
    ) -> Result<SampleLoss, ForecastError> {
        let th = self.config.horizon;
        let series = self.series_index(w);
        let mut drop = if self.config.dropout > 0.0 {
            Dropout::train(self.config.dropout, RngState::stream(rng.next_u64(), 1))
        } else {
            Dropout::off()
        };
        let enc = self
            .backbone
            .encode(g, p, &w.past_y, &w.covariates, series, &mut drop)?;
        let (plan, z, kl) = match mode {
            DecodeMode::ProNet(n_groups) => {
                let q = self
                    .latent
                    .posterior(g, p, enc, &w.covariates, Some(&w.target_y))?;
                let prior = self.latent.prior(g, p, enc, &w.covariates)?;
                let z = sample_z(g, q, ZMode::Sample, Some(rng))?;
                let plan = config.plan.plan(g.value(z).data(), n_groups)?;
                let kl = kl_graph(g, q, prior)?;
                (plan, Some(z), Some(kl))
            }
            _ => (mode.fixed_plan(th)?.expect("fixed plan"), None, None),
        };
        let mask = build_mask(&plan);
        let y_in = decoder_inputs(&plan, &w.target_y);
        let out = self.backbone.decode(
            g,
            p,
            enc,
            &y_in,
            &w.covariates,
            z,
            series,
            Some(mask.matrix()),
            &mut drop,
        )?;
        let nll = gaussian_nll(g, out.mu, out.sigma, &w.target_y)?;
        let loss = match kl {
            Some(kl) => elbo_loss(g, nll, kl, beta)?,
            None => nll,
        };
        Ok(SampleLoss { loss, nll, kl, plan })
    }

    /// Mean loss over `batch`, with one graph per sample evaluated in
    /// parallel and gradients summed in batch order. Returns
    /// `(stats, gradients aligned with the store)`.
    pub fn batch_gradients(
        &self,
        batch: &[&SeriesWindow],
        mode: DecodeMode,
        config: &TrainConfig,
        beta: Real,
        step_seed: u64,
    ) -> Result<(StepStats, Vec<Tensor>), ForecastError> {
        let scale = 1.0 / batch.len() as Real;
        let per_sample: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(i, w)| {
                let mut rng = RngState::stream(step_seed, i as u64);
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, true);
                let s = self.sample_loss(&mut g, &p, w, mode, config, beta, &mut rng)?;
                let scaled = g.scale(s.loss, scale);
                let grads = g.backward(scaled)?;
                let flat: Vec<Tensor> = p
                    .vars()
                    .iter()
                    .zip(self.params.tensors())
                    .map(|(&v, t)| grads.get_or_zeros(v, t))
                    .collect();
                let stats = (
                    g.value(s.loss).item(),
                    g.value(s.nll).item(),
                    s.kl.map_or(0.0, |k| g.value(k).item()),
                    s.plan.starts().to_vec(),
                );
                Ok::<_, ForecastError>((stats, flat))
            })
            .collect::<Result<_, _>>()?;

        let mut total: Vec<Tensor> = self
            .params
            .tensors()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let mut stats = StepStats::default();
        for ((loss, nll, kl, starts), grads) in per_sample {
            if !loss.is_finite() {
                return Err(ForecastError::NonFinite(format!("loss {loss}")));
            }
            stats.loss += loss * scale;
            stats.nll += nll * scale;
            stats.kl += kl * scale;
            stats.starts.push(starts);
            for (t, g) in total.iter_mut().zip(grads) {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Ok((stats, total))
    }

    /// Forecast for `w` (targets unused) under `mode`.
    pub fn predict(
        &self,
        w: &SeriesWindow,
        mode: DecodeMode,
        z_mode: ZMode,
        plan_options: &PlanOptions,
        rng: Option<&mut RngState>,
    ) -> Result<Prediction, ForecastError> {
        let th = self.config.horizon;
        match mode {
            DecodeMode::Ar => self.predict_standard_ar(w),
            DecodeMode::Nar => self.predict_standard_nar(w),
            DecodeMode::ParEven(_) => {
                let plan = mode.fixed_plan(th)?.expect("fixed plan");
                self.predict_with_plan(w, &plan, None)
            }
            DecodeMode::ProNet(n_groups) => {
                self.check_finite()?;
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, false);
                let series = self.series_index(w);
                let enc = self.backbone.encode(
                    &mut g,
                    &p,
                    &w.past_y,
                    &w.covariates,
                    series,
                    &mut Dropout::off(),
                )?;
                let prior = self.latent.prior(&mut g, &p, enc, &w.covariates)?;
                let mut latent = prior.read(&g);
                let z = latent.draw(z_mode, rng)?;
                let plan = plan_options.plan(&z, n_groups)?;
                latent.z = Some(z.clone());
                let mut pred = self.predict_with_plan(w, &plan, Some(&z))?;
                pred.latent = Some(latent);
                Ok(pred)
            }
        }
    }

    fn check_finite(&self) -> Result<(), ForecastError> {
        if self.params.all_finite() {
            Ok(())
        } else {
            Err(ForecastError::NonFinite("model parameters".into()))
        }
    }

    /// Progressive decode of `plan`, with `z` as the decoder's latent input.
    pub fn predict_with_plan(
        &self,
        w: &SeriesWindow,
        plan: &SegmentPlan,
        z: Option<&[Real]>,
    ) -> Result<Prediction, ForecastError> {
        self.check_finite()?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let series = self.series_index(w);
        let mut drop = Dropout::off();
        let enc = self
            .backbone
            .encode(&mut g, &p, &w.past_y, &w.covariates, series, &mut drop)?;
        let z = z.map(|z| g.constant(Tensor::column(z)));
        let (forecast, trace) = progressive_decode(plan, |y_in, mask| {
            let out = self.backbone.decode(
                &mut g,
                &p,
                enc,
                y_in,
                &w.covariates,
                z,
                series,
                Some(mask),
                &mut drop,
            )?;
            Ok::<_, ForecastError>((
                g.value(out.mu).data().to_vec(),
                g.value(out.sigma).data().to_vec(),
            ))
        })?;
        Ok(Prediction {
            forecast,
            plan: plan.clone(),
            trace,
            latent: None,
        })
    }

    /// Classic autoregressive decoding with a lower-triangular mask: pass
    /// `t` keeps the output at step `t`.
    fn predict_standard_ar(&self, w: &SeriesWindow) -> Result<Prediction, ForecastError> {
        self.check_finite()?;
        let th = self.config.horizon;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let series = self.series_index(w);
        let mut drop = Dropout::off();
        let enc = self
            .backbone
            .encode(&mut g, &p, &w.past_y, &w.covariates, series, &mut drop)?;
        let causal: Vec<bool> = (0..th * th).map(|i| i % th <= i / th).collect();
        let (mut mean, mut std) = (vec![0.0; th], vec![0.0; th]);
        let mut trace = DecodeTrace::default();
        for t in 0..th {
            let mut y_in = vec![0.0; th];
            y_in[1..].copy_from_slice(&mean[..th - 1]);
            let out = self.backbone.decode(
                &mut g,
                &p,
                enc,
                &y_in,
                &w.covariates,
                None,
                series,
                Some(&causal),
                &mut drop,
            )?;
            mean[t] = g.value(out.mu).data()[t];
            std[t] = g.value(out.sigma).data()[t];
            trace.written.push(vec![t]);
            trace.inputs.push(y_in);
            trace.final_write.push(t + 1);
        }
        Ok(Prediction {
            forecast: GaussianForecast { mean, std },
            plan: SegmentPlan::autoregressive(th),
            trace,
            latent: None,
        })
    }

    /// Single unmasked pass over zero value inputs.
    fn predict_standard_nar(&self, w: &SeriesWindow) -> Result<Prediction, ForecastError> {
        self.check_finite()?;
        let th = self.config.horizon;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let series = self.series_index(w);
        let mut drop = Dropout::off();
        let enc = self
            .backbone
            .encode(&mut g, &p, &w.past_y, &w.covariates, series, &mut drop)?;
        let y_in = vec![0.0; th];
        let out = self.backbone.decode(
            &mut g,
            &p,
            enc,
            &y_in,
            &w.covariates,
            None,
            series,
            None,
            &mut drop,
        )?;
        Ok(Prediction {
            forecast: GaussianForecast {
                mean: g.value(out.mu).data().to_vec(),
                std: g.value(out.sigma).data().to_vec(),
            },
            plan: SegmentPlan::non_autoregressive(th),
            trace: DecodeTrace {
                written: vec![(0..th).collect()],
                inputs: vec![y_in],
                final_write: vec![1; th],
            },
            latent: None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: Real,
    pub nll: Real,
    pub kl: Real,
    /// 0-based starts chosen per sample.
    pub starts: Vec<Vec<usize>>,
}

/// Scales `grads` so that their joint L2 norm is at most `max_norm`.
fn clip(grads: &mut [Tensor], max_norm: Real) -> Real {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<Real>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One optimizer update on `batch`.
pub fn train_step(
    model: &mut ProNet,
    adam: &mut Adam,
    batch: &[&SeriesWindow],
    mode: DecodeMode,
    config: &TrainConfig,
    beta: Real,
    step_seed: u64,
) -> Result<StepStats, ForecastError> {
    let (stats, mut grads) = model.batch_gradients(batch, mode, config, beta, step_seed)?;
    let norm = clip(&mut grads, config.clip_norm);
    if !norm.is_finite() {
        return Err(ForecastError::NonFinite(format!("gradient norm {norm}")));
    }
    adam.step(&mut model.params, &grads);
    if !model.params.all_finite() {
        return Err(ForecastError::NonFinite("parameters after update".into()));
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: Real,
    pub val_nll: Real,
    pub kl: Real,
    pub lr: Real,
    pub seconds: Real,
    /// Count of training samples whose plan started a segment at each
    /// (0-based) step.
    pub start_histogram: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub model: ProNet,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_nll: Real,
    pub stopped_early: bool,
}

/// Mean per-step Gaussian NLL of inference-path forecasts.
pub fn validation_nll(
    model: &ProNet,
    windows: &[SeriesWindow],
    mode: DecodeMode,
    config: &TrainConfig,
) -> Result<Real, ForecastError> {
    let per: Vec<Real> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = RngState::stream(config.seed ^ 0x76a1, i as u64);
            let pred = model.predict(w, mode, config.inference_z, &config.plan, Some(&mut rng))?;
            Ok::<_, ForecastError>(
                gaussian_nll_sum(&pred.forecast.mean, &pred.forecast.std, &w.target_y)
                    / w.horizon() as Real,
            )
        })
        .collect::<Result<_, _>>()?;
    let v = per.iter().sum::<Real>() / per.len() as Real;
    if v.is_nan() {
        return Err(ForecastError::NonFinite("validation NLL".into()));
    }
    Ok(v)
}

/// Adam training with early stopping on validation NLL; returns the
/// best-validation parameters. `on_epoch` sees each log row as it is made.
pub fn fit(
    mut model: ProNet,
    train: &[SeriesWindow],
    validation: &[SeriesWindow],
    mode: DecodeMode,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitReport, ForecastError> {
    if train.is_empty() {
        return Err(ForecastError::EmptySplit("training"));
    }
    if validation.is_empty() {
        return Err(ForecastError::EmptySplit("validation"));
    }
    mode.fixed_plan(model.config.horizon)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let batch_size = config.batch_size.max(1);
    let warmup_epochs = ((config.max_epochs as Real) * 0.1).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (Real::INFINITY, 0usize, model.params.clone());
    let mut bad_epochs = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let beta = if config.kl_warmup {
            config.beta * (epoch as Real / warmup_epochs as Real).min(1.0)
        } else {
            config.beta
        };
        RngState::stream(config.seed, epoch as u64).shuffle(&mut order);
        let mut hist = vec![0u64; model.config.horizon];
        let (mut nll, mut kl, mut seen) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&SeriesWindow> = chunk.iter().map(|&i| &train[i]).collect();
            let step_seed = config
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(((epoch as u64) << 32) | b as u64);
            let stats = train_step(&mut model, &mut adam, &batch, mode, config, beta, step_seed)?;
            nll += stats.nll * chunk.len() as Real;
            kl += stats.kl * chunk.len() as Real;
            seen += chunk.len();
            for starts in &stats.starts {
                for &s in starts {
                    hist[s] += 1;
                }
            }
        }
        let val_nll = validation_nll(&model, validation, mode, config)?;
        let entry = EpochLog {
            epoch,
            train_nll: nll / seen as Real,
            val_nll,
            kl: kl / seen as Real,
            lr: config.lr,
            seconds: started.elapsed().as_secs_f64(),
            start_histogram: hist,
        };
        log::info!(
            "epoch {epoch}: train_nll {:.5} val_nll {:.5} kl {:.5}",
            entry.train_nll,
            entry.val_nll,
            entry.kl
        );
        on_epoch(&entry);
        log.push(entry);
        if val_nll < best.0 {
            best = (val_nll, epoch, model.params.clone());
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val_nll, best_epoch, params) = best;
    model.params = params;
    Ok(FitReport {
        model,
        log,
        best_epoch,
        best_val_nll,
        stopped_early,
    })
}

pub const CHECKPOINT_FORMAT: &str = "pronet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON container for a trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub mode: DecodeMode,
    pub seed: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &ProNet, mode: DecodeMode, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            mode,
            seed,
            params: model.params.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ForecastError> {
        let text = serde_json::to_string(self).map_err(|e| ForecastError::Checkpoint(e.to_string()))?;
        std::fs::write(path.as_ref(), text)
            .map_err(|e| ForecastError::Checkpoint(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ForecastError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ForecastError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        let ck: Self =
            serde_json::from_str(&text).map_err(|e| ForecastError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ForecastError::Checkpoint(format!(
                "unsupported container {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }

    /// Model for this checkpoint; `expected` (when given) must match the
    /// stored architecture.
    pub fn into_model(self, expected: Option<&ModelConfig>) -> Result<ProNet, ForecastError> {
        if let Some(diff) = expected.and_then(|e| e.first_difference(&self.model)) {
            return Err(ForecastError::Mismatch(format!("model.{diff}")));
        }
        ProNet::from_params(&self.model, self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, Dataset, DatasetConfig, Split, SplitSpec, SyntheticSpec};
    use crate::numerics::grad_check;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            d_hid: 8,
            n_enc: 1,
            n_dec: 1,
            n_heads: 2,
            d_ff: 8,
            dropout: 0.0,
            lookback: 6,
            horizon: 6,
            covariate_dim: 1,
            n_series: 2,
            latent_hidden: 6,
        }
    }

    fn windows(config: &ModelConfig, n: usize, noise: Real) -> Vec<SeriesWindow> {
        let spec = SyntheticSpec {
            n_series: 2,
            length: 200,
            noise_std: noise,
            seasonal: vec![crate::data::SeasonalComponent {
                amplitude: 3.0,
                period: 6.0,
            }],
            ..Default::default()
        };
        let ds = Dataset::prepare(
            &synthesize(&spec),
            DatasetConfig {
                lookback: config.lookback,
                horizon: config.horizon,
                steps_per_day: 6,
                train_stride: 1,
                eval_stride: 1,
                calendar: vec![crate::data::CalendarFeature::HourOfDay],
                series_embedding: true,
                split: SplitSpec::Fractions {
                    train: 0.8,
                    validation: 0.1,
                },
            },
        )
        .unwrap();
        ds.windows(Split::Train).into_iter().take(n).collect()
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in [DecodeMode::Ar, DecodeMode::Nar, DecodeMode::ParEven(4), DecodeMode::ProNet(12)] {
            assert_eq!(m.to_string().parse::<DecodeMode>().unwrap(), m);
        }
        assert!("pronet".parse::<DecodeMode>().is_err());
        assert!("ar:3".parse::<DecodeMode>().is_err());
        assert!(DecodeMode::ProNet(9).fixed_plan(8).is_err());
    }

    #[test]
    fn teacher_inputs_zero_at_starts() {
        let plan = SegmentPlan::from_one_based(7, &[1, 3, 5]).unwrap();
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(decoder_inputs(&plan, &y), vec![0.0, 1.0, 0.0, 3.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn perfect_mean_with_unit_sigma_nll() {
        let y = [0.3, -1.0, 2.0, 0.0];
        let sum = gaussian_nll_sum(&y, &[1.0; 4], &y);
        assert!((sum - 0.5 * (std::f64::consts::TAU).ln() * 4.0).abs() < 1e-12);
        let mut g = Graph::new();
        let mu = g.constant(Tensor::column(&y));
        let sigma = g.constant(Tensor::filled(4, 1, 1.0));
        let m = gaussian_nll(&mut g, mu, sigma, &y).unwrap();
        assert!((g.value(m).item() - HALF_LN_TAU).abs() < 1e-15);
    }

    #[test]
    fn three_segment_plan_writes_and_final_iterations() {
        let plan = SegmentPlan::from_one_based(7, &[1, 3, 5]).unwrap();
        let (_, trace) =
            progressive_decode(&plan, |_, _| Ok::<_, ()>((vec![0.0; 7], vec![1.0; 7]))).unwrap();
        assert_eq!(trace.n_passes(), 3);
        assert_eq!(trace.written, vec![vec![0, 2, 4], vec![1, 3, 5], vec![2, 4, 6]]);
        assert_eq!(trace.final_write, vec![1, 2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn inference_inputs_match_teacher_forcing_for_an_exact_model() {
        let mut rng = RngState::new(12);
        for _ in 0..200 {
            let th = 2 + rng.below(11);
            let truth: Vec<Real> = (0..th).map(|_| rng.normal()).collect();
            let z: Vec<Real> = (0..th).map(|_| rng.normal()).collect();
            let plan = select_starts_with(&z, 1 + rng.below(th), StartSelection::ForcedFirst).unwrap();
            let teacher = decoder_inputs(&plan, &truth);
            let mask = build_mask(&plan);
            let mut t = 0;
            let (fc, _) = progressive_decode(&plan, |y_in, snapshot| {
                for &r in mask.written(t) {
                    for c in 0..th {
                        if snapshot[r * th + c] {
                            assert_eq!(y_in[c], teacher[c], "pass {t} row {r} col {c}");
                        }
                    }
                }
                t += 1;
                Ok::<_, ()>((truth.clone(), vec![1.0; th]))
            })
            .unwrap();
            assert_eq!(fc.mean, truth);
        }
    }

    #[test]
    fn pass_counts_follow_the_plan() {
        let config = ModelConfig {
            horizon: 20,
            lookback: 6,
            ..micro_config()
        };
        let model = ProNet::new(&config, 1).unwrap();
        let spec_windows = {
            let mut w = windows(&micro_config(), 1, 0.1).remove(0);
            w.target_y = vec![0.0; 20];
            w.covariates = Tensor::zeros(26, 1);
            w
        };
        let plan_opts = PlanOptions::default();
        let ar = model.predict(&spec_windows, DecodeMode::Ar, ZMode::Mean, &plan_opts, None).unwrap();
        assert_eq!(ar.trace.n_passes(), 20);
        let nar = model.predict(&spec_windows, DecodeMode::Nar, ZMode::Mean, &plan_opts, None).unwrap();
        assert_eq!(nar.trace.n_passes(), 1);
        assert!(nar.trace.final_write.iter().all(|&i| i == 1));
        for n in [3, 7, 20] {
            let p = model
                .predict(&spec_windows, DecodeMode::ProNet(n), ZMode::Mean, &plan_opts, None)
                .unwrap();
            assert_eq!(p.trace.n_passes(), p.plan.n_step());
            assert_eq!(p.plan.n_groups(), n);
        }
    }

    #[test]
    fn forced_plans_reduce_to_ar_and_nar() {
        let config = micro_config();
        let model = ProNet::new(&config, 2).unwrap();
        let opts = PlanOptions::default();
        for w in windows(&config, 5, 0.2) {
            let ar = model.predict(&w, DecodeMode::Ar, ZMode::Mean, &opts, None).unwrap();
            let forced = model.predict_with_plan(&w, &SegmentPlan::autoregressive(6), None).unwrap();
            assert_eq!(ar.forecast, forced.forecast);
            let nar = model.predict(&w, DecodeMode::Nar, ZMode::Mean, &opts, None).unwrap();
            let forced = model
                .predict_with_plan(&w, &SegmentPlan::non_autoregressive(6), None)
                .unwrap();
            assert_eq!(nar.forecast, forced.forecast);
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let config = ModelConfig {
            d_hid: 4,
            d_ff: 4,
            latent_hidden: 4,
            ..micro_config()
        };
        let model = ProNet::new(&config, 5).unwrap();
        let batch = windows(&config, 2, 0.3);
        let train = TrainConfig::default();
        let leaves: Vec<Tensor> = model.params().tensors().cloned().collect();
        let report = grad_check(
            |g, v| {
                let p = Bound::from_vars(v.to_vec());
                let mut total = Vec::new();
                for (i, w) in batch.iter().enumerate() {
                    let mut rng = RngState::new(40 + i as u64);
                    let s = model
                        .sample_loss(g, &p, w, DecodeMode::ProNet(3), &train, 1.0, &mut rng)
                        .expect("sample loss");
                    total.push(s.loss);
                }
                let both = g.concat_rows(&total)?;
                Ok(g.mean(both))
            },
            &leaves,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "max relative error {}", report.max_rel_error());
    }

    #[test]
    fn ar_training_reduces_loss() {
        let config = micro_config();
        let mut model = ProNet::new(&config, 3).unwrap();
        let data = windows(&config, 2, 0.0);
        let batch: Vec<&SeriesWindow> = data.iter().collect();
        let train = TrainConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }, model.params());
        let mut losses = Vec::new();
        for step in 0..50 {
            let s = train_step(&mut model, &mut adam, &batch, DecodeMode::Ar, &train, 1.0, step).unwrap();
            assert!(s.loss.is_finite());
            losses.push(s.loss);
        }
        assert!(losses[49] < losses[0], "{losses:?}");
    }

    #[test]
    fn fit_is_deterministic_and_stops_early() {
        let config = micro_config();
        let data = windows(&config, 40, 0.1);
        let (train, val) = data.split_at(30);
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 8,
            max_epochs: 60,
            patience: 2,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let model = ProNet::new(&config, 1).unwrap();
            fit(model, train, val, DecodeMode::ProNet(3), &cfg, |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        let strip = |r: &FitReport| {
            r.log
                .iter()
                .map(|e| (e.train_nll, e.val_nll, e.kl, e.start_histogram.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        if a.stopped_early {
            let n = a.log.len();
            assert_eq!(n - a.best_epoch, cfg.patience);
        }
        assert!(a.log.len() <= cfg.max_epochs);
        assert_eq!(a.best_val_nll, a.log[a.best_epoch - 1].val_nll);
        let empty: Vec<SeriesWindow> = Vec::new();
        assert!(matches!(
            fit(ProNet::new(&config, 1).unwrap(), &empty, val, DecodeMode::Ar, &cfg, |_| {}),
            Err(ForecastError::EmptySplit(_))
        ));
    }

    #[test]
    fn patience_contract() {
        let config = micro_config();
        let data = windows(&config, 12, 0.5);
        let (train, val) = data.split_at(8);
        // a zero learning rate never improves after the first epoch
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            max_epochs: 50,
            patience: 3,
            ..Default::default()
        };
        let r = fit(ProNet::new(&config, 1).unwrap(), train, val, DecodeMode::Nar, &cfg, |_| {}).unwrap();
        assert!(r.stopped_early);
        assert_eq!(r.log.len(), 4);
        assert_eq!(r.best_epoch, 1);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let config = micro_config();
        let model = ProNet::new(&config, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::new(&model, DecodeMode::ProNet(3), 8).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap().into_model(Some(&config)).unwrap();
        let w = &windows(&config, 1, 0.1)[0];
        let opts = PlanOptions::default();
        let a = model.predict(w, DecodeMode::ProNet(3), ZMode::Mean, &opts, None).unwrap();
        let b = loaded.predict(w, DecodeMode::ProNet(3), ZMode::Mean, &opts, None).unwrap();
        assert_eq!(a.forecast, b.forecast);

        let other = ModelConfig { d_ff: 16, ..config };
        let err = Checkpoint::load(&path).unwrap().into_model(Some(&other)).unwrap_err();
        assert!(err.to_string().contains("d_ff"), "{err}");
    }

    #[test]
    fn non_finite_parameters_are_rejected_at_prediction() {
        let config = micro_config();
        let mut model = ProNet::new(&config, 8).unwrap();
        let id = model.params().ids().next().unwrap();
        model.params_mut().get_mut(id).data_mut()[0] = Real::NAN;
        let w = &windows(&config, 1, 0.1)[0];
        assert!(model
            .predict(w, DecodeMode::Ar, ZMode::Mean, &PlanOptions::default(), None)
            .is_err());
    }
}
