//! Prior `p(z | x)` and posterior `q(z | y, x)` over per-step importance
//! scores, reparameterized sampling, and the diagonal-Gaussian KL term.
//!
//! Both heads read, at each horizon step, the mean-pooled encoder states
//! concatenated with that step's covariates; the posterior also reads the
//! step's target value.

use serde::{Deserialize, Serialize};

use crate::backbone::{Linear, ModelConfig};
use crate::numerics::{Bound, Graph, NumericsError, ParamStore, Real, RngState, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum LatentError {
    #[error("the posterior needs the horizon targets")]
    MissingTruth,
    #[error("sampling mode needs a random stream")]
    MissingRng,
    #[error("sigma must be positive, got {0} at step {1}")]
    NonPositiveSigma(Real, usize),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("expected {expected} horizon values, got {got}")]
    Horizon { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How `z` is drawn from a latent Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMode {
    /// `mu + sigma * eps`, `eps ~ N(0, 1)`.
    Sample,
    /// `mu`.
    #[default]
    Mean,
}

/// Per-step Gaussian `(mu, sigma)` with an optional drawn `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentImportance {
    pub mu: Vec<Real>,
    pub sigma: Vec<Real>,
    pub z: Option<Vec<Real>>,
}

impl LatentImportance {
    pub fn new(mu: Vec<Real>, sigma: Vec<Real>) -> Result<Self, LatentError> {
        if mu.len() != sigma.len() {
            return Err(LatentError::Length(mu.len(), sigma.len()));
        }
        if let Some((i, &s)) = sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
            return Err(LatentError::NonPositiveSigma(s, i));
        }
        Ok(Self { mu, sigma, z: None })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Draws (or takes the mean of) `z` without a graph.
    pub fn draw(&self, mode: ZMode, rng: Option<&mut RngState>) -> Result<Vec<Real>, LatentError> {
        match mode {
            ZMode::Mean => Ok(self.mu.clone()),
            ZMode::Sample => {
                let rng = rng.ok_or(LatentError::MissingRng)?;
                Ok(self
                    .mu
                    .iter()
                    .zip(&self.sigma)
                    .map(|(m, s)| m + s * rng.normal())
                    .collect())
            }
        }
    }
}

/// Graph handles of a latent Gaussian, both `T_h x 1`.
#[derive(Copy, Clone, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub sigma: Var,
}

impl LatentVars {
    pub fn read(&self, g: &Graph) -> LatentImportance {
        LatentImportance {
            mu: g.value(self.mu).data().to_vec(),
            sigma: g.value(self.sigma).data().to_vec(),
            z: None,
        }
    }
}

#[derive(Clone, Debug)]
struct Head {
    hidden1: Linear,
    hidden2: Linear,
    mu: Linear,
    sigma: Linear,
}

impl Head {
    fn new(store: &mut ParamStore, rng: &mut RngState, name: &str, d_in: usize, d_lat: usize) -> Self {
        Self {
            hidden1: Linear::new(store, rng, &format!("{name}.hidden1"), d_in, d_lat),
            hidden2: Linear::new(store, rng, &format!("{name}.hidden2"), d_lat, d_lat),
            mu: Linear::new(store, rng, &format!("{name}.mu"), d_lat, 1),
            sigma: Linear::new(store, rng, &format!("{name}.sigma"), d_lat, 1),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<LatentVars, NumericsError> {
        let h = self.hidden1.forward(g, p, x)?;
        let h = g.gelu(h);
        let h = self.hidden2.forward(g, p, h)?;
        let h = g.gelu(h);
        let mu = self.mu.forward(g, p, h)?;
        let s = self.sigma.forward(g, p, h)?;
        Ok(LatentVars {
            mu,
            sigma: g.softplus(s),
        })
    }
}

#[derive(Clone, Debug)]
pub struct LatentHeads {
    prior: Head,
    posterior: Head,
    lookback: usize,
    horizon: usize,
}

impl LatentHeads {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut RngState) -> Self {
        let d_in = config.d_hid + config.covariate_dim;
        Self {
            prior: Head::new(store, rng, "prior", d_in, config.latent_hidden),
            posterior: Head::new(store, rng, "posterior", d_in + 1, config.latent_hidden),
            lookback: config.lookback,
            horizon: config.horizon,
        }
    }

    /// `[mean_rows(enc) | x_s]` for every horizon step.
    fn conditioning(&self, g: &mut Graph, enc: Var, covariates: &Tensor) -> Result<Var, LatentError> {
        let th = self.horizon;
        if covariates.rows() != self.lookback + th {
            return Err(LatentError::Horizon {
                expected: self.lookback + th,
                got: covariates.rows(),
            });
        }
        let summary = g.mean_rows(enc);
        let summary = g.broadcast_rows(summary, th)?;
        let c = covariates.cols();
        let future = Tensor::from_rows(th, c, covariates.data()[self.lookback * c..].to_vec());
        let future = g.constant(future);
        Ok(g.concat_cols(&[summary, future])?)
    }

    pub fn prior(&self, g: &mut Graph, p: &Bound, enc: Var, covariates: &Tensor) -> Result<LatentVars, LatentError> {
        let x = self.conditioning(g, enc, covariates)?;
        Ok(self.prior.forward(g, p, x)?)
    }

    pub fn posterior(
        &self,
        g: &mut Graph,
        p: &Bound,
        enc: Var,
        covariates: &Tensor,
        truth: Option<&[Real]>,
    ) -> Result<LatentVars, LatentError> {
        let truth = truth.ok_or(LatentError::MissingTruth)?;
        if truth.len() != self.horizon {
            return Err(LatentError::Horizon {
                expected: self.horizon,
                got: truth.len(),
            });
        }
        let x = self.conditioning(g, enc, covariates)?;
        let y = g.constant(Tensor::column(truth));
        let x = g.concat_cols(&[x, y])?;
        Ok(self.posterior.forward(g, p, x)?)
    }
}

/// Reparameterized `z`; gradients reach `mu` and `sigma` in sample mode.
pub fn sample_z(
    g: &mut Graph,
    latent: LatentVars,
    mode: ZMode,
    rng: Option<&mut RngState>,
) -> Result<Var, LatentError> {
    match mode {
        ZMode::Mean => Ok(latent.mu),
        ZMode::Sample => {
            let rng = rng.ok_or(LatentError::MissingRng)?;
            let n = g.value(latent.mu).rows();
            let eps = g.constant(Tensor::column(&(0..n).map(|_| rng.normal()).collect::<Vec<_>>()));
            let noise = g.mul(latent.sigma, eps)?;
            Ok(g.add(latent.mu, noise)?)
        }
    }
}

/// `KL(q || p)` summed over coordinates, on the graph.
pub fn kl_graph(g: &mut Graph, q: LatentVars, p: LatentVars) -> Result<Var, LatentError> {
    let log_ratio = {
        let lp = g.log(p.sigma);
        let lq = g.log(q.sigma);
        g.sub(lp, lq)?
    };
    let diff = g.sub(q.mu, p.mu)?;
    let num = {
        let sq = g.square(q.sigma);
        let d2 = g.square(diff);
        g.add(sq, d2)?
    };
    let den = {
        let sp = g.square(p.sigma);
        g.scale(sp, 2.0)
    };
    let frac = g.div(num, den)?;
    let terms = g.add(log_ratio, frac)?;
    let terms = g.add_scalar(terms, -0.5);
    Ok(g.sum(terms))
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_divergence(q: &LatentImportance, p: &LatentImportance) -> Result<Real, LatentError> {
    if q.len() != p.len() {
        return Err(LatentError::Length(q.len(), p.len()));
    }
    for li in [q, p] {
        if let Some((i, &s)) = li.sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
            return Err(LatentError::NonPositiveSigma(s, i));
        }
    }
    Ok((0..q.len())
        .map(|i| {
            let (mq, sq, mp, sp) = (q.mu[i], q.sigma[i], p.mu[i], p.sigma[i]);
            (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// `nll + beta * kl`.
pub fn elbo_loss(g: &mut Graph, nll: Var, kl: Var, beta: Real) -> Result<Var, NumericsError> {
    if beta == 0.0 {
        return Ok(nll);
    }
    let w = g.scale(kl, beta);
    g.add(nll, w)
}
