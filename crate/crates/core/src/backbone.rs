//! Vanilla post-norm transformer encoder-decoder with Gaussian output heads.
//!
//! Encoder step `l` embeds `[y_l, x_l]`; decoder step `s` embeds
//! `[y_in_s, x_s, z_s]` where `y_in_s` is the previous-step value (zero at
//! segment starts) and `z_s` the latent importance (zero outside the latent
//! mode). Both add a learned position embedding and, when configured, a
//! learned series embedding. Decoder self-attention takes an optional
//! row-major `T_h x T_h` permission mask; cross-attention is unmasked.

use serde::{Deserialize, Serialize};

use crate::numerics::{Bound, Graph, NumericsError, ParamId, ParamStore, Real, RngState, Tensor, Var};

const LN_EPS: Real = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not match the model: {0}")]
    Input(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_hid: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: Real,
    pub lookback: usize,
    pub horizon: usize,
    /// Per-step covariate width, calendar features included.
    pub covariate_dim: usize,
    /// Rows of the series embedding table; 0 disables it.
    pub n_series: usize,
    /// Width of the prior and posterior feed-forward stacks.
    pub latent_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_hid: 16,
            n_enc: 2,
            n_dec: 1,
            n_heads: 2,
            d_ff: 32,
            dropout: 0.1,
            lookback: 24,
            horizon: 24,
            covariate_dim: 4,
            n_series: 0,
            latent_hidden: 16,
        }
    }
}

impl ModelConfig {
    /// Published per-dataset settings: `(config, learning rate)`.
    pub fn preset(name: &str) -> Option<(Self, Real)> {
        let (lr, d_hid, n_enc, n_dec, d_ff, n_heads) = match name {
            "sanyo" => (0.005, 24, 3, 3, 32, 4),
            "hanergy" => (0.005, 24, 2, 2, 32, 12),
            "solar" => (0.005, 48, 4, 3, 24, 12),
            "electricity" => (0.001, 48, 3, 3, 32, 12),
            _ => return None,
        };
        Some((
            Self {
                d_hid,
                n_enc,
                n_dec,
                n_heads,
                d_ff,
                dropout: 0.1,
                ..Self::default()
            },
            lr,
        ))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_hid == 0 || self.n_heads == 0 || !self.d_hid.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_hid ({}) must be a positive multiple of n_heads ({})",
                self.d_hid, self.n_heads
            ));
        }
        if self.n_enc == 0 || self.n_dec == 0 || self.n_dec > self.n_enc {
            return fail(format!(
                "need 1 <= n_dec ({}) <= n_enc ({})",
                self.n_dec, self.n_enc
            ));
        }
        if self.lookback == 0 || self.horizon < 2 {
            return fail(format!(
                "need lookback >= 1 and horizon >= 2, got {} and {}",
                self.lookback, self.horizon
            ));
        }
        if self.d_ff == 0 || self.latent_hidden == 0 {
            return fail("d_ff and latent_hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Name of the first field that differs from `other`.
    pub fn first_difference(&self, other: &Self) -> Option<String> {
        let a = serde_json::to_value(self).ok()?;
        let b = serde_json::to_value(other).ok()?;
        let (a, b) = (a.as_object()?, b.as_object()?);
        a.iter()
            .find(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k} (checkpoint {}, config {v})", b[k]))
    }
}

/// Inverted dropout driven by its own stream; `off()` is the identity.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: Real,
    rng: Option<RngState>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: Real, rng: RngState) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let Some(rng) = self.rng.as_mut().filter(|_| self.rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - self.rate);
        let shape = g.shape(x).to_vec();
        let mask = (0..shape[0] * shape[1])
            .map(|_| if rng.uniform(0.0, 1.0) < self.rate { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::from_rows(shape[0], shape[1], mask));
        g.mul(x, m)
    }
}

fn uniform(rng: &mut RngState, rows: usize, cols: usize, bound: Real) -> Tensor {
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect())
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(d_in)`.
    pub(crate) fn new(store: &mut ParamStore, rng: &mut RngState, name: &str, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as Real).sqrt();
        Self {
            w: store.add(format!("{name}.w"), uniform(rng, d_in, d_out, bound)),
            b: store.add(format!("{name}.b"), uniform(rng, 1, d_out, bound)),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, d, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, d)),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let n = g.layer_norm(x, LN_EPS);
        let n = g.mul_row(n, p[self.gain])?;
        g.add_row(n, p[self.bias])
    }
}

/// Row-wise attention probabilities `softmax(q k^T / sqrt(d))`, with entries
/// outside `allowed` excluded.
pub fn attention_probs(
    g: &mut Graph,
    q: Var,
    k: Var,
    allowed: Option<&[bool]>,
) -> Result<Var, NumericsError> {
    let d = g.shape(q)[1] as Real;
    let kt = g.transpose(k);
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / d.sqrt());
    let s = match allowed {
        Some(m) => g.masked_fill(s, m)?,
        None => s,
    };
    Ok(g.softmax(s))
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, rng: &mut RngState, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        xq: Var,
        xkv: Var,
        allowed: Option<&[bool]>,
        drop: &mut Dropout,
    ) -> Result<Var, NumericsError> {
        let q = self.q.forward(g, p, xq)?;
        let k = self.k.forward(g, p, xkv)?;
        let v = self.v.forward(g, p, xkv)?;
        let dh = g.shape(q)[1] / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let a = attention_probs(g, qh, kh, allowed)?;
            let a = drop.apply(g, a)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, p, cat)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut RngState, name: &str, d: usize, d_ff: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d, d_ff),
            down: Linear::new(store, rng, &format!("{name}.down"), d_ff, d),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, drop: &mut Dropout) -> Result<Var, NumericsError> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        let h = self.down.forward(g, p, h)?;
        drop.apply(g, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross: Attention,
    norm2: Norm,
    ffn: FeedForward,
    norm3: Norm,
}

/// Per-step predictive Gaussian in normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianForecast {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

impl GaussianForecast {
    pub fn horizon(&self) -> usize {
        self.mean.len()
    }
}

/// Graph handles for a decoder pass: both `T_h x 1`.
#[derive(Copy, Clone, Debug)]
pub struct HeadOutput {
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    enc_in: Linear,
    enc_pos: ParamId,
    dec_in: Linear,
    dec_pos: ParamId,
    series_emb: Option<ParamId>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    mu_head: Linear,
    sigma_head: Linear,
}

impl Transformer {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut RngState) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, c) = (config.d_hid, config.covariate_dim);
        let enc_in = Linear::new(store, rng, "enc.input", 1 + c, d);
        let enc_pos = store.add("enc.position", uniform(rng, config.lookback, d, 0.1));
        let dec_in = Linear::new(store, rng, "dec.input", 2 + c, d);
        let dec_pos = store.add("dec.position", uniform(rng, config.horizon, d, 0.1));
        let series_emb = (config.n_series > 0)
            .then(|| store.add("series.embedding", uniform(rng, config.n_series, d, 0.1)));
        let encoder = (0..config.n_enc)
            .map(|i| {
                let n = format!("enc.{i}");
                EncoderLayer {
                    attn: Attention::new(store, rng, &format!("{n}.attn"), d, config.n_heads),
                    norm1: Norm::new(store, &format!("{n}.norm1"), d),
                    ffn: FeedForward::new(store, rng, &format!("{n}.ffn"), d, config.d_ff),
                    norm2: Norm::new(store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        let decoder = (0..config.n_dec)
            .map(|i| {
                let n = format!("dec.{i}");
                DecoderLayer {
                    self_attn: Attention::new(store, rng, &format!("{n}.self"), d, config.n_heads),
                    norm1: Norm::new(store, &format!("{n}.norm1"), d),
                    cross: Attention::new(store, rng, &format!("{n}.cross"), d, config.n_heads),
                    norm2: Norm::new(store, &format!("{n}.norm2"), d),
                    ffn: FeedForward::new(store, rng, &format!("{n}.ffn"), d, config.d_ff),
                    norm3: Norm::new(store, &format!("{n}.norm3"), d),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            enc_in,
            enc_pos,
            dec_in,
            dec_pos,
            series_emb,
            encoder,
            decoder,
            mu_head: Linear::new(store, rng, "head.mu", d, 1),
            sigma_head: Linear::new(store, rng, "head.sigma", d, 1),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn add_series(&self, g: &mut Graph, p: &Bound, h: Var, series: usize) -> Result<Var, ModelError> {
        let Some(table) = self.series_emb else {
            return Ok(h);
        };
        if series >= self.config.n_series {
            return Err(ModelError::Input(format!(
                "series index {series} outside embedding table of {}",
                self.config.n_series
            )));
        }
        let e = g.gather_rows(p[table], &[series])?;
        Ok(g.add_row(h, e)?)
    }

    /// Encoder states, `T_l x d_hid`. `covariates` holds at least the
    /// `T_l` past rows.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        past_y: &[Real],
        covariates: &Tensor,
        series: usize,
        drop: &mut Dropout,
    ) -> Result<Var, ModelError> {
        let (tl, c) = (self.config.lookback, self.config.covariate_dim);
        if past_y.len() != tl || covariates.rows() < tl || covariates.cols() != c {
            return Err(ModelError::Input(format!(
                "encoder expects {tl} past values and {tl}x{c} covariates, got {} and {:?}",
                past_y.len(),
                covariates.shape()
            )));
        }
        let mut input = Vec::with_capacity(tl * (1 + c));
        for (l, &y) in past_y.iter().enumerate() {
            input.push(y);
            input.extend_from_slice(covariates.row_slice(l));
        }
        let x = g.constant(Tensor::from_rows(tl, 1 + c, input));
        let h = self.enc_in.forward(g, p, x)?;
        let h = g.add(h, p[self.enc_pos])?;
        let mut h = self.add_series(g, p, h, series)?;
        for layer in &self.encoder {
            let a = layer.attn.forward(g, p, h, h, None, drop)?;
            let r = g.add(h, a)?;
            h = layer.norm1.forward(g, p, r)?;
            let f = layer.ffn.forward(g, p, h, drop)?;
            let r = g.add(h, f)?;
            h = layer.norm2.forward(g, p, r)?;
        }
        Ok(h)
    }

    /// One decoder pass over all `T_h` positions. `covariates` holds the
    /// `T_l + T_h` window rows; `z` is `T_h x 1` or absent (zeros).
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        p: &Bound,
        enc: Var,
        y_in: &[Real],
        covariates: &Tensor,
        z: Option<Var>,
        series: usize,
        mask: Option<&[bool]>,
        drop: &mut Dropout,
    ) -> Result<HeadOutput, ModelError> {
        let (tl, th, c) = (self.config.lookback, self.config.horizon, self.config.covariate_dim);
        if y_in.len() != th || covariates.rows() != tl + th || covariates.cols() != c {
            return Err(ModelError::Input(format!(
                "decoder expects {th} inputs and {}x{c} covariates, got {} and {:?}",
                tl + th,
                y_in.len(),
                covariates.shape()
            )));
        }
        if let Some(m) = mask {
            if m.len() != th * th {
                return Err(ModelError::Input(format!(
                    "mask has {} entries, expected {th}x{th}",
                    m.len()
                )));
            }
        }
        let mut input = Vec::with_capacity(th * (1 + c));
        for (s, &y) in y_in.iter().enumerate() {
            input.push(y);
            input.extend_from_slice(covariates.row_slice(tl + s));
        }
        let x = g.constant(Tensor::from_rows(th, 1 + c, input));
        let z = match z {
            Some(z) => {
                if g.shape(z) != [th, 1] {
                    return Err(ModelError::Input(format!(
                        "latent input shape {:?}, expected [{th}, 1]",
                        g.shape(z)
                    )));
                }
                z
            }
            None => g.constant(Tensor::zeros(th, 1)),
        };
        let x = g.concat_cols(&[x, z])?;
        let h = self.dec_in.forward(g, p, x)?;
        let h = g.add(h, p[self.dec_pos])?;
        let mut h = self.add_series(g, p, h, series)?;
        for layer in &self.decoder {
            let a = layer.self_attn.forward(g, p, h, h, mask, drop)?;
            let r = g.add(h, a)?;
            h = layer.norm1.forward(g, p, r)?;
            let a = layer.cross.forward(g, p, h, enc, None, drop)?;
            let r = g.add(h, a)?;
            h = layer.norm2.forward(g, p, r)?;
            let f = layer.ffn.forward(g, p, h, drop)?;
            let r = g.add(h, f)?;
            h = layer.norm3.forward(g, p, r)?;
        }
        self.output_head(g, p, h)
    }

    /// `mu = linear(h)`, `sigma = softplus(linear(h))`.
    pub fn output_head(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<HeadOutput, ModelError> {
        let mu = self.mu_head.forward(g, p, h)?;
        let s = self.sigma_head.forward(g, p, h)?;
        let sigma = g.softplus(s);
        Ok(HeadOutput { mu, sigma })
    }
}
