//! The treatment-conditional VAE: conditional prior `p(z | x[, t])`, encoder
//! `q(z | x, y, t)`, decoder `p(y | z, t)` and the evidence lower bound.
//!
//! Every network emits a diagonal Gaussian. Variance heads pass through
//! `softplus(raw) + var_floor`. The treatment enters shared networks as an appended
//! 0/1 input column; with `separate_decoder_heads` it selects one of two decoders.
//!
//! With `degenerate_prior` the prior variance is identically zero: `z = h(x)` and the
//! objective reduces to the exact outcome log-likelihood `log p(y | f_t(h(x)), t)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::balancing::{sinkhorn_divergence_with_grad, BalanceConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::{gaussian_log_density, kl_term, sigmoid, softplus, DiagGaussian};
use crate::nn::{Activation, Mlp, MlpCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub covariate_dim: usize,
    pub latent_dim: usize,
    pub outcome_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Prior depends on `x` only.
    pub balanced_prior: bool,
    /// Prior variance fixed at zero (`k = 0`).
    #[serde(default)]
    pub degenerate_prior: bool,
    pub separate_decoder_heads: bool,
    pub learn_outcome_noise: bool,
    /// Decoder variance when `learn_outcome_noise` is off.
    pub outcome_var: f64,
    pub var_floor: f64,
}

impl ModelConfig {
    pub fn new(covariate_dim: usize, latent_dim: usize, outcome_dim: usize) -> Self {
        ModelConfig {
            covariate_dim,
            latent_dim,
            outcome_dim,
            hidden: vec![200, 200, 200],
            activation: Activation::Relu,
            balanced_prior: true,
            degenerate_prior: false,
            separate_decoder_heads: false,
            learn_outcome_noise: true,
            outcome_var: 1.0,
            var_floor: 1e-4,
        }
    }

    /// One-dimensional latent over three covariates.
    pub fn synthetic() -> Self {
        ModelConfig::new(3, 1, 1)
    }

    /// Ten-dimensional latent over the 25 benchmark covariates.
    pub fn ihdp() -> Self {
        ModelConfig::new(25, 10, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.covariate_dim == 0 || self.latent_dim == 0 || self.outcome_dim == 0 {
            return bad("covariate, latent and outcome dimensions must be positive");
        }
        if !(self.var_floor > 0.0 && self.var_floor.is_finite()) {
            return bad("var_floor must be positive");
        }
        if !self.learn_outcome_noise && !(self.outcome_var > 0.0 && self.outcome_var.is_finite()) {
            return bad("outcome_var must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }

    fn prior_input_dim(&self) -> usize {
        self.covariate_dim + usize::from(!self.balanced_prior)
    }
}

/// How a Gaussian head produces its variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceHead {
    Learned { floor: f64 },
    Fixed(f64),
    Degenerate,
}

/// A network emitting the mean (and possibly the variance) of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNet {
    pub net: Mlp,
    pub dim: usize,
    pub variance: VarianceHead,
}

/// Row-wise Gaussian parameters for a batch; `var` may be zero only for a degenerate prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
}

impl GaussianBatch {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn row(&self, i: usize) -> Result<DiagGaussian> {
        DiagGaussian::new(self.mean.row(i).to_owned(), self.var.row(i).to_owned())
    }
}

struct NetCache {
    mlp: MlpCache,
    raw_var: Option<Array2<f64>>,
}

impl GaussianNet {
    fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        dim: usize,
        activation: Activation,
        variance: VarianceHead,
        rng: &mut R,
    ) -> Self {
        let out = match variance {
            VarianceHead::Learned { .. } => 2 * dim,
            _ => dim,
        };
        GaussianNet {
            net: Mlp::new(input, hidden, out, activation, rng),
            dim,
            variance,
        }
    }

    fn zeros_like(&self) -> Self {
        GaussianNet {
            net: self.net.zeros_like(),
            dim: self.dim,
            variance: self.variance.clone(),
        }
    }

    fn split(&self, out: Array2<f64>) -> (GaussianBatch, Option<Array2<f64>>) {
        let rows = out.nrows();
        match self.variance {
            VarianceHead::Learned { floor } => {
                let mean = out.slice(s![.., ..self.dim]).to_owned();
                let raw = out.slice(s![.., self.dim..]).to_owned();
                let var = raw.mapv(|r| softplus(r) + floor);
                (GaussianBatch { mean, var }, Some(raw))
            }
            VarianceHead::Fixed(c) => (
                GaussianBatch {
                    mean: out,
                    var: Array2::from_elem((rows, self.dim), c),
                },
                None,
            ),
            VarianceHead::Degenerate => (
                GaussianBatch {
                    mean: out,
                    var: Array2::zeros((rows, self.dim)),
                },
                None,
            ),
        }
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> GaussianBatch {
        self.split(self.net.forward(input)).0
    }

    fn forward_cached(&self, input: ArrayView2<f64>) -> (GaussianBatch, NetCache) {
        let (out, mlp) = self.net.forward_cached(input);
        let (g, raw_var) = self.split(out);
        (g, NetCache { mlp, raw_var })
    }

    fn backward(
        &self,
        cache: &NetCache,
        dmean: Array2<f64>,
        dvar: Option<Array2<f64>>,
        grads: &mut GaussianNet,
    ) -> Array2<f64> {
        let grad_out = match (&cache.raw_var, dvar) {
            (Some(raw), Some(mut dv)) => {
                dv.zip_mut_with(raw, |g, &r| *g *= sigmoid(r));
                ndarray::concatenate(Axis(1), &[dmean.view(), dv.view()]).expect("same rows")
            }
            (Some(raw), None) => {
                let zeros = Array2::zeros(raw.raw_dim());
                ndarray::concatenate(Axis(1), &[dmean.view(), zeros.view()]).expect("same rows")
            }
            (None, _) => dmean,
        };
        self.net.backward(&cache.mlp, grad_out, &mut grads.net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    /// One network over `[z, t]`.
    Shared(GaussianNet),
    /// Disjoint networks over `z`, indexed by treatment.
    Separate([GaussianNet; 2]),
}

/// All functional parameters of the model, together with the configuration that shaped them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `x[, t] -> (h, k)`
    pub prior: GaussianNet,
    /// `(x, y, t) -> (r, s)`
    pub encoder: GaussianNet,
    /// `(z, t) -> (f, g)`
    pub decoder: Decoder,
}

/// Which ELBO terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElboTerms {
    pub reconstruction: bool,
    pub kl: bool,
}

impl Default for ElboTerms {
    fn default() -> Self {
        ElboTerms {
            reconstruction: true,
            kl: true,
        }
    }
}

/// Objective evaluated during training: ELBO terms, optionally minus a balancing penalty.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    pub terms: ElboTerms,
    pub balance: Option<BalanceConfig>,
}

/// Value and gradient (w.r.t. the objective being maximized) of one evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub elbo: f64,
    pub penalty: f64,
    pub grad: ModelParams,
}

fn t_column(t: &[u8]) -> Array2<f64> {
    Array2::from_shape_fn((t.len(), 1), |(i, _)| t[i] as f64)
}

/// Column-stacks `parts` followed by the treatment as a 0/1 column.
fn with_t(parts: &[ArrayView2<f64>], t: &[u8]) -> Array2<f64> {
    let tc = t_column(t);
    let mut all: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
    all.push(tc.view());
    ndarray::concatenate(Axis(1), &all).expect("row counts agree")
}

fn check_t(t: &[u8]) -> Result<()> {
    match t.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::InvalidArgument(format!(
            "treatment must be 0 or 1, got {v}"
        ))),
        None => Ok(()),
    }
}

fn check_finite(g: &GaussianBatch, head: &str) -> Result<()> {
    for (i, (m, v)) in g
        .mean
        .axis_iter(Axis(0))
        .zip(g.var.axis_iter(Axis(0)))
        .enumerate()
    {
        if m.iter().chain(v.iter()).any(|a| !a.is_finite()) {
            return Err(Error::NonFinite {
                head: format!("{head} (row {i})"),
            });
        }
    }
    Ok(())
}

fn rows_by_treatment(t: &[u8]) -> [Vec<usize>; 2] {
    let mut groups = [Vec::new(), Vec::new()];
    for (i, &ti) in t.iter().enumerate() {
        groups[ti as usize].push(i);
    }
    groups
}

enum DecoderCache {
    Shared(NetCache),
    Separate([Option<(Vec<usize>, NetCache)>; 2]),
}

impl ModelParams {
    /// Fresh parameters with fan-in uniform initialization.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let floor = VarianceHead::Learned {
            floor: c.var_floor,
        };
        let prior_var = if c.degenerate_prior {
            VarianceHead::Degenerate
        } else {
            floor.clone()
        };
        let prior = GaussianNet::new(
            c.prior_input_dim(),
            &c.hidden,
            c.latent_dim,
            c.activation,
            prior_var,
            rng,
        );
        let encoder = GaussianNet::new(
            c.covariate_dim + c.outcome_dim + 1,
            &c.hidden,
            c.latent_dim,
            c.activation,
            floor.clone(),
            rng,
        );
        let dec_var = if c.learn_outcome_noise {
            floor
        } else {
            VarianceHead::Fixed(c.outcome_var)
        };
        let decoder = if c.separate_decoder_heads {
            let mut head = || {
                GaussianNet::new(
                    c.latent_dim,
                    &c.hidden,
                    c.outcome_dim,
                    c.activation,
                    dec_var.clone(),
                    rng,
                )
            };
            let h0 = head();
            let h1 = head();
            Decoder::Separate([h0, h1])
        } else {
            Decoder::Shared(GaussianNet::new(
                c.latent_dim + 1,
                &c.hidden,
                c.outcome_dim,
                c.activation,
                dec_var,
                rng,
            ))
        };
        Ok(ModelParams {
            config: config.clone(),
            prior,
            encoder,
            decoder,
        })
    }

    /// Same shapes, all parameters zero (gradient and optimizer-moment buffers).
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            prior: self.prior.zeros_like(),
            encoder: self.encoder.zeros_like(),
            decoder: match &self.decoder {
                Decoder::Shared(n) => Decoder::Shared(n.zeros_like()),
                Decoder::Separate([a, b]) => Decoder::Separate([a.zeros_like(), b.zeros_like()]),
            },
        }
    }

    fn nets(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.prior.net, &self.encoder.net];
        match &self.decoder {
            Decoder::Shared(n) => v.push(&n.net),
            Decoder::Separate([a, b]) => v.extend([&a.net, &b.net]),
        }
        v
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.prior.net, &mut self.encoder.net];
        match &mut self.decoder {
            Decoder::Shared(n) => v.push(&mut n.net),
            Decoder::Separate([a, b]) => v.extend([&mut a.net, &mut b.net]),
        }
        v
    }

    /// Parameter tensors in a fixed order (prior, encoder, decoder heads).
    pub fn slices(&self) -> Vec<&[f64]> {
        self.nets().into_iter().flat_map(|n| n.slices()).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.nets_mut()
            .into_iter()
            .flat_map(|n| n.slices_mut())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.nets().iter().map(|n| n.num_params()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.nets()
            .into_iter()
            .flat_map(|n| {
                n.layers
                    .iter()
                    .flat_map(|l| [l.weight.shape().to_vec(), l.bias.shape().to_vec()])
            })
            .collect()
    }

    fn prior_input(&self, x: ArrayView2<f64>, t: Option<&[u8]>) -> Result<Array2<f64>> {
        self.check_cols("covariates", self.config.covariate_dim, x.ncols())?;
        if self.config.balanced_prior {
            return Ok(x.to_owned());
        }
        let t = t.ok_or_else(|| {
            Error::InvalidArgument("a treatment-conditional prior needs t".into())
        })?;
        check_t(t)?;
        Ok(with_t(&[x], t))
    }

    fn encoder_input(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        t: &[u8],
    ) -> Result<Array2<f64>> {
        self.check_cols("covariates", self.config.covariate_dim, x.ncols())?;
        self.check_cols("outcome", self.config.outcome_dim, y.ncols())?;
        check_t(t)?;
        Ok(with_t(&[x.view(), y.view()], t))
    }

    fn check_cols(&self, context: &'static str, expected: usize, actual: usize) -> Result<()> {
        if expected != actual {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                actual,
            });
        }
        Ok(())
    }

    /// Prior parameters for a batch. `t` is ignored by a balanced prior.
    pub fn prior_batch(&self, x: ArrayView2<f64>, t: Option<&[u8]>) -> Result<GaussianBatch> {
        let g = self.prior.forward(self.prior_input(x, t)?.view());
        check_finite(&g, "prior")?;
        Ok(g)
    }

    /// `p(z | x, t)` for one unit.
    pub fn prior_params(&self, x: ArrayView1<f64>, t: u8) -> Result<DiagGaussian> {
        if self.config.degenerate_prior {
            return Err(Error::InvalidArgument(
                "the degenerate prior is a point mass; use prior_batch for its mean".into(),
            ));
        }
        let x2 = x.insert_axis(Axis(0));
        self.prior_batch(x2, Some(&[t]))?.row(0)
    }

    pub fn encode_batch(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        t: &[u8],
    ) -> Result<GaussianBatch> {
        let g = self.encoder.forward(self.encoder_input(x, y, t)?.view());
        check_finite(&g, "encoder")?;
        Ok(g)
    }

    /// `q(z | x, y, t)` for one unit.
    pub fn encode(&self, x: ArrayView1<f64>, y: ArrayView1<f64>, t: u8) -> Result<DiagGaussian> {
        self.encode_batch(x.insert_axis(Axis(0)), y.insert_axis(Axis(0)), &[t])?
            .row(0)
    }

    /// Decoder output for latent rows `z` under per-row treatments `t`.
    pub fn decode_batch(&self, z: ArrayView2<f64>, t: &[u8]) -> Result<GaussianBatch> {
        self.check_cols("latent", self.config.latent_dim, z.ncols())?;
        if z.nrows() != t.len() {
            return Err(Error::DimensionMismatch {
                context: "decode rows",
                expected: z.nrows(),
                actual: t.len(),
            });
        }
        check_t(t)?;
        let g = match &self.decoder {
            Decoder::Shared(net) => net.forward(with_t(&[z], t).view()),
            Decoder::Separate(heads) => {
                let d = self.config.outcome_dim;
                let mut mean = Array2::zeros((z.nrows(), d));
                let mut var = Array2::zeros((z.nrows(), d));
                for (arm, rows) in rows_by_treatment(t).iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let g = heads[arm].forward(z.select(Axis(0), rows).view());
                    for (k, &r) in rows.iter().enumerate() {
                        mean.row_mut(r).assign(&g.mean.row(k));
                        var.row_mut(r).assign(&g.var.row(k));
                    }
                }
                GaussianBatch { mean, var }
            }
        };
        check_finite(&g, "decoder")?;
        Ok(g)
    }

    /// Decoder output with every row assigned the same treatment.
    pub fn decode_all(&self, z: ArrayView2<f64>, t: u8) -> Result<GaussianBatch> {
        match &self.decoder {
            Decoder::Separate(heads) if t <= 1 => {
                self.check_cols("latent", self.config.latent_dim, z.ncols())?;
                let g = heads[t as usize].forward(z);
                check_finite(&g, "decoder")?;
                Ok(g)
            }
            _ => self.decode_batch(z, &vec![t; z.nrows()]),
        }
    }

    /// `p(y | z, t)` for one latent value.
    pub fn decode(&self, z: ArrayView1<f64>, t: u8) -> Result<DiagGaussian> {
        self.decode_batch(z.insert_axis(Axis(0)), &[t])?.row(0)
    }

    /// Monte-Carlo ELBO averaged over the batch, with `samples` latent draws per unit.
    pub fn elbo<R: Rng + ?Sized>(&self, batch: &Dataset, samples: usize, rng: &mut R) -> Result<f64> {
        if samples == 0 {
            return Err(Error::InvalidArgument("ELBO needs at least one sample".into()));
        }
        let noise = draw_noise(rng, samples, batch.len(), self.config.latent_dim);
        self.elbo_with_noise(batch, &noise)
    }

    /// ELBO with caller-supplied standard-normal noise, one `(rows x latent_dim)` matrix per sample.
    pub fn elbo_with_noise(&self, batch: &Dataset, noise: &[Array2<f64>]) -> Result<f64> {
        Ok(self.elbo_rows(batch, noise, ElboTerms::default())?.mean().unwrap_or(f64::NAN))
    }

    /// Per-unit ELBO contributions.
    pub fn elbo_rows(
        &self,
        batch: &Dataset,
        noise: &[Array2<f64>],
        terms: ElboTerms,
    ) -> Result<Array1<f64>> {
        let (t, y) = batch.observed()?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if self.config.degenerate_prior {
            let z = self.prior_batch(batch.x.view(), Some(t))?.mean;
            let dec = self.decode_batch(z.view(), t)?;
            return Ok(log_lik_rows(y, &dec));
        }
        self.check_noise(noise, batch.len())?;
        let prior = self.prior_batch(batch.x.view(), Some(t))?;
        let q = self.encode_batch(batch.x.view(), y.view(), t)?;
        let mut total = Array1::zeros(batch.len());
        if terms.reconstruction {
            for u in noise {
                let z = &q.mean + &(q.var.mapv(f64::sqrt) * u);
                let dec = self.decode_batch(z.view(), t)?;
                total += &log_lik_rows(y, &dec);
            }
            total /= noise.len() as f64;
        }
        if terms.kl {
            total -= &kl_rows(&q, &prior);
        }
        if let Some(i) = total.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                head: format!("elbo (batch row {i})"),
            });
        }
        Ok(total)
    }

    fn check_noise(&self, noise: &[Array2<f64>], rows: usize) -> Result<()> {
        if noise.is_empty() {
            return Err(Error::InvalidArgument("ELBO needs at least one sample".into()));
        }
        for u in noise {
            if u.dim() != (rows, self.config.latent_dim) {
                return Err(Error::DimensionMismatch {
                    context: "ELBO noise",
                    expected: rows * self.config.latent_dim,
                    actual: u.len(),
                });
            }
        }
        Ok(())
    }

    /// Objective value and its gradient w.r.t. every parameter.
    ///
    /// The objective is the batch-mean ELBO (restricted to `objective.terms`) minus
    /// `gamma * S(h_0, h_1)`, where `S` is the Sinkhorn divergence between the prior means
    /// of the control and treated rows of the batch.
    pub fn objective_grad(
        &self,
        batch: &Dataset,
        noise: &[Array2<f64>],
        objective: &Objective,
    ) -> Result<ObjectiveEval> {
        let (t, y) = batch.observed()?;
        let b = batch.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = self.config.latent_dim;
        let scale = 1.0 / b as f64;
        let mut grad = self.zeros_like();

        let prior_in = self.prior_input(batch.x.view(), Some(t))?;
        let (prior, prior_cache) = self.prior.forward_cached(prior_in.view());
        check_finite(&prior, "prior")?;
        let mut d_h = Array2::<f64>::zeros((b, n));
        let mut d_k = Array2::<f64>::zeros((b, n));
        let mut elbo = 0.0;

        if self.config.degenerate_prior {
            let (dec, cache) = self.decoder_forward(prior.mean.view(), t)?;
            let (ll, d_f, d_g) = log_lik_and_grads(y, &dec, scale);
            elbo += ll;
            d_h += &self.decoder_backward(&cache, d_f, d_g, &mut grad)?;
        } else {
            self.check_noise(noise, b)?;
            let enc_in = self.encoder_input(batch.x.view(), y.view(), t)?;
            let (q, enc_cache) = self.encoder.forward_cached(enc_in.view());
            check_finite(&q, "encoder")?;
            let mut d_r = Array2::<f64>::zeros((b, n));
            let mut d_s = Array2::<f64>::zeros((b, n));
            if objective.terms.reconstruction {
                let sd = q.var.mapv(f64::sqrt);
                let per_sample = scale / noise.len() as f64;
                for u in noise {
                    let z = &q.mean + &(&sd * u);
                    let (dec, cache) = self.decoder_forward(z.view(), t)?;
                    let (ll, d_f, d_g) = log_lik_and_grads(y, &dec, per_sample);
                    elbo += ll;
                    let d_z = self.decoder_backward(&cache, d_f, d_g, &mut grad)?;
                    d_r += &d_z;
                    // dz/ds = u / (2 sqrt(s))
                    ndarray::Zip::from(&mut d_s)
                        .and(&d_z)
                        .and(u)
                        .and(&sd)
                        .for_each(|ds, &dz, &e, &sq| *ds += dz * e * 0.5 / sq);
                }
            }
            if objective.terms.kl {
                let mut kl = 0.0;
                for ((i, j), &k) in prior.var.indexed_iter() {
                    let (r, sv, h) = (q.mean[[i, j]], q.var[[i, j]], prior.mean[[i, j]]);
                    kl += kl_term(r, sv, h, k);
                    let diff = r - h;
                    d_r[[i, j]] -= scale * diff / k;
                    d_h[[i, j]] += scale * diff / k;
                    d_s[[i, j]] -= scale * 0.5 * (1.0 / k - 1.0 / sv);
                    d_k[[i, j]] -= scale * 0.5 * (1.0 / k - (sv + diff * diff) / (k * k));
                }
                elbo -= kl * scale;
            }
            let mut enc_grad = std::mem::replace(&mut grad.encoder, self.encoder.zeros_like());
            self.encoder.backward(&enc_cache, d_r, Some(d_s), &mut enc_grad);
            grad.encoder = enc_grad;
        }

        let mut penalty = 0.0;
        if let Some(cfg) = objective.balance.as_ref().filter(|c| c.gamma > 0.0) {
            let [rows0, rows1] = rows_by_treatment(t);
            if rows0.is_empty() || rows1.is_empty() {
                log::debug!("balancing penalty skipped: batch holds a single treatment group");
            } else {
                let a = prior.mean.select(Axis(0), &rows0);
                let bm = prior.mean.select(Axis(0), &rows1);
                let div = sinkhorn_divergence_with_grad(a.view(), bm.view(), cfg)?;
                penalty = div.value;
                for (k, &r) in rows0.iter().enumerate() {
                    d_h.row_mut(r).scaled_add(-cfg.gamma, &div.grad_a.row(k));
                }
                for (k, &r) in rows1.iter().enumerate() {
                    d_h.row_mut(r).scaled_add(-cfg.gamma, &div.grad_b.row(k));
                }
            }
        }
        let gamma = objective.balance.as_ref().map_or(0.0, |c| c.gamma);
        let value = elbo - gamma * penalty;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                head: "training objective".into(),
            });
        }

        let d_k = if self.config.degenerate_prior {
            None
        } else {
            Some(d_k)
        };
        let mut prior_grad = std::mem::replace(&mut grad.prior, self.prior.zeros_like());
        self.prior.backward(&prior_cache, d_h, d_k, &mut prior_grad);
        grad.prior = prior_grad;

        Ok(ObjectiveEval {
            value,
            elbo,
            penalty,
            grad,
        })
    }

    fn decoder_forward(
        &self,
        z: ArrayView2<f64>,
        t: &[u8],
    ) -> Result<(GaussianBatch, DecoderCache)> {
        let (g, cache) = match &self.decoder {
            Decoder::Shared(net) => {
                let (g, c) = net.forward_cached(with_t(&[z], t).view());
                (g, DecoderCache::Shared(c))
            }
            Decoder::Separate(heads) => {
                let d = self.config.outcome_dim;
                let mut mean = Array2::zeros((z.nrows(), d));
                let mut var = Array2::zeros((z.nrows(), d));
                let mut caches: [Option<(Vec<usize>, NetCache)>; 2] = [None, None];
                for (arm, rows) in rows_by_treatment(t).into_iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let (g, c) = heads[arm].forward_cached(z.select(Axis(0), &rows).view());
                    for (k, &r) in rows.iter().enumerate() {
                        mean.row_mut(r).assign(&g.mean.row(k));
                        var.row_mut(r).assign(&g.var.row(k));
                    }
                    caches[arm] = Some((rows, c));
                }
                (GaussianBatch { mean, var }, DecoderCache::Separate(caches))
            }
        };
        check_finite(&g, "decoder")?;
        Ok((g, cache))
    }

    /// Backpropagates decoder output gradients; returns the gradient w.r.t. `z`.
    fn decoder_backward(
        &self,
        cache: &DecoderCache,
        d_f: Array2<f64>,
        d_g: Array2<f64>,
        grad: &mut ModelParams,
    ) -> Result<Array2<f64>> {
        let n = self.config.latent_dim;
        match (&self.decoder, cache, &mut grad.decoder) {
            (Decoder::Shared(net), DecoderCache::Shared(c), Decoder::Shared(gn)) => {
                let d_in = net.backward(c, d_f, Some(d_g), gn);
                Ok(d_in.slice(s![.., ..n]).to_owned())
            }
            (Decoder::Separate(heads), DecoderCache::Separate(caches), Decoder::Separate(gh)) => {
                let mut d_z = Array2::zeros((d_f.nrows(), n));
                for arm in 0..2 {
                    if let Some((rows, c)) = &caches[arm] {
                        let df = d_f.select(Axis(0), rows);
                        let dg = d_g.select(Axis(0), rows);
                        let dz = heads[arm].backward(c, df, Some(dg), &mut gh[arm]);
                        for (k, &r) in rows.iter().enumerate() {
                            d_z.row_mut(r).assign(&dz.row(k));
                        }
                    }
                }
                Ok(d_z)
            }
            _ => Err(Error::InvalidArgument("decoder layout mismatch".into())),
        }
    }
}

/// Draws `samples` standard-normal matrices of shape `(rows, dim)`.
pub fn draw_noise<R: Rng + ?Sized>(
    rng: &mut R,
    samples: usize,
    rows: usize,
    dim: usize,
) -> Vec<Array2<f64>> {
    (0..samples)
        .map(|_| Array2::from_shape_simple_fn((rows, dim), || rng.sample(StandardNormal)))
        .collect()
}

fn log_lik_rows(y: &Array2<f64>, dec: &GaussianBatch) -> Array1<f64> {
    let mut out = Array1::zeros(y.nrows());
    for (i, o) in out.iter_mut().enumerate() {
        *o = y
            .row(i)
            .iter()
            .zip(dec.mean.row(i))
            .zip(dec.var.row(i))
            .map(|((&yi, &f), &g)| gaussian_log_density(yi, f, g))
            .sum();
    }
    out
}

fn kl_rows(q: &GaussianBatch, p: &GaussianBatch) -> Array1<f64> {
    let mut out = Array1::zeros(q.len());
    for (i, o) in out.iter_mut().enumerate() {
        *o = q
            .mean
            .row(i)
            .iter()
            .zip(q.var.row(i))
            .zip(p.mean.row(i))
            .zip(p.var.row(i))
            .map(|(((&qm, &qv), &pm), &pv)| kl_term(qm, qv, pm, pv))
            .sum();
    }
    out
}

/// Scaled log-likelihood sum and its gradients w.r.t. decoder mean and variance.
fn log_lik_and_grads(
    y: &Array2<f64>,
    dec: &GaussianBatch,
    scale: f64,
) -> (f64, Array2<f64>, Array2<f64>) {
    let mut d_f = Array2::zeros(y.raw_dim());
    let mut d_g = Array2::zeros(y.raw_dim());
    let mut total = 0.0;
    ndarray::Zip::from(&mut d_f)
        .and(&mut d_g)
        .and(y)
        .and(&dec.mean)
        .and(&dec.var)
        .for_each(|df, dg, &yi, &f, &g| {
            let r = yi - f;
            total += gaussian_log_density(yi, f, g);
            *df = scale * r / g;
            *dg = scale * 0.5 * (r * r / (g * g) - 1.0 / g);
        });
    (total * scale, d_f, d_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(balanced: bool, separate: bool) -> ModelConfig {
        ModelConfig {
            hidden: vec![6, 5],
            balanced_prior: balanced,
            separate_decoder_heads: separate,
            ..ModelConfig::new(3, 2, 1)
        }
    }

    fn zero_last_layer(net: &mut GaussianNet) {
        let last = net.net.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    #[test]
    fn balanced_prior_ignores_treatment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(&small_config(true, false), &mut rng).unwrap();
        let x = array![0.3, -1.2, 0.8];
        let a = p.prior_params(x.view(), 0).unwrap();
        let b = p.prior_params(x.view(), 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_final_layer_prior_is_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ModelParams::init(&small_config(true, false), &mut rng).unwrap();
        zero_last_layer(&mut p.prior);
        let g = p.prior_params(Array1::zeros(3).view(), 0).unwrap();
        assert_eq!(g.mean(), &Array1::<f64>::zeros(2));
        let expected = 2f64.ln() + 1e-4;
        for v in g.var() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_outputs_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init(&small_config(false, true), &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let y = Array2::from_shape_fn((5, 1), |(i, _)| i as f64 * 0.5);
        let z = Array2::from_shape_fn((5, 2), |(i, j)| (i * j) as f64 * 0.2 - 0.4);
        let t = vec![0u8, 1, 1, 0, 1];
        let perm = [3usize, 0, 4, 1, 2];
        let tp: Vec<u8> = perm.iter().map(|&i| t[i]).collect();
        let xp = x.select(Axis(0), &perm);
        let yp = y.select(Axis(0), &perm);
        let zp = z.select(Axis(0), &perm);

        let pr = p.prior_batch(x.view(), Some(&t)).unwrap();
        let prp = p.prior_batch(xp.view(), Some(&tp)).unwrap();
        let en = p.encode_batch(x.view(), y.view(), &t).unwrap();
        let enp = p.encode_batch(xp.view(), yp.view(), &tp).unwrap();
        let de = p.decode_batch(z.view(), &t).unwrap();
        let dep = p.decode_batch(zp.view(), &tp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(prp.mean.row(k), pr.mean.row(i));
            assert_eq!(enp.var.row(k), en.var.row(i));
            assert_eq!(dep.mean.row(k), de.mean.row(i));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::init(&small_config(true, false), &mut rng).unwrap();
        let x = array![0.1, 0.2, 0.3];
        let y = array![1.5];
        assert_eq!(
            p.encode(x.view(), y.view(), 1).unwrap(),
            p.encode(x.view(), y.view(), 1).unwrap()
        );
    }

    #[test]
    fn encoder_variance_respects_floor() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ModelParams::init(&small_config(true, false), &mut rng).unwrap();
        // Push the variance head strongly negative so the floor binds.
        let last = p.encoder.net.layers.last_mut().unwrap();
        last.bias.slice_mut(s![2..]).fill(-60.0);
        let wide = Normal::new(0.0, 10.0).unwrap();
        let x = Array2::from_shape_simple_fn((10_000, 3), || wide.sample(&mut rng));
        let y = Array2::from_shape_simple_fn((10_000, 1), || wide.sample(&mut rng));
        let t: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
        let q = p.encode_batch(x.view(), y.view(), &t).unwrap();
        assert!(q.var.iter().all(|&v| v >= 1e-4));
    }

    #[test]
    fn constant_noise_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig {
            learn_outcome_noise: false,
            outcome_var: 0.37,
            ..small_config(true, false)
        };
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        for (z, t) in [(array![0.0, 1.0], 0u8), (array![-3.0, 2.0], 1)] {
            assert_eq!(p.decode(z.view(), t).unwrap().var(), &array![0.37]);
        }
    }

    #[test]
    fn separate_heads_are_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ModelParams::init(&small_config(true, true), &mut rng).unwrap();
        let z = array![0.4, -0.9];
        let before = p.decode(z.view(), 1).unwrap();
        let mut q = p.clone();
        if let Decoder::Separate(heads) = &mut q.decoder {
            heads[0].net.layers[0].weight.mapv_inplace(|w| w + 1.0);
            heads[0].net.layers[1].bias.fill(9.0);
        }
        assert_eq!(q.decode(z.view(), 1).unwrap(), before);
        assert_ne!(q.decode(z.view(), 0).unwrap(), p.decode(z.view(), 0).unwrap());
    }

    #[test]
    fn linear_decoder_injection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ModelConfig {
            hidden: vec![],
            separate_decoder_heads: true,
            ..ModelConfig::new(2, 1, 1)
        };
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        let (a, b) = ([1.7, -0.4], [0.25, 3.0]);
        if let Decoder::Separate(heads) = &mut p.decoder {
            for t in 0..2 {
                heads[t].net.layers = vec![Linear {
                    weight: array![[a[t], 0.0]],
                    bias: array![b[t], 0.0],
                }];
            }
        }
        for z in [-2.0, 0.0, 0.731] {
            for t in 0..2u8 {
                let m = p.decode(array![z].view(), t).unwrap().mean()[0];
                assert!((m - (a[t as usize] * z + b[t as usize])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kl_vanishes_when_encoder_equals_prior() {
        // prior over x; encoder over (x, y, t) with y and t weights zeroed
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = small_config(true, false);
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        copy_prior_into_encoder(&mut p);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.3 - 0.5);
        let data = Dataset::new(x, vec![0, 1, 0, 1], array![[0.3], [1.0], [-2.0], [0.0]]).unwrap();
        let noise = draw_noise(&mut rng, 1, 4, 2);
        let kl_only = p
            .elbo_rows(
                &data,
                &noise,
                ElboTerms {
                    reconstruction: false,
                    kl: true,
                },
            )
            .unwrap();
        assert!(kl_only.iter().all(|&v| v == 0.0));
    }

    pub(crate) fn copy_prior_into_encoder(p: &mut ModelParams) {
        let mut enc = p.prior.net.clone();
        let first = &p.prior.net.layers[0];
        let extra = p.encoder.net.layers[0].inputs() - first.inputs();
        let mut w = Array2::zeros((first.inputs() + extra, first.outputs()));
        w.slice_mut(s![..first.inputs(), ..]).assign(&first.weight);
        enc.layers[0].weight = w;
        p.encoder.net = enc;
    }

    #[test]
    fn elbo_constant_decoder_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = ModelConfig {
            learn_outcome_noise: false,
            outcome_var: 1.0,
            ..small_config(true, false)
        };
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        copy_prior_into_encoder(&mut p);
        if let Decoder::Shared(net) = &mut p.decoder {
            zero_last_layer(net);
        }
        let x = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let data = Dataset::new(x, vec![0, 1, 1], Array2::zeros((3, 1))).unwrap();
        for l in [1, 5, 50] {
            let v = p.elbo(&data, l, &mut rng).unwrap();
            assert!((v + 0.5 * std::f64::consts::TAU.ln()).abs() < 1e-12, "L={l}: {v}");
        }
        assert!((-0.5 * std::f64::consts::TAU.ln() + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn elbo_argument_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ModelParams::init(&small_config(true, false), &mut rng).unwrap();
        let data = Dataset::new(Array2::zeros((2, 3)), vec![0, 1], Array2::zeros((2, 1))).unwrap();
        assert!(p.elbo(&data, 0, &mut rng).is_err());
        let empty = Dataset::new(Array2::zeros((0, 3)), vec![], Array2::zeros((0, 1))).unwrap();
        assert!(p.elbo(&empty, 1, &mut rng).is_err());
        assert!(p
            .elbo(&Dataset::covariates_only(Array2::zeros((2, 3))), 1, &mut rng)
            .is_err());
    }

    #[test]
    fn non_finite_output_names_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = ModelParams::init(&small_config(true, false), &mut rng).unwrap();
        p.prior.net.layers[0].bias[0] = f64::NAN;
        let err = p.prior_params(array![0.0, 0.0, 0.0].view(), 0).unwrap_err();
        assert!(err.to_string().contains("prior"), "{err}");
    }
}
