//! Stochastic-gradient ELBO maximization with early stopping, gradient checking and
//! parameter checkpoints.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::balancing::BalanceConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{draw_noise, ModelConfig, ModelParams, Objective};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Weight of the Sinkhorn penalty; 0 disables balancing.
    pub balance_gamma: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    /// Global-norm bound applied once a non-finite loss has been seen.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let b = BalanceConfig::default();
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 100,
            max_epochs: 300,
            patience: 10,
            seed: 0,
            balance_gamma: 0.0,
            sinkhorn_epsilon: b.sinkhorn_epsilon,
            sinkhorn_max_iters: b.sinkhorn_max_iters,
            sinkhorn_tol: b.sinkhorn_tol,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip_norm must be > 0".into()));
        }
        self.balance().validate()
    }

    pub fn balance(&self) -> BalanceConfig {
        BalanceConfig {
            gamma: self.balance_gamma,
            sinkhorn_epsilon: self.sinkhorn_epsilon,
            sinkhorn_max_iters: self.sinkhorn_max_iters,
            sinkhorn_tol: self.sinkhorn_tol,
        }
    }

    pub fn set_balance(&mut self, b: &BalanceConfig) {
        self.balance_gamma = b.gamma;
        self.sinkhorn_epsilon = b.sinkhorn_epsilon;
        self.sinkhorn_max_iters = b.sinkhorn_max_iters;
        self.sinkhorn_tol = b.sinkhorn_tol;
    }

    fn objective(&self) -> Objective {
        Objective {
            terms: Default::default(),
            balance: (self.balance_gamma > 0.0).then(|| self.balance()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches (ELBO part only).
    pub train_elbo: f64,
    pub val_elbo: f64,
    /// Balancing penalty averaged over batches (0 when disabled).
    pub train_penalty: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Validation ELBO of the initial parameters.
    pub initial_val_elbo: f64,
    pub epochs: Vec<EpochRecord>,
    /// Last epoch that ran.
    pub stopped_epoch: usize,
    /// Epoch whose parameters were returned; 0 means the initialization.
    pub best_epoch: usize,
    pub best_val_elbo: f64,
    /// Set when a non-finite loss switched on gradient clipping.
    pub clipping_enabled_at: Option<(usize, usize)>,
}

impl TrainTrace {
    /// The trace with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> TrainTrace {
        let mut t = self.clone();
        for e in &mut t.epochs {
            e.elapsed_secs = 0.0;
        }
        t
    }
}

/// Adam ascent on the objective.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One update moving `params` along `grad`, optionally rescaled to global norm `clip`.
    pub fn ascend(&mut self, params: &mut ModelParams, grad: &ModelParams, clip: Option<f64>) {
        let gs = grad.slices();
        let scale = clip.map_or(1.0, |c| {
            let norm = gs.iter().flat_map(|s| s.iter()).map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        });
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut k = 0;
        for (p, g) in params.slices_mut().into_iter().zip(gs) {
            for (pi, &gi) in p.iter_mut().zip(g) {
                let gi = gi * scale;
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gi;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gi * gi;
                let mh = self.m[k] / bc1;
                let vh = self.v[k] / bc2;
                *pi += self.learning_rate * mh / (vh.sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

fn all_finite(p: &ModelParams) -> bool {
    p.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
}

/// Fits a fresh model; see [`train_from`].
pub fn train(
    model_config: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    let mut init_rng = seed::rng(cfg.seed, &[seed::tag("init")]);
    let params = ModelParams::init(model_config, &mut init_rng)?;
    train_from(params, train_set, val_set, cfg)
}

/// Maximizes the (optionally balanced) ELBO from `params`, returning the parameters of the
/// epoch with the best validation ELBO.
///
/// Shuffling, training noise and validation noise are separate streams derived from
/// `cfg.seed`. The validation noise is drawn once, so validation ELBOs are comparable
/// across epochs.
pub fn train_from(
    mut params: ModelParams,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation splits must be nonempty".into()));
    }
    train_set.observed()?;
    val_set.observed()?;
    let n = params.config.latent_dim;
    let objective = cfg.objective();
    let mut noise_rng = seed::rng(cfg.seed, &[seed::tag("noise")]);
    let mut val_rng = seed::rng(cfg.seed, &[seed::tag("val")]);
    let val_noise = draw_noise(&mut val_rng, 1, val_set.len(), n);

    let mut adam = Adam::new(params.num_params(), cfg.learning_rate);
    let initial_val = params.elbo_with_noise(val_set, &val_noise)?;
    let mut best = params.clone();
    let mut best_val = initial_val;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut clipping: Option<(usize, usize)> = None;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let mut shuffle_rng = seed::rng(cfg.seed, &[seed::tag("shuffle"), epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let (mut elbo_sum, mut pen_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.select(rows);
            let noise = draw_noise(&mut noise_rng, 1, rows.len(), n);
            let eval = params.objective_grad(&batch, &noise, &objective);
            let eval = match eval {
                Ok(e) if e.value.is_finite() && all_finite(&e.grad) => e,
                other => {
                    let detail = match other {
                        Err(e) => e.to_string(),
                        Ok(_) => "non-finite objective or gradient".to_string(),
                    };
                    if clipping.is_some() {
                        return Err(Error::Divergence { epoch, batch: b, detail });
                    }
                    log::warn!(
                        "non-finite loss at epoch {epoch}, batch {b} ({detail}); restoring best \
                         parameters and enabling gradient clipping at norm {}",
                        cfg.clip_norm
                    );
                    clipping = Some((epoch, b));
                    params = best.clone();
                    adam = Adam::new(params.num_params(), cfg.learning_rate);
                    continue;
                }
            };
            elbo_sum += eval.elbo;
            pen_sum += eval.penalty;
            batches += 1;
            adam.ascend(&mut params, &eval.grad, clipping.map(|_| cfg.clip_norm));
        }
        let val = match params.elbo_with_noise(val_set, &val_noise) {
            Ok(v) => v,
            Err(e) => {
                if clipping.is_some() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: usize::MAX,
                        detail: format!("validation: {e}"),
                    });
                }
                log::warn!("non-finite validation ELBO at epoch {epoch}; enabling gradient clipping");
                clipping = Some((epoch, usize::MAX));
                params = best.clone();
                adam = Adam::new(params.num_params(), cfg.learning_rate);
                f64::NEG_INFINITY
            }
        };
        let denom = batches.max(1) as f64;
        epochs.push(EpochRecord {
            epoch,
            train_elbo: elbo_sum / denom,
            val_elbo: if val.is_finite() { val } else { f64::MIN },
            train_penalty: pen_sum / denom,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
        if val > best_val {
            best_val = val;
            best = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let stopped_epoch = epochs.last().map_or(0, |e| e.epoch);
    log::debug!("training stopped at epoch {stopped_epoch}, best epoch {best_epoch} ({best_val:.4})");
    Ok((
        best,
        TrainTrace {
            initial_val_elbo: initial_val,
            epochs,
            stopped_epoch,
            best_epoch,
            best_val_elbo: best_val,
            clipping_enabled_at: clipping,
        },
    ))
}

/// Largest relative error between analytic and central-difference gradients.
///
/// The noise is fixed across the `+eps`/`-eps` evaluations. At most `max_params`
/// coordinates are checked, chosen uniformly by `subset_seed`.
pub fn grad_check(
    params: &ModelParams,
    batch: &Dataset,
    eps: f64,
    objective: &Objective,
    noise: &[Array2<f64>],
    max_params: usize,
    subset_seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument("eps must lie in [1e-7, 1e-3]".into()));
    }
    let analytic = params.objective_grad(batch, noise, objective)?.grad.flat();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { head: "analytic gradient".into() });
    }
    let total = analytic.len();
    let mut idx: Vec<usize> = (0..total).collect();
    if total > max_params {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(subset_seed);
        idx.shuffle(&mut rng);
        idx.truncate(max_params);
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for &k in &idx {
        let orig = set_flat(&mut probe, k, None);
        set_flat(&mut probe, k, Some(orig + eps));
        let up = probe.objective_grad(batch, noise, objective)?.value;
        set_flat(&mut probe, k, Some(orig - eps));
        let down = probe.objective_grad(batch, noise, objective)?.value;
        set_flat(&mut probe, k, Some(orig));
        let fd = (up - down) / (2.0 * eps);
        let err = (analytic[k] - fd).abs() / analytic[k].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Reads flat parameter `k`, optionally overwriting it; returns the previous value.
fn set_flat(p: &mut ModelParams, mut k: usize, value: Option<f64>) -> f64 {
    for s in p.slices_mut() {
        if k < s.len() {
            let old = s[k];
            if let Some(v) = value {
                s[k] = v;
            }
            return old;
        }
        k -= s.len();
    }
    panic!("parameter index out of range")
}

const MAGIC: &[u8; 8] = b"IVAECKP1";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Writes parameters as: magic, config JSON (u64 length prefix), tensor count, per-tensor
/// rank and dimensions (u64), then every value as little-endian f64 in tensor order.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let cfg = serde_json::to_vec(&params.config)?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let shapes = params.tensor_shapes();
    buf.extend_from_slice(&(shapes.len() as u64).to_le_bytes());
    for s in &shapes {
        buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
        for &d in s {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for s in params.slices() {
        for v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, format!("checkpoint: {m}"));
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8).ok_or_else(|| bad("truncated file"))? != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let next_u64 = |cur: &mut Cursor| cur.u64().ok_or_else(|| bad("truncated file"));
    let cfg_len = next_u64(&mut cur)? as usize;
    let cfg_bytes = cur.take(cfg_len).ok_or_else(|| bad("truncated file"))?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)?;
    let mut params = ModelParams::init(&config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    let expected = params.tensor_shapes();
    if next_u64(&mut cur)? as usize != expected.len() {
        return Err(bad("tensor count does not match the stored configuration"));
    }
    for shape in &expected {
        let rank = next_u64(&mut cur)? as usize;
        let dims = (0..rank)
            .map(|_| next_u64(&mut cur).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(bad("tensor shape does not match the stored configuration"));
        }
    }
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            *v = f64::from_bits(next_u64(&mut cur)?);
        }
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Decoder, ElboTerms};
    use ndarray::Array2;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-1.0..1.0));
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y = Array2::from_shape_fn((n, 1), |(i, _)| x[[i, 0]] + t[i] as f64 + 0.1 * x[[i, 1]]);
        Dataset::new(x, t, y).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            hidden: vec![8, 8],
            ..ModelConfig::new(2, 1, 1)
        }
    }

    #[test]
    fn grad_check_full_elbo() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (balanced, separate, gamma) in [(true, false, 0.0), (false, true, 0.0), (true, true, 1.0)] {
            let cfg = ModelConfig {
                balanced_prior: balanced,
                separate_decoder_heads: separate,
                ..small()
            };
            let p = ModelParams::init(&cfg, &mut rng).unwrap();
            let batch = toy(12, 2);
            let noise = draw_noise(&mut rng, 2, 12, 1);
            let objective = Objective {
                terms: ElboTerms::default(),
                balance: (gamma > 0.0).then(|| BalanceConfig {
                    gamma,
                    sinkhorn_tol: 1e-13,
                    sinkhorn_max_iters: 5000,
                    ..Default::default()
                }),
            };
            let err = grad_check(&p, &batch, 1e-5, &objective, &noise, 300, 3).unwrap();
            assert!(err < 1e-4, "{balanced} {separate} {gamma}: {err}");
        }
    }

    #[test]
    fn grad_check_kl_only_constant_decoder() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig {
            learn_outcome_noise: false,
            ..small()
        };
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        if let Decoder::Shared(d) = &mut p.decoder {
            let last = d.net.layers.last_mut().unwrap();
            last.weight.fill(0.0);
        }
        let objective = Objective {
            terms: ElboTerms {
                reconstruction: false,
                kl: true,
            },
            balance: None,
        };
        let batch = toy(10, 5);
        let noise = draw_noise(&mut rng, 1, 10, 1);
        let err = grad_check(&p, &batch, 1e-6, &objective, &noise, 10_000, 0).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_degenerate_prior() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig {
            degenerate_prior: true,
            learn_outcome_noise: false,
            outcome_var: 0.5,
            ..small()
        };
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let batch = toy(9, 7);
        let err = grad_check(&p, &batch, 1e-5, &Objective::default(), &[], 10_000, 0).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn eps_outside_range_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let p = ModelParams::init(&small(), &mut rng).unwrap();
        let noise = draw_noise(&mut rng, 1, 4, 1);
        assert!(grad_check(&p, &toy(4, 1), 1e-2, &Objective::default(), &noise, 5, 0).is_err());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut p = ModelParams::init(&small(), &mut rng).unwrap();
        let before = p.clone();
        let batch = toy(6, 3);
        let noise = draw_noise(&mut rng, 1, 6, 1);
        let g = p.objective_grad(&batch, &noise, &Objective::default()).unwrap();
        let mut adam = Adam::new(p.num_params(), 0.0);
        adam.ascend(&mut p, &g.grad, None);
        assert_eq!(p, before);
    }

    #[test]
    fn training_is_deterministic_and_returns_best() {
        let cfg = TrainConfig {
            max_epochs: 8,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 11,
            ..Default::default()
        };
        let (tr, va) = (toy(64, 1), toy(32, 2));
        let (p1, t1) = train(&small(), &tr, &va, &cfg).unwrap();
        let (p2, t2) = train(&small(), &tr, &va, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(t1.without_timing(), t2.without_timing());
        let max = t1
            .epochs
            .iter()
            .map(|e| e.val_elbo)
            .fold(t1.initial_val_elbo, f64::max);
        assert_eq!(t1.best_val_elbo, max);
        if t1.best_epoch > 0 {
            assert_eq!(t1.epochs[t1.best_epoch - 1].val_elbo, t1.best_val_elbo);
        }
    }

    #[test]
    fn constant_outcome_with_patience_one() {
        let mut tr = toy(40, 3);
        tr.y = Some(Array2::zeros((40, 1)));
        let mut va = toy(20, 4);
        va.y = Some(Array2::zeros((20, 1)));
        let cfg = TrainConfig {
            max_epochs: 50,
            patience: 1,
            batch_size: 10,
            ..Default::default()
        };
        let (_, trace) = train(&small(), &tr, &va, &cfg).unwrap();
        assert!(trace.stopped_epoch <= 50);
        assert!(trace.best_val_elbo >= trace.initial_val_elbo);
    }

    #[test]
    fn zero_gamma_equals_no_balancing() {
        let (tr, va) = (toy(30, 5), toy(10, 6));
        let base = TrainConfig {
            max_epochs: 3,
            batch_size: 10,
            ..Default::default()
        };
        let zero = TrainConfig {
            balance_gamma: 0.0,
            sinkhorn_epsilon: 0.5,
            ..base.clone()
        };
        assert_eq!(
            train(&small(), &tr, &va, &base).unwrap().0,
            train(&small(), &tr, &va, &zero).unwrap().0
        );
    }

    #[test]
    fn empty_split_rejected() {
        let empty = Dataset::new(Array2::zeros((0, 2)), vec![], Array2::zeros((0, 1))).unwrap();
        assert!(train(&small(), &empty, &toy(5, 1), &TrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let cfg = ModelConfig {
            separate_decoder_heads: true,
            ..small()
        };
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
