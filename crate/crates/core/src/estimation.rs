//! Potential-outcome and effect estimates from a fitted model.
//!
//! Pre-treatment estimates sample the latent from the prior `p(z | x)`; post-treatment
//! estimates sample it from the encoder `q(z | x, y, t)` at the observed treatment and
//! outcome. Either way both decoder arms are evaluated on the same draws.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{GaussianBatch, ModelParams};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMode {
    Pre,
    Post,
}

impl EffectMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EffectMode::Pre => "pre",
            EffectMode::Post => "post",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub mu0: Array2<f64>,
    pub mu1: Array2<f64>,
    /// Always exactly `mu1 - mu0`.
    pub tau: Array2<f64>,
    pub mode: EffectMode,
    pub samples: usize,
}

impl EffectEstimate {
    pub fn new(mu0: Array2<f64>, mu1: Array2<f64>, mode: EffectMode, samples: usize) -> Self {
        let tau = &mu1 - &mu0;
        EffectEstimate {
            mu0,
            mu1,
            tau,
            mode,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.tau.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.nrows() == 0
    }
}

/// Units processed per parallel task.
const CHUNK: usize = 64;

/// Estimates `mu_0`, `mu_1` and the CATE for every unit of `data`.
///
/// Unit `i` draws its `samples` latent noise vectors from a stream keyed by `(seed, i)`,
/// so results do not depend on chunking or thread count.
pub fn estimate_effects(
    params: &ModelParams,
    data: &Dataset,
    mode: EffectMode,
    samples: usize,
    seed: u64,
) -> Result<EffectEstimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument("effect estimation needs S >= 1".into()));
    }
    let observed = match mode {
        EffectMode::Post => Some(data.observed().map_err(|_| {
            Error::InvalidArgument("post-treatment estimation needs factual (y, t)".into())
        })?),
        EffectMode::Pre => None,
    };
    let n_rows = data.len();
    let d = params.config.outcome_dim;
    let starts: Vec<usize> = (0..n_rows).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n_rows);
            let rows: Vec<usize> = (start..end).collect();
            let x = data.x.slice(s![start..end, ..]);
            let obs = observed.map(|(t, y)| (&t[start..end], y.slice(s![start..end, ..])));
            chunk_estimate(params, x, obs, &rows, mode, samples, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mu0 = Array2::zeros((n_rows, d));
    let mut mu1 = Array2::zeros((n_rows, d));
    for (&start, (m0, m1)) in starts.iter().zip(parts) {
        let end = start + m0.nrows();
        mu0.slice_mut(s![start..end, ..]).assign(&m0);
        mu1.slice_mut(s![start..end, ..]).assign(&m1);
    }
    Ok(EffectEstimate::new(mu0, mu1, mode, samples))
}

fn chunk_estimate(
    params: &ModelParams,
    x: ArrayView2<f64>,
    observed: Option<(&[u8], ArrayView2<f64>)>,
    rows: &[usize],
    mode: EffectMode,
    samples: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let cfg = &params.config;
    if cfg.degenerate_prior && mode == EffectMode::Pre {
        let t0 = vec![0u8; rows.len()];
        let t1 = vec![1u8; rows.len()];
        let h0 = params.prior_batch(x, Some(&t0))?.mean;
        let h1 = params.prior_batch(x, Some(&t1))?.mean;
        return Ok((params.decode_all(h0.view(), 0)?.mean, params.decode_all(h1.view(), 1)?.mean));
    }
    let n = cfg.latent_dim;
    let m = rows.len();
    // noise[(i * samples + l), :] belongs to unit rows[i], draw l
    let mut noise = Array2::<f64>::zeros((m * samples, n));
    for (i, &row) in rows.iter().enumerate() {
        let mut rng = seed::rng(seed, &[row as u64]);
        for l in 0..samples {
            for j in 0..n {
                noise[[i * samples + l, j]] = StandardNormal.sample(&mut rng);
            }
        }
    }
    let latent = |dist: &GaussianBatch| -> Array2<f64> {
        let mut z = noise.clone();
        for (k, mut zr) in z.axis_iter_mut(Axis(0)).enumerate() {
            let i = k / samples;
            for j in 0..n {
                zr[j] = dist.mean[[i, j]] + dist.var[[i, j]].sqrt() * zr[j];
            }
        }
        z
    };
    let average = |out: Array2<f64>| -> Array2<f64> {
        out.into_shape_with_order((m, samples, cfg.outcome_dim))
            .expect("row-major decoder output")
            .mean_axis(Axis(1))
            .expect("samples >= 1")
    };
    let arm = |z: &Array2<f64>, t: u8| -> Result<Array2<f64>> {
        Ok(average(params.decode_all(z.view(), t)?.mean))
    };
    match (mode, observed) {
        (EffectMode::Post, Some((t, y))) => {
            let q = params.encode_batch(x, y, t)?;
            let z = latent(&q);
            Ok((arm(&z, 0)?, arm(&z, 1)?))
        }
        (EffectMode::Post, None) => unreachable!("checked by the caller"),
        (EffectMode::Pre, _) => {
            if cfg.balanced_prior {
                let z = latent(&params.prior_batch(x, None)?);
                Ok((arm(&z, 0)?, arm(&z, 1)?))
            } else {
                let t0 = vec![0u8; m];
                let t1 = vec![1u8; m];
                let z0 = latent(&params.prior_batch(x, Some(&t0))?);
                let z1 = latent(&params.prior_batch(x, Some(&t1))?);
                Ok((arm(&z0, 0)?, arm(&z1, 1)?))
            }
        }
    }
}

/// Mean of the per-unit effects.
pub fn ate(est: &EffectEstimate) -> Array1<f64> {
    est.tau
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::from_elem(est.tau.ncols(), f64::NAN))
}

/// Point representation of each unit: the prior mean (pre) or the encoder mean (post).
///
/// A treatment-conditional prior is evaluated at the factual treatment.
pub fn latent_means(params: &ModelParams, data: &Dataset, mode: EffectMode) -> Result<Array2<f64>> {
    match mode {
        EffectMode::Pre => {
            let t = if params.config.balanced_prior {
                None
            } else {
                Some(data.observed()?.0)
            };
            Ok(params.prior_batch(data.x.view(), t)?.mean)
        }
        EffectMode::Post => {
            let (t, y) = data.observed()?;
            Ok(params.encode_batch(data.x.view(), y.view(), t)?.mean)
        }
    }
}
