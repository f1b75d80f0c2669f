//! Diagonal Gaussians: the form taken by the prior, the encoder and the decoder outputs.

use ndarray::{Array1, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A factorized Gaussian with mean vector and strictly positive diagonal variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Array1<f64>,
    var: Array1<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Array1<f64>, var: Array1<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::DimensionMismatch {
                context: "DiagGaussian",
                expected: mean.len(),
                actual: var.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite {
                head: "gaussian mean".into(),
            });
        }
        if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::NonFinite {
                head: "gaussian variance (must be finite and > 0)".into(),
            });
        }
        Ok(DiagGaussian { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: Array1::zeros(dim),
            var: Array1::ones(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn var(&self) -> &Array1<f64> {
        &self.var
    }

    /// Log density at `x`.
    pub fn log_prob(&self, x: ArrayView1<f64>) -> Result<f64> {
        check_dim("log_prob", self.dim(), x.len())?;
        Ok(Zip::from(&x)
            .and(&self.mean)
            .and(&self.var)
            .fold(0.0, |acc, &xi, &m, &v| acc + gaussian_log_density(xi, m, v)))
    }
}

fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// `mean + sqrt(var) * u`, elementwise.
pub fn reparam_sample(g: &DiagGaussian, u: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_dim("reparam_sample", g.dim(), u.len())?;
    Ok(Zip::from(&g.mean)
        .and(&g.var)
        .and(&u)
        .map_collect(|&m, &v, &e| m + v.sqrt() * e))
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn gaussian_kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim("gaussian_kl", p.dim(), q.dim())?;
    let kl = Zip::from(&q.mean)
        .and(&q.var)
        .and(&p.mean)
        .and(&p.var)
        .fold(0.0, |acc, &qm, &qv, &pm, &pv| {
            acc + kl_term(qm, qv, pm, pv)
        });
    // Rounding can leave a tiny negative residue when q == p.
    Ok(kl.max(0.0))
}

/// One coordinate of the diagonal-Gaussian KL divergence.
#[inline]
pub fn kl_term(qm: f64, qv: f64, pm: f64, pv: f64) -> f64 {
    let d = qm - pm;
    0.5 * ((pv / qv).ln() + (qv + d * d) / pv - 1.0)
}

#[inline]
pub fn gaussian_log_density(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
