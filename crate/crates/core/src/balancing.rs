//! Entropic optimal transport between treatment-group representations.
//!
//! `entropic_ot` solves `min <P, C> + eps * KL(P || a b^T)` over couplings of two uniform
//! point clouds with squared-Euclidean cost, using log-domain Sinkhorn updates.
//! `sinkhorn_distance` is the debiased divergence
//! `OT(A, B) - OT(A, A) / 2 - OT(B, B) / 2`, which is nonnegative and exactly zero for
//! identical sets.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub gamma: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            gamma: 1.0,
            sinkhorn_epsilon: 0.1,
            sinkhorn_max_iters: 500,
            sinkhorn_tol: 1e-6,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument("gamma must be finite and >= 0".into()));
        }
        if !(self.sinkhorn_epsilon > 0.0 && self.sinkhorn_epsilon.is_finite()) {
            return Err(Error::InvalidArgument("sinkhorn_epsilon must be > 0".into()));
        }
        if self.sinkhorn_max_iters == 0 {
            return Err(Error::InvalidArgument("sinkhorn_max_iters must be >= 1".into()));
        }
        if !(self.sinkhorn_tol > 0.0) {
            return Err(Error::InvalidArgument("sinkhorn_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Solution of one entropic transport problem.
#[derive(Debug, Clone)]
pub struct OtSolution {
    pub value: f64,
    /// Dual potentials for the rows of `A` and `B`.
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// A divergence value together with its convergence status.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornValue {
    pub value: f64,
    pub converged: bool,
}

/// Divergence with gradients w.r.t. every point of both sets.
#[derive(Debug, Clone)]
pub struct SinkhornGrad {
    pub value: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    pub converged: bool,
}

fn sq_cost(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    })
}

fn check_sets(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidArgument("Sinkhorn needs two nonempty point sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            context: "Sinkhorn point dimension",
            expected: a.ncols(),
            actual: b.ncols(),
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            head: "Sinkhorn input points".into(),
        });
    }
    Ok(())
}

/// `-eps * log sum_j w_j exp((pot_j - c_j) / eps)` computed stably.
fn soft_min(costs: impl Iterator<Item = f64> + Clone, pot: &Array1<f64>, log_w: f64, eps: f64) -> f64 {
    let m = costs
        .clone()
        .zip(pot)
        .map(|(c, p)| (p - c) / eps)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = costs.zip(pot).map(|(c, p)| ((p - c) / eps - m).exp()).sum();
    -eps * (m + s.ln() + log_w)
}

fn solve(cost: &Array2<f64>, cfg: &BalanceConfig) -> OtSolution {
    let (m, k) = cost.dim();
    let eps = cfg.sinkhorn_epsilon;
    let (log_a, log_b) = (-(m as f64).ln(), -(k as f64).ln());
    let mut f = Array1::<f64>::zeros(m);
    let mut g = Array1::<f64>::zeros(k);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.sinkhorn_max_iters {
        iterations = it;
        let mut delta = 0.0f64;
        for i in 0..m {
            let v = soft_min(cost.row(i).iter().copied(), &g, log_b, eps);
            delta = delta.max((v - f[i]).abs() / eps);
            f[i] = v;
        }
        for j in 0..k {
            let v = soft_min(cost.column(j).iter().copied(), &f, log_a, eps);
            delta = delta.max((v - g[j]).abs() / eps);
            g[j] = v;
        }
        if delta < cfg.sinkhorn_tol {
            converged = true;
            break;
        }
    }
    let value = f.sum() / m as f64 + g.sum() / k as f64;
    OtSolution {
        value,
        f,
        g,
        converged,
        iterations,
    }
}

/// Transport plan implied by the dual potentials.
fn plan(cost: &Array2<f64>, sol: &OtSolution, eps: f64) -> Array2<f64> {
    let (m, k) = cost.dim();
    let w = 1.0 / (m * k) as f64;
    Array2::from_shape_fn((m, k), |(i, j)| {
        w * ((sol.f[i] + sol.g[j] - cost[[i, j]]) / eps).exp()
    })
}

/// Entropic optimal-transport cost between two uniformly weighted point sets.
pub fn entropic_ot(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &BalanceConfig) -> Result<OtSolution> {
    cfg.validate()?;
    check_sets(a, b)?;
    Ok(solve(&sq_cost(a, b), cfg))
}

/// Debiased Sinkhorn divergence between two point sets (rows are points).
pub fn sinkhorn_distance(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    cfg: &BalanceConfig,
) -> Result<SinkhornValue> {
    cfg.validate()?;
    check_sets(a, b)?;
    let ab = solve(&sq_cost(a, b), cfg);
    let aa = solve(&sq_cost(a, a), cfg);
    let bb = solve(&sq_cost(b, b), cfg);
    let value = ab.value - 0.5 * (aa.value + bb.value);
    Ok(SinkhornValue {
        value: value.max(0.0),
        converged: ab.converged && aa.converged && bb.converged,
    })
}

/// Sinkhorn divergence and its gradient, by the envelope theorem on the dual problems.
pub fn sinkhorn_divergence_with_grad(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    cfg: &BalanceConfig,
) -> Result<SinkhornGrad> {
    cfg.validate()?;
    check_sets(a, b)?;
    let eps = cfg.sinkhorn_epsilon;
    let c_ab = sq_cost(a, b);
    let c_aa = sq_cost(a, a);
    let c_bb = sq_cost(b, b);
    let ab = solve(&c_ab, cfg);
    let aa = solve(&c_aa, cfg);
    let bb = solve(&c_bb, cfg);
    let p_ab = plan(&c_ab, &ab, eps);
    let p_aa = plan(&c_aa, &aa, eps);
    let p_bb = plan(&c_bb, &bb, eps);

    let mut grad_a = Array2::zeros(a.raw_dim());
    let mut grad_b = Array2::zeros(b.raw_dim());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let d = &a.row(i) - &b.row(j);
            grad_a.row_mut(i).scaled_add(2.0 * p_ab[[i, j]], &d);
            grad_b.row_mut(j).scaled_add(-2.0 * p_ab[[i, j]], &d);
        }
    }
    // OT(A, A) / 2 depends on A through both arguments; the two halves are equal.
    for (pts, p, grad) in [(a.view(), &p_aa, &mut grad_a), (b.view(), &p_bb, &mut grad_b)] {
        for i in 0..pts.nrows() {
            for j in 0..pts.nrows() {
                let w = 0.5 * (p[[i, j]] + p[[j, i]]);
                let d = &pts.row(i) - &pts.row(j);
                grad.row_mut(i).scaled_add(-2.0 * w, &d);
            }
        }
    }
    let value = ab.value - 0.5 * (aa.value + bb.value);
    Ok(SinkhornGrad {
        value: value.max(0.0),
        grad_a,
        grad_b,
        converged: ab.converged && aa.converged && bb.converged,
    })
}

/// `elbo_value - gamma * S(t0, t1)`; the penalty is skipped when either group is empty.
pub fn balanced_objective(
    elbo_value: f64,
    prior_means_t0: ArrayView2<f64>,
    prior_means_t1: ArrayView2<f64>,
    cfg: &BalanceConfig,
) -> Result<f64> {
    cfg.validate()?;
    if cfg.gamma == 0.0 {
        return Ok(elbo_value);
    }
    if prior_means_t0.nrows() == 0 || prior_means_t1.nrows() == 0 {
        log::debug!("balancing penalty skipped: one treatment group is empty");
        return Ok(elbo_value);
    }
    let s = sinkhorn_distance(prior_means_t0, prior_means_t1, cfg)?;
    if !s.converged {
        log::debug!("Sinkhorn did not converge within {} iterations", cfg.sinkhorn_max_iters);
    }
    Ok(elbo_value - cfg.gamma * s.value)
}
