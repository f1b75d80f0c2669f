//! Effect-estimation errors and the affine latent-recovery diagnostic.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::EffectMode;

fn check_lengths(y0: ArrayView1<f64>, y1: ArrayView1<f64>, tau: ArrayView1<f64>) -> Result<()> {
    if y0.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one unit".into()));
    }
    for (ctx, len) in [("y1 length", y1.len()), ("tau_hat length", tau.len())] {
        if len != y0.len() {
            return Err(Error::DimensionMismatch {
                context: ctx,
                expected: y0.len(),
                actual: len,
            });
        }
    }
    Ok(())
}

/// `|mean(y1 - y0) - mean(tau_hat)|`
pub fn eps_ate(y0: ArrayView1<f64>, y1: ArrayView1<f64>, tau_hat: ArrayView1<f64>) -> Result<f64> {
    check_lengths(y0, y1, tau_hat)?;
    let n = y0.len() as f64;
    let truth: f64 = y1.iter().zip(y0).map(|(a, b)| a - b).sum::<f64>() / n;
    Ok((truth - tau_hat.sum() / n).abs())
}

/// Root mean squared difference between realized and estimated unit effects.
pub fn sqrt_pehe(y0: ArrayView1<f64>, y1: ArrayView1<f64>, tau_hat: ArrayView1<f64>) -> Result<f64> {
    check_lengths(y0, y1, tau_hat)?;
    let sq: f64 = y1
        .iter()
        .zip(y0)
        .zip(tau_hat)
        .map(|((a, b), t)| {
            let e = (a - b) - t;
            e * e
        })
        .sum();
    Ok((sq / y0.len() as f64).sqrt())
}

/// Least-squares line `z_hat ~ a * z_true + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

/// Affine relation between a learned and a true scalar latent, per treatment group and pooled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub groups: [LineFit; 2],
    pub pooled: LineFit,
    /// `|a_0 - a_1| / max(|a_0|, |a_1|)`; 0 when both slopes vanish.
    pub group_consistency: f64,
}

/// Fits a line; a constant `z_hat` gets `r2 = 0`.
pub fn line_fit(z_hat: &[f64], z_true: &[f64]) -> Result<LineFit> {
    let n = z_hat.len();
    if n != z_true.len() {
        return Err(Error::DimensionMismatch {
            context: "line fit",
            expected: n,
            actual: z_true.len(),
        });
    }
    if n < 2 {
        return Err(Error::UndefinedFit("fewer than two points".into()));
    }
    let nf = n as f64;
    let mx = z_true.iter().sum::<f64>() / nf;
    let my = z_hat.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in z_true.iter().zip(z_hat) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if !(sxx > 0.0) {
        return Err(Error::UndefinedFit("true latent has zero variance".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 {
        (sxy * sxy / (sxx * syy)).min(1.0)
    } else {
        0.0
    };
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
        n,
    })
}

/// Minimum rows per treatment group for [`affine_recovery`].
pub const MIN_GROUP: usize = 10;

/// Per-group and pooled affine fits of a scalar learned latent against the true latent.
pub fn affine_recovery(z_hat: &[f64], z_true: &[f64], t: &[u8]) -> Result<AffineFit> {
    if t.len() != z_hat.len() {
        return Err(Error::DimensionMismatch {
            context: "affine recovery treatment",
            expected: z_hat.len(),
            actual: t.len(),
        });
    }
    let mut groups = Vec::with_capacity(2);
    for arm in 0..2u8 {
        let idx: Vec<usize> = (0..t.len()).filter(|&i| t[i] == arm).collect();
        if idx.len() < MIN_GROUP {
            return Err(Error::InvalidArgument(format!(
                "affine recovery needs at least {MIN_GROUP} rows with t = {arm}, got {}",
                idx.len()
            )));
        }
        let zh: Vec<f64> = idx.iter().map(|&i| z_hat[i]).collect();
        let zt: Vec<f64> = idx.iter().map(|&i| z_true[i]).collect();
        groups.push(line_fit(&zh, &zt)?);
    }
    let pooled = line_fit(z_hat, z_true)?;
    let (a0, a1) = (groups[0].slope, groups[1].slope);
    let denom = a0.abs().max(a1.abs());
    let group_consistency = if denom > 0.0 { (a0 - a1).abs() / denom } else { 0.0 };
    Ok(AffineFit {
        groups: [groups[0], groups[1]],
        pooled,
        group_consistency,
    })
}

fn corr(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa > 0.0 && sbb > 0.0 {
        sab / (saa * sbb).sqrt()
    } else {
        0.0
    }
}

/// Coordinate-wise fits for multidimensional latents: each true coordinate is paired
/// greedily with the unused learned coordinate of highest absolute correlation.
pub fn affine_recovery_matched(
    z_hat: ArrayView2<f64>,
    z_true: ArrayView2<f64>,
    t: &[u8],
) -> Result<Vec<(usize, AffineFit)>> {
    if z_hat.ncols() < z_true.ncols() {
        return Err(Error::DimensionMismatch {
            context: "matched recovery latent width",
            expected: z_true.ncols(),
            actual: z_hat.ncols(),
        });
    }
    let c = Array2::from_shape_fn((z_true.ncols(), z_hat.ncols()), |(i, j)| {
        corr(z_true.column(i), z_hat.column(j)).abs()
    });
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut used_t = vec![false; z_true.ncols()];
    let mut used_h = vec![false; z_hat.ncols()];
    for _ in 0..z_true.ncols() {
        let mut best = (0, 0, -1.0);
        for i in (0..z_true.ncols()).filter(|&i| !used_t[i]) {
            for j in (0..z_hat.ncols()).filter(|&j| !used_h[j]) {
                if c[[i, j]] > best.2 {
                    best = (i, j, c[[i, j]]);
                }
            }
        }
        used_t[best.0] = true;
        used_h[best.1] = true;
        pairs.push((best.0, best.1));
    }
    pairs.sort();
    pairs
        .into_iter()
        .map(|(i, j)| {
            let zh: Vec<f64> = z_hat.column(j).to_vec();
            let zt: Vec<f64> = z_true.column(i).to_vec();
            Ok((j, affine_recovery(&zh, &zt, t)?))
        })
        .collect()
}

/// Provenance of a metric evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub data_seed: u64,
    pub train_seed: u64,
    pub estimate_seed: u64,
}

/// Metrics of one fitted model on one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eps_ate: f64,
    pub sqrt_pehe: f64,
    pub mode: EffectMode,
    /// Splits the metrics were computed on, e.g. `"test"` or `"train+val"`.
    pub split: String,
    pub ate_hat: f64,
    pub ate_true: f64,
    pub affine: Option<AffineFit>,
    pub meta: RunMeta,
}

impl EvalReport {
    /// Scores an effect estimate against the true potential outcomes.
    pub fn evaluate(
        y0: ArrayView1<f64>,
        y1: ArrayView1<f64>,
        tau_hat: ArrayView1<f64>,
        mode: EffectMode,
        split: &str,
        meta: RunMeta,
    ) -> Result<Self> {
        let eps = eps_ate(y0, y1, tau_hat)?;
        let pehe = sqrt_pehe(y0, y1, tau_hat)?;
        let n = y0.len() as f64;
        let report = EvalReport {
            eps_ate: eps,
            sqrt_pehe: pehe,
            mode,
            split: split.to_string(),
            ate_hat: tau_hat.sum() / n,
            ate_true: (y1.sum() - y0.sum()) / n,
            affine: None,
            meta,
        };
        if !(report.eps_ate.is_finite() && report.sqrt_pehe.is_finite()) {
            return Err(Error::NonFinite {
                head: "evaluation metrics".into(),
            });
        }
        Ok(report)
    }

    pub const CSV_HEADER: &'static str = "mode,split,eps_ate,sqrt_pehe,ate_hat,ate_true,\
pooled_r2,r2_t0,r2_t1,slope_t0,slope_t1,group_consistency,config_hash,data_seed,train_seed";

    pub fn csv_row(&self) -> String {
        let a = |f: &dyn Fn(&AffineFit) -> f64| self.affine.as_ref().map_or(String::new(), |x| f(x).to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode.as_str(),
            self.split,
            self.eps_ate,
            self.sqrt_pehe,
            self.ate_hat,
            self.ate_true,
            a(&|x| x.pooled.r2),
            a(&|x| x.groups[0].r2),
            a(&|x| x.groups[1].r2),
            a(&|x| x.groups[0].slope),
            a(&|x| x.groups[1].slope),
            a(&|x| x.group_consistency),
            self.meta.config_hash,
            self.meta.data_seed,
            self.meta.train_seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn ate_and_pehe_examples() {
        let y0 = array![0.0, 0.0];
        let y1 = array![1.0, 2.0];
        assert_eq!(eps_ate(y0.view(), y1.view(), array![1.0, 2.0].view()).unwrap(), 0.0);
        assert!((eps_ate(y0.view(), y1.view(), array![1.7, 2.7].view()).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(eps_ate(y0.view(), y1.view(), array![0.0, 1.0].view()).unwrap(), 1.0);
        assert_eq!(sqrt_pehe(y0.view(), y1.view(), array![1.0, 2.0].view()).unwrap(), 0.0);
        assert!((sqrt_pehe(y0.view(), y1.view(), array![1.5, 2.5].view()).unwrap() - 0.5).abs() < 1e-12);
        let e = sqrt_pehe(y0.view(), y1.view(), array![-2.0, -2.0].view()).unwrap();
        assert!((e - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((12.5f64.sqrt() - 3.5355).abs() < 1e-4);
        let empty = ndarray::Array1::<f64>::zeros(0);
        assert!(eps_ate(empty.view(), empty.view(), empty.view()).is_err());
        assert!(sqrt_pehe(y0.view(), y1.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn exact_affine_map() {
        let zt: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let zh: Vec<f64> = zt.iter().map(|z| 2.0 * z + 3.0).collect();
        let t: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let f = affine_recovery(&zh, &zt, &t).unwrap();
        for g in f.groups.iter().chain([&f.pooled]) {
            assert!((g.slope - 2.0).abs() < 1e-10 * 2.0);
            assert!((g.intercept - 3.0).abs() < 1e-10 * 3.0);
            assert!((g.r2 - 1.0).abs() < 1e-12);
        }
        assert!(f.group_consistency < 1e-12);
    }

    #[test]
    fn independent_latent_has_low_r2() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let zt: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let zh: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let t: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
        assert!(affine_recovery(&zh, &zt, &t).unwrap().pooled.r2 < 0.05);
    }

    #[test]
    fn opposite_group_slopes() {
        let zt: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let t: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let zh: Vec<f64> = zt.iter().zip(&t).map(|(z, &t)| if t == 0 { *z } else { -z }).collect();
        let f = affine_recovery(&zh, &zt, &t).unwrap();
        assert!((f.groups[0].r2 - 1.0).abs() < 1e-12 && (f.groups[1].r2 - 1.0).abs() < 1e-12);
        assert!(f.pooled.r2 < 0.01);
        assert!((f.group_consistency - 2.0).abs() < 1e-12);
    }

    #[test]
    fn undefined_fits() {
        let t: Vec<u8> = (0..30).map(|i| (i % 2) as u8).collect();
        let zt = vec![1.0; 30];
        let zh: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert!(matches!(affine_recovery(&zh, &zt, &t), Err(Error::UndefinedFit(_))));
        assert!(affine_recovery(&zh[..15], &zh[..15], &t[..15]).is_err());
    }

    #[test]
    fn matched_coordinates() {
        let n = 60;
        let zt = Array2::from_shape_fn((n, 2), |(i, j)| ((i * (j + 2)) as f64 * 0.31).sin());
        let zh = Array2::from_shape_fn((n, 3), |(i, j)| match j {
            0 => 0.1 * ((i * 7) as f64).cos(),
            1 => -3.0 * zt[[i, 1]] + 1.0,
            _ => 0.5 * zt[[i, 0]],
        });
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let m = affine_recovery_matched(zh.view(), zt.view(), &t).unwrap();
        assert_eq!(m[0].0, 2);
        assert_eq!(m[1].0, 1);
        assert!((m[1].1.pooled.slope + 3.0).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn metrics_permutation_invariant(v in proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..40), seed in 0u64..1000) {
            let y0: ndarray::Array1<f64> = v.iter().map(|a| a.0).collect();
            let y1: ndarray::Array1<f64> = v.iter().map(|a| a.1).collect();
            let tau: ndarray::Array1<f64> = v.iter().map(|a| a.2).collect();
            let mut perm: Vec<usize> = (0..v.len()).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p = |a: &ndarray::Array1<f64>| perm.iter().map(|&i| a[i]).collect::<ndarray::Array1<f64>>();
            let (a1, b1) = (eps_ate(y0.view(), y1.view(), tau.view()).unwrap(), sqrt_pehe(y0.view(), y1.view(), tau.view()).unwrap());
            let (a2, b2) = (eps_ate(p(&y0).view(), p(&y1).view(), p(&tau).view()).unwrap(), sqrt_pehe(p(&y0).view(), p(&y1).view(), p(&tau).view()).unwrap());
            prop_assert!((a1 - a2).abs() < 1e-12 && (b1 - b2).abs() < 1e-12);
            if b1 == 0.0 {
                prop_assert!(a1 == 0.0);
            }
        }
    }
}
