//! Random synthetic data-generating processes with a scalar hidden latent.
//!
//! ```text
//! x ~ N(mu, diag(sigma))
//! z | x ~ N(h(x), beta * |k(x)|)
//! t | x, z ~ Bern(logistic(l(x, z)))
//! y(t) = f_t(z) / sqrt(C_t) + sqrt(alpha) * e,   e ~ N(0, 1) shared by both arms
//! ```
//!
//! `h`, `k` and `l` are linear without intercept, coefficients `U(-1, 1)`. The structure
//! selects the inputs of `l` and the parents of `z`:
//! unconfounded `l = l(x)`, proxy `l = l(z)`, instrumental `l = l(x, z)` with `z` generated
//! from an independent scalar source `w` drawn like one coordinate of `x`.
//!
//! All coefficients are drawn in a fixed order irrespective of structure, so one seed
//! yields the same covariate law, latent law and outcome functions under every structure.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{split_indices, Dataset, Split};
use crate::error::{Error, Result};
use crate::seed;

pub const COV_DIM: usize = 3;
const HIDDEN: usize = 32;
const PRESAMPLE: usize = 100_000;
const MAX_REDRAWS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Unconfounded,
    Proxy,
    Iv,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Unconfounded, Structure::Proxy, Structure::Iv];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Unconfounded => "unconfounded",
            Structure::Proxy => "proxy",
            Structure::Iv => "iv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFamily {
    Linear,
    Nonlinear,
}

impl OutcomeFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeFamily::Linear => "linear",
            OutcomeFamily::Nonlinear => "nonlinear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(OutcomeFamily::Linear),
            "nonlinear" => Some(OutcomeFamily::Nonlinear),
            _ => None,
        }
    }
}

/// Scalar network `1 -> 32 -> 32 -> 1` with tanh activations and positive weights,
/// hence strictly increasing before the output sign is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneNet {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `32 x 32`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub sign: f64,
}

impl MonotoneNet {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let scale = 2.0 / (HIDDEN as f64).sqrt();
        let mut v = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..hi)).collect()
        };
        let w1 = v(HIDDEN, 0.0, 1.0);
        let b1 = v(HIDDEN, -1.0, 1.0);
        let w2 = v(HIDDEN * HIDDEN, 0.0, scale);
        let b2 = v(HIDDEN, -1.0, 1.0);
        let w3 = v(HIDDEN, 0.0, scale);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        MonotoneNet {
            w1,
            b1,
            w2,
            b2,
            w3,
            sign,
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        let mut h1 = [0.0; HIDDEN];
        for (j, h) in h1.iter_mut().enumerate() {
            *h = (self.w1[j] * z + self.b1[j]).tanh();
        }
        let mut out = 0.0;
        for k in 0..HIDDEN {
            let mut a = self.b2[k];
            for (j, h) in h1.iter().enumerate() {
                a += h * self.w2[j * HIDDEN + k];
            }
            out += a.tanh() * self.w3[k];
        }
        self.sign * out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFns {
    /// `f_t(z) = a_t z + b_t`
    Linear { a: [f64; 2], b: [f64; 2] },
    Nonlinear { nets: [MonotoneNet; 2] },
}

impl OutcomeFns {
    /// Unnormalized `f_t(z)`.
    pub fn raw(&self, t: u8, z: f64) -> f64 {
        let t = t as usize;
        match self {
            OutcomeFns::Linear { a, b } => a[t] * z + b[t],
            OutcomeFns::Nonlinear { nets } => nets[t].eval(z),
        }
    }
}

/// A frozen data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub structure: Structure,
    pub outcome_family: OutcomeFamily,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// Number of rejected draws before this one.
    pub redraws: u64,
    pub mu: [f64; COV_DIM],
    /// Per-coordinate variances of `x`.
    pub sigma: [f64; COV_DIM],
    pub h_coef: [f64; COV_DIM],
    pub k_coef: [f64; COV_DIM],
    pub l_x: [f64; COV_DIM],
    pub l_z: f64,
    pub w_mu: f64,
    pub w_sigma: f64,
    pub h_w: f64,
    pub k_w: f64,
    pub outcome: OutcomeFns,
    /// `Var f_t(z)` over a pre-sample of the latent marginal.
    pub c: [f64; 2],
    /// Treatment rate on the same pre-sample.
    pub treatment_rate: f64,
}

fn dot3(a: &[f64; COV_DIM], x: &[f64]) -> f64 {
    a.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One unit before treatment assignment.
struct Draw {
    x: [f64; COV_DIM],
    w: f64,
    z: f64,
    p_treat: f64,
}

impl DgpSpec {
    fn draw_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let mut x = [0.0; COV_DIM];
        for (i, xi) in x.iter_mut().enumerate() {
            let u: f64 = StandardNormal.sample(rng);
            *xi = self.mu[i] + self.sigma[i].sqrt() * u;
        }
        let uw: f64 = StandardNormal.sample(rng);
        let w = self.w_mu + self.w_sigma.sqrt() * uw;
        let (h, k) = match self.structure {
            Structure::Iv => (self.h_w * w, (self.k_w * w).abs()),
            _ => (dot3(&self.h_coef, &x), dot3(&self.k_coef, &x).abs()),
        };
        let uz: f64 = StandardNormal.sample(rng);
        let z = h + (self.beta * k).sqrt() * uz;
        let l = match self.structure {
            Structure::Unconfounded => dot3(&self.l_x, &x),
            Structure::Proxy => self.l_z * z,
            Structure::Iv => dot3(&self.l_x, &x) + self.l_z * z,
        };
        Draw {
            x,
            w,
            z,
            p_treat: logistic(l),
        }
    }

    /// Normalized outcome mean `f_t(z) / sqrt(C_t)`.
    pub fn outcome_mean(&self, t: u8, z: f64) -> f64 {
        self.outcome.raw(t, z) / self.c[t as usize].sqrt()
    }

    /// Sample of the latent marginal.
    pub fn latent_sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed, &[seed::tag("latent")]);
        (0..n).map(|_| self.draw_unit(&mut rng).z).collect()
    }
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n
}

fn check_noise(alpha: f64, beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    Ok(())
}

/// Draws the process for `seed`, redrawing (with an incremented sub-seed) while the
/// treatment rate leaves `(0.05, 0.95)` or an outcome variance `C_t` falls below `1e-6`.
pub fn make_dgp(
    structure: Structure,
    outcome_family: OutcomeFamily,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<DgpSpec> {
    check_noise(alpha, beta)?;
    for redraws in 0..MAX_REDRAWS {
        let spec = draw_spec(structure, outcome_family, alpha, beta, seed, redraws);
        let ok_rate = spec.treatment_rate > 0.05 && spec.treatment_rate < 0.95;
        if ok_rate && spec.c.iter().all(|&c| c >= 1e-6) {
            return Ok(spec);
        }
        log::info!(
            "DGP seed {seed}: redrawing (treatment rate {:.3}, C = {:?})",
            spec.treatment_rate,
            spec.c
        );
    }
    Err(Error::InvalidArgument(format!(
        "no admissible DGP after {MAX_REDRAWS} redraws for seed {seed}"
    )))
}

fn draw_spec(
    structure: Structure,
    outcome_family: OutcomeFamily,
    alpha: f64,
    beta: f64,
    seed: u64,
    redraws: u64,
) -> DgpSpec {
    let mut rng = seed::rng(seed, &[seed::tag("dgp"), redraws]);
    let u3 = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| -> [f64; COV_DIM] {
        [(); COV_DIM].map(|_| rng.random_range(lo..hi))
    };
    let mu = u3(&mut rng, -0.2, 0.2);
    let sigma = u3(&mut rng, 0.0, 0.2).map(|s| s.max(f64::MIN_POSITIVE));
    let h_coef = u3(&mut rng, -1.0, 1.0);
    let k_coef = u3(&mut rng, -1.0, 1.0);
    let nets = [MonotoneNet::draw(&mut rng), MonotoneNet::draw(&mut rng)];
    let lin_a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let lin_b = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let l_x = u3(&mut rng, -1.0, 1.0);
    let l_z = rng.random_range(-1.0..1.0);
    let w_mu = rng.random_range(-0.2..0.2);
    let w_sigma = rng.random_range(0.0..0.2f64).max(f64::MIN_POSITIVE);
    let h_w = rng.random_range(-1.0..1.0);
    let k_w = rng.random_range(-1.0..1.0);
    let outcome = match outcome_family {
        OutcomeFamily::Linear => OutcomeFns::Linear { a: lin_a, b: lin_b },
        OutcomeFamily::Nonlinear => OutcomeFns::Nonlinear { nets },
    };
    let mut spec = DgpSpec {
        structure,
        outcome_family,
        alpha,
        beta,
        seed,
        redraws,
        mu,
        sigma,
        h_coef,
        k_coef,
        l_x,
        l_z,
        w_mu,
        w_sigma,
        h_w,
        k_w,
        outcome,
        c: [1.0, 1.0],
        treatment_rate: 0.0,
    };
    let mut pre = seed::rng(seed, &[seed::tag("presample"), redraws]);
    let draws: Vec<Draw> = (0..PRESAMPLE).map(|_| spec.draw_unit(&mut pre)).collect();
    spec.treatment_rate = draws.iter().map(|d| d.p_treat).sum::<f64>() / PRESAMPLE as f64;
    for t in 0..2u8 {
        let f: Vec<f64> = draws.iter().map(|d| spec.outcome.raw(t, d.z)).collect();
        spec.c[t as usize] = variance(&f);
    }
    spec
}

/// Rows sampled from a [`DgpSpec`], with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub x: Array2<f64>,
    /// Instrument source, present only for the instrumental structure.
    pub w: Option<Array1<f64>>,
    pub z_true: Array1<f64>,
    pub t: Vec<u8>,
    pub y: Array1<f64>,
    pub y0: Array1<f64>,
    pub y1: Array1<f64>,
    pub split: Vec<Split>,
}

/// Split sizes for `n` rows: equal thirds, remainder to test.
pub fn thirds(n: usize) -> (usize, usize, usize) {
    let k = n / 3;
    (k, k, n - 2 * k)
}

/// Draws `n` i.i.d. rows. Both potential outcomes share one noise draw per unit.
pub fn sample_dgp(spec: &DgpSpec, n: usize, seed: u64) -> Result<SynthDataset> {
    if n < 3 {
        return Err(Error::InvalidArgument("sample_dgp needs n >= 3".into()));
    }
    check_noise(spec.alpha, spec.beta)?;
    let mut rng = seed::rng(seed, &[seed::tag("sample")]);
    let mut x = Array2::zeros((n, COV_DIM));
    let mut w = Array1::zeros(n);
    let mut z_true = Array1::zeros(n);
    let mut t = vec![0u8; n];
    let (mut y, mut y0, mut y1) = (Array1::zeros(n), Array1::zeros(n), Array1::zeros(n));
    let sa = spec.alpha.sqrt();
    for i in 0..n {
        let d = spec.draw_unit(&mut rng);
        for j in 0..COV_DIM {
            x[[i, j]] = d.x[j];
        }
        w[i] = d.w;
        z_true[i] = d.z;
        t[i] = u8::from(rng.random::<f64>() < d.p_treat);
        let e: f64 = StandardNormal.sample(&mut rng);
        y0[i] = spec.outcome_mean(0, d.z) + sa * e;
        y1[i] = spec.outcome_mean(1, d.z) + sa * e;
        y[i] = if t[i] == 1 { y1[i] } else { y0[i] };
    }
    let (a, b, _) = thirds(n);
    let split = (0..n)
        .map(|i| {
            if i < a {
                Split::Train
            } else if i < a + b {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    Ok(SynthDataset {
        x,
        w: (spec.structure == Structure::Iv).then_some(w),
        z_true,
        t,
        y,
        y0,
        y1,
        split,
    })
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn rows(&self, which: &[Split]) -> Vec<usize> {
        split_indices(&self.split, which)
    }

    /// Model-facing view of the given rows.
    pub fn dataset(&self, rows: &[usize]) -> Dataset {
        let x = self.x.select(ndarray::Axis(0), rows);
        let t = rows.iter().map(|&i| self.t[i]).collect();
        let y = Array2::from_shape_fn((rows.len(), 1), |(k, _)| self.y[rows[k]]);
        Dataset::new(x, t, y).expect("consistent synthetic rows")
    }

    pub fn select_truth(&self, rows: &[usize]) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let pick = |a: &Array1<f64>| rows.iter().map(|&i| a[i]).collect::<Array1<f64>>();
        (pick(&self.y0), pick(&self.y1), pick(&self.z_true))
    }

    pub fn true_ate(&self) -> f64 {
        (&self.y1 - &self.y0).mean().unwrap_or(f64::NAN)
    }

    /// Multiplies every outcome column by `c`.
    pub fn scale_outcomes(&mut self, c: f64) {
        self.y *= c;
        self.y0 *= c;
        self.y1 *= c;
    }

    /// CSV with header `x1,x2,x3,[w,]z_true,t,y,y0,y1,split`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header: Vec<String> = (1..=COV_DIM).map(|j| format!("x{j}")).collect();
        if self.w.is_some() {
            header.push("w".into());
        }
        header.extend(["z_true", "t", "y", "y0", "y1", "split"].map(String::from));
        wr.write_record(&header).map_err(|e| csv_err(path, e))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = (0..COV_DIM).map(|j| self.x[[i, j]].to_string()).collect();
            if let Some(w) = &self.w {
                rec.push(w[i].to_string());
            }
            rec.push(self.z_true[i].to_string());
            rec.push(self.t[i].to_string());
            rec.push(self.y[i].to_string());
            rec.push(self.y0[i].to_string());
            rec.push(self.y1[i].to_string());
            rec.push(self.split[i].as_str().to_string());
            wr.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        wr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<SynthDataset> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header: Vec<String> = rd
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(String::from)
            .collect();
        let has_w = header.iter().any(|h| h == "w");
        let mut expected: Vec<String> = (1..=COV_DIM).map(|j| format!("x{j}")).collect();
        if has_w {
            expected.push("w".into());
        }
        expected.extend(["z_true", "t", "y", "y0", "y1", "split"].map(String::from));
        if header != expected {
            return Err(Error::format(path, format!("expected columns {}", expected.join(","))));
        }
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); expected.len() - 1];
        let mut split = Vec::new();
        for (r, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            for (c, col) in cols.iter_mut().enumerate() {
                let v: f64 = rec[c]
                    .parse()
                    .map_err(|_| Error::format(path, format!("row {r}, column {}: not a number", expected[c])))?;
                col.push(v);
            }
            let s = &rec[expected.len() - 1];
            split.push(Split::parse(s).ok_or_else(|| Error::format(path, format!("row {r}: bad split {s}")))?);
        }
        let n = split.len();
        let off = usize::from(has_w);
        let x = Array2::from_shape_fn((n, COV_DIM), |(i, j)| cols[j][i]);
        let t = cols[COV_DIM + off + 1]
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                _ => Err(Error::format(path, "treatment must be 0 or 1")),
            })
            .collect::<Result<Vec<u8>>>()?;
        let col = |k: usize| Array1::from(cols[k].clone());
        Ok(SynthDataset {
            x,
            w: has_w.then(|| col(COV_DIM)),
            z_true: col(COV_DIM + off),
            t,
            y: col(COV_DIM + off + 2),
            y0: col(COV_DIM + off + 3),
            y1: col(COV_DIM + off + 4),
            split,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Writes `<stem>.csv` and `<stem>.json` (the frozen process) into `dir`.
pub fn write_with_sidecar(data: &SynthDataset, spec: &DgpSpec, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    data.write_csv(&csv_path)?;
    let mut f = std::fs::File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
    serde_json::to_writer_pretty(&mut f, spec)?;
    f.write_all(b"\n").map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

pub fn read_spec(path: &Path) -> Result<DgpSpec> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Common factor making a collection of ATEs unit standard deviation (1 if degenerate).
pub fn ate_normalization_scale(ates: &[f64]) -> f64 {
    if ates.len() < 2 {
        return 1.0;
    }
    let sd = variance(ates).sqrt();
    if sd > 0.0 && sd.is_finite() {
        1.0 / sd
    } else {
        1.0
    }
}
