//! IHDP semi-synthetic benchmark: archive loading, splits and outcome regeneration.
//!
//! Two archive layouts are read:
//!
//! * NPZ with arrays `x` (n × 25 × R) and `t`, `yf`, `ycf`, `mu0`, `mu1` (n × R). A path
//!   ending in `.train.npz` is joined with its `.test.npz` sibling when one exists.
//! * A directory of headerless CSV files `ihdp_npci_<k>.csv` (k = 1..R) with columns
//!   `t,yf,ycf,mu0,mu1,x1..x25`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, Axis};
use ndarray_npy::{NpzReader, NpzWriter};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{split_indices, Dataset, Split};
use crate::error::{Error, Result};
use crate::seed;

pub const ROWS: usize = 747;
pub const COVARIATES: usize = 25;
pub const SPLIT_SIZES: (usize, usize, usize) = (471, 202, 74);
pub const ENV_VAR: &str = "IHDP_DATA";

const ARCHIVE_SCHEMA: &str = "expected arrays x (n,25,R), t, yf, ycf, mu0, mu1 (n,R) with n = 747";
const CSV_SCHEMA: &str = "expected 30 headerless columns t,yf,ycf,mu0,mu1,x1..x25 and 747 rows";

/// Bundled covariates (header row, then `t` followed by the 25 covariates).
pub const COVARIATES_CSV: &str = include_str!("../../../data/ihdp/covariates.csv");

#[derive(Debug, Clone, PartialEq)]
pub struct IhdpReplication {
    pub x: Array2<f64>,
    pub t: Vec<u8>,
    pub yf: Array1<f64>,
    pub ycf: Array1<f64>,
    pub mu0: Array1<f64>,
    pub mu1: Array1<f64>,
    pub split: Option<Vec<Split>>,
}

impl IhdpReplication {
    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if self.x.dim() != (n, COVARIATES) {
            return Err(Error::InvalidArgument(format!(
                "IHDP covariates must be {n}x{COVARIATES}, got {:?}",
                self.x.dim()
            )));
        }
        for (name, a) in [("yf", &self.yf), ("ycf", &self.ycf), ("mu0", &self.mu0), ("mu1", &self.mu1)] {
            if a.len() != n {
                return Err(Error::InvalidArgument(format!("IHDP column {name} has {} rows, expected {n}", a.len())));
            }
        }
        if let Some(s) = &self.split {
            if s.len() != n {
                return Err(Error::InvalidArgument("IHDP split labels do not cover every row".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn y0(&self) -> Array1<f64> {
        self.pick(0)
    }

    pub fn y1(&self) -> Array1<f64> {
        self.pick(1)
    }

    fn pick(&self, arm: u8) -> Array1<f64> {
        self.t
            .iter()
            .enumerate()
            .map(|(i, &t)| if t == arm { self.yf[i] } else { self.ycf[i] })
            .collect()
    }

    /// Rows carrying the given labels. Errors if the replication has not been split.
    pub fn rows(&self, which: &[Split]) -> Result<Vec<usize>> {
        let labels = self
            .split
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("IHDP replication has no split labels".into()))?;
        Ok(split_indices(labels, which))
    }

    pub fn dataset(&self, rows: &[usize]) -> Dataset {
        let x = self.x.select(Axis(0), rows);
        let t = rows.iter().map(|&i| self.t[i]).collect();
        let y = Array2::from_shape_fn((rows.len(), 1), |(k, _)| self.yf[rows[k]]);
        Dataset::new(x, t, y).expect("consistent IHDP rows")
    }

    /// Noisy potential outcomes `(y0, y1)` restricted to `rows`.
    pub fn truth(&self, rows: &[usize]) -> (Array1<f64>, Array1<f64>) {
        let (y0, y1) = (self.y0(), self.y1());
        (y0.select(Axis(0), rows), y1.select(Axis(0), rows))
    }

    /// Noiseless potential-outcome means `(mu0, mu1)` restricted to `rows`.
    pub fn means(&self, rows: &[usize]) -> (Array1<f64>, Array1<f64>) {
        (self.mu0.select(Axis(0), rows), self.mu1.select(Axis(0), rows))
    }
}

/// Uniformly random 471/202/74 partition.
pub fn split_ihdp(mut rep: IhdpReplication, seed: u64) -> IhdpReplication {
    rep.split = Some(random_split(rep.len(), seed));
    rep
}

fn random_split(n: usize, seed: u64) -> Vec<Split> {
    let n_train = (0.63 * n as f64).round() as usize;
    let n_val = ((0.27 * n as f64).round() as usize).min(n - n_train);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, &[seed::tag("ihdp_split")]));
    let mut split = vec![Split::Test; n];
    for (k, &i) in idx.iter().enumerate() {
        if k < n_train {
            split[i] = Split::Train;
        } else if k < n_train + n_val {
            split[i] = Split::Val;
        }
    }
    split
}

/// Treatment and covariates of the bundled IHDP covariate table.
pub fn bundled_covariates() -> Result<(Array2<f64>, Vec<u8>)> {
    parse_covariates(COVARIATES_CSV.as_bytes(), Path::new("<bundled covariates.csv>"))
}

pub fn load_covariates(path: &Path) -> Result<(Array2<f64>, Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_covariates(f, path)
}

fn parse_covariates<R: std::io::Read>(input: R, path: &Path) -> Result<(Array2<f64>, Vec<u8>)> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    let mut t = Vec::new();
    for (r, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        if rec.len() != COVARIATES + 1 {
            return Err(Error::format(path, format!("row {r}: expected t plus {COVARIATES} covariates")));
        }
        let vals = parse_fields(rec.iter(), path, r)?;
        t.push(treatment(vals[0], path, r)?);
        rows.extend_from_slice(&vals[1..]);
    }
    let n = t.len();
    let x = Array2::from_shape_vec((n, COVARIATES), rows).expect("row-major covariates");
    Ok((x, t))
}

fn parse_fields<'a>(fields: impl Iterator<Item = &'a str>, path: &Path, row: usize) -> Result<Vec<f64>> {
    fields
        .enumerate()
        .map(|(c, s)| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("row {row}, column {c}: not a number")))
        })
        .collect()
}

fn treatment(v: f64, path: &Path, row: usize) -> Result<u8> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::format(path, format!("row {row}: treatment must be 0 or 1, found {v}")))
    }
}

/// Parameters and draws of one regenerated outcome surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedOutcomes {
    pub a: Vec<f64>,
    pub o: f64,
    pub mu0: Array1<f64>,
    pub mu1: Array1<f64>,
    pub y0: Array1<f64>,
    pub y1: Array1<f64>,
}

const COEF_VALUES: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
const COEF_WEIGHTS: [f64; 5] = [0.6, 0.1, 0.1, 0.1, 0.1];
pub const SHIFT: f64 = 0.5;
pub const TREATED_EFFECT: f64 = 4.0;

/// `mu0 = exp(aᵀ(x + 0.5))`, `mu1 = aᵀx − o` with `o` set so the treated-group mean of
/// `mu1 − mu0` equals 4; unit Gaussian noise on each potential outcome.
pub fn generate_ihdp_outcomes(x: &Array2<f64>, t: &[u8], seed: u64) -> Result<GeneratedOutcomes> {
    let mut rng = seed::rng(seed, &[seed::tag("ihdp_coef")]);
    let a: Vec<f64> = (0..x.ncols())
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (v, w) in COEF_VALUES.iter().zip(COEF_WEIGHTS) {
                acc += w;
                if u < acc {
                    return *v;
                }
            }
            COEF_VALUES[COEF_VALUES.len() - 1]
        })
        .collect();
    outcomes_with_coefficients(x, t, a, seed)
}

pub fn outcomes_with_coefficients(x: &Array2<f64>, t: &[u8], a: Vec<f64>, seed: u64) -> Result<GeneratedOutcomes> {
    if t.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            context: "IHDP treatment rows",
            expected: x.nrows(),
            actual: t.len(),
        });
    }
    if a.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            context: "IHDP outcome coefficients",
            expected: x.ncols(),
            actual: a.len(),
        });
    }
    let treated: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 1).collect();
    if treated.is_empty() {
        return Err(Error::InvalidArgument("outcome calibration needs at least one treated row".into()));
    }
    let av = Array1::from(a.clone());
    let lin = x.dot(&av);
    let shift = av.sum() * SHIFT;
    let mu0 = lin.mapv(|v| (v + shift).exp());
    let gap: f64 = treated.iter().map(|&i| lin[i] - mu0[i]).sum::<f64>() / treated.len() as f64;
    let o = gap - TREATED_EFFECT;
    let mu1 = lin.mapv(|v| v - o);
    let mut rng = seed::rng(seed, &[seed::tag("ihdp_noise")]);
    let mut noise = |m: &Array1<f64>| m.mapv(|v| v + { let e: f64 = StandardNormal.sample(&mut rng); e });
    let y0 = noise(&mu0);
    let y1 = noise(&mu1);
    Ok(GeneratedOutcomes { a, o, mu0, mu1, y0, y1 })
}

/// One regenerated replication over the given covariates and treatments.
pub fn generate_replication(x: &Array2<f64>, t: &[u8], seed: u64) -> Result<IhdpReplication> {
    let g = generate_ihdp_outcomes(x, t, seed)?;
    let yf = t
        .iter()
        .enumerate()
        .map(|(i, &ti)| if ti == 1 { g.y1[i] } else { g.y0[i] })
        .collect();
    let ycf = t
        .iter()
        .enumerate()
        .map(|(i, &ti)| if ti == 1 { g.y0[i] } else { g.y1[i] })
        .collect();
    Ok(IhdpReplication {
        x: x.clone(),
        t: t.to_vec(),
        yf,
        ycf,
        mu0: g.mu0,
        mu1: g.mu1,
        split: None,
    })
}

/// `count` replications regenerated over the bundled covariates, replication `r` keyed by
/// `derive(seed, [r])`.
pub fn generate_archive(seed: u64, count: usize) -> Result<Vec<IhdpReplication>> {
    let (x, t) = bundled_covariates()?;
    (0..count)
        .map(|r| generate_replication(&x, &t, seed::derive(seed, &[r as u64])))
        .collect()
}

/// An opened replication archive.
#[derive(Debug)]
pub enum IhdpArchive {
    Npz {
        path: PathBuf,
        x: Array3<f64>,
        cols: [Array2<f64>; 5],
    },
    CsvDir { path: PathBuf, count: usize },
}

const COLS: [&str; 5] = ["t", "yf", "ycf", "mu0", "mu1"];

impl IhdpArchive {
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let count = (1..)
                .take_while(|k| path.join(csv_name(*k)).is_file())
                .count();
            if count == 0 {
                return Err(Error::format(path, format!("no ihdp_npci_1.csv found; {CSV_SCHEMA}")));
            }
            return Ok(IhdpArchive::CsvDir {
                path: path.to_path_buf(),
                count,
            });
        }
        let (mut x, mut cols) = read_npz(path)?;
        if let Some(test) = test_sibling(path) {
            let (xt, ct) = read_npz(&test)?;
            x = ndarray::concatenate(Axis(0), &[x.view(), xt.view()])
                .map_err(|_| Error::format(&test, format!("shape differs from training file; {ARCHIVE_SCHEMA}")))?;
            for (c, extra) in cols.iter_mut().zip(ct) {
                *c = ndarray::concatenate(Axis(0), &[c.view(), extra.view()])
                    .map_err(|_| Error::format(&test, format!("shape differs from training file; {ARCHIVE_SCHEMA}")))?;
            }
        }
        let (n, p, r) = x.dim();
        if p != COVARIATES || cols.iter().any(|c| c.dim() != (n, r)) {
            return Err(Error::format(path, format!("inconsistent shapes; {ARCHIVE_SCHEMA}")));
        }
        Ok(IhdpArchive::Npz {
            path: path.to_path_buf(),
            x,
            cols,
        })
    }

    /// Opens the archive named by `IHDP_DATA`, if set.
    pub fn from_env() -> Option<Result<Self>> {
        std::env::var_os(ENV_VAR).map(|p| IhdpArchive::open(Path::new(&p)))
    }

    pub fn path(&self) -> &Path {
        match self {
            IhdpArchive::Npz { path, .. } | IhdpArchive::CsvDir { path, .. } => path,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            IhdpArchive::Npz { x, .. } => x.dim().2,
            IhdpArchive::CsvDir { count, .. } => *count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, rep: usize) -> Result<IhdpReplication> {
        if rep >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "replication {rep} out of range; archive holds {}",
                self.len()
            )));
        }
        let out = match self {
            IhdpArchive::Npz { path, x, cols } => {
                let col = |k: usize| cols[k].slice(s![.., rep]).to_owned();
                let t = col(0)
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| treatment(v, path, i))
                    .collect::<Result<Vec<u8>>>()?;
                IhdpReplication {
                    x: x.slice(s![.., .., rep]).to_owned(),
                    t,
                    yf: col(1),
                    ycf: col(2),
                    mu0: col(3),
                    mu1: col(4),
                    split: None,
                }
            }
            IhdpArchive::CsvDir { path, .. } => read_csv_rep(&path.join(csv_name(rep + 1)))?,
        };
        if out.len() != ROWS {
            return Err(Error::format(
                self.path(),
                format!("replication {rep} has {} rows; {ARCHIVE_SCHEMA}", out.len()),
            ));
        }
        Ok(out)
    }
}

/// Opens `path` and loads replication `rep`.
pub fn load_ihdp(path: &Path, rep: usize) -> Result<IhdpReplication> {
    IhdpArchive::open(path)?.load(rep)
}

fn csv_name(k: usize) -> String {
    format!("ihdp_npci_{k}.csv")
}

fn test_sibling(path: &Path) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".train.npz")?;
    let sib = path.with_file_name(format!("{stem}.test.npz"));
    sib.is_file().then_some(sib)
}

fn read_npz(path: &Path) -> Result<(Array3<f64>, [Array2<f64>; 5])> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: ndarray_npy::ReadNpzError| Error::format(path, format!("{e}; {ARCHIVE_SCHEMA}"));
    let mut npz = NpzReader::new(BufReader::new(f)).map_err(bad)?;
    let x: Array3<f64> = npz.by_name("x").map_err(bad)?;
    let mut read = |name: &str| -> Result<Array2<f64>> { npz.by_name(name).map_err(bad) };
    let cols = [read(COLS[0])?, read(COLS[1])?, read(COLS[2])?, read(COLS[3])?, read(COLS[4])?];
    Ok((x, cols))
}

fn read_csv_rep(path: &Path) -> Result<IhdpReplication> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(f);
    let mut t = Vec::new();
    let mut cols: [Vec<f64>; 4] = Default::default();
    let mut xs = Vec::new();
    for (r, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, format!("{e}; {CSV_SCHEMA}")))?;
        if rec.len() != 5 + COVARIATES {
            return Err(Error::format(path, format!("row {r} has {} columns; {CSV_SCHEMA}", rec.len())));
        }
        let vals = parse_fields(rec.iter(), path, r)?;
        t.push(treatment(vals[0], path, r)?);
        for k in 0..4 {
            cols[k].push(vals[k + 1]);
        }
        xs.extend_from_slice(&vals[5..]);
    }
    let n = t.len();
    let [yf, ycf, mu0, mu1] = cols.map(Array1::from);
    Ok(IhdpReplication {
        x: Array2::from_shape_vec((n, COVARIATES), xs).expect("row-major covariates"),
        t,
        yf,
        ycf,
        mu0,
        mu1,
        split: None,
    })
}

fn check_same_rows(reps: &[IhdpReplication]) -> Result<usize> {
    let n = reps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no replications to write".into()))?
        .len();
    for r in reps {
        r.validate()?;
        if r.len() != n {
            return Err(Error::InvalidArgument("replications differ in row count".into()));
        }
    }
    Ok(n)
}

/// Writes replications in the NPZ layout read by [`IhdpArchive::open`].
pub fn write_npz(path: &Path, reps: &[IhdpReplication]) -> Result<()> {
    let n = check_same_rows(reps)?;
    let r = reps.len();
    let x = Array3::from_shape_fn((n, COVARIATES, r), |(i, j, k)| reps[k].x[[i, j]]);
    let col = |f: &dyn Fn(&IhdpReplication, usize) -> f64| Array2::from_shape_fn((n, r), |(i, k)| f(&reps[k], i));
    let arrays = [
        col(&|rep, i| rep.t[i] as f64),
        col(&|rep, i| rep.yf[i]),
        col(&|rep, i| rep.ycf[i]),
        col(&|rep, i| rep.mu0[i]),
        col(&|rep, i| rep.mu1[i]),
    ];
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: ndarray_npy::WriteNpzError| Error::format(path, e.to_string());
    let mut npz = NpzWriter::new(BufWriter::new(f));
    npz.add_array("x", &x).map_err(bad)?;
    for (name, a) in COLS.iter().zip(&arrays) {
        npz.add_array(*name, a).map_err(bad)?;
    }
    npz.finish().map_err(bad)?;
    Ok(())
}

/// Writes one headerless `ihdp_npci_<k>.csv` per replication into `dir`.
pub fn write_csv_dir(dir: &Path, reps: &[IhdpReplication]) -> Result<()> {
    check_same_rows(reps)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, rep) in reps.iter().enumerate() {
        let path = dir.join(csv_name(k + 1));
        let mut wr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        for i in 0..rep.len() {
            let mut rec = vec![
                rep.t[i].to_string(),
                rep.yf[i].to_string(),
                rep.ycf[i].to_string(),
                rep.mu0[i].to_string(),
                rep.mu1[i].to_string(),
            ];
            rec.extend(rep.x.row(i).iter().map(|v| v.to_string()));
            wr.write_record(&rec).map_err(|e| Error::format(&path, e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
