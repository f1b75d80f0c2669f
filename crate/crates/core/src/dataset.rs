use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Model-facing observations: covariates and, when observed, treatment and factual outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub t: Option<Vec<u8>>,
    pub y: Option<Array2<f64>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, t: Vec<u8>, y: Array2<f64>) -> Result<Self> {
        let n = x.nrows();
        if t.len() != n {
            return Err(Error::DimensionMismatch {
                context: "Dataset treatment rows",
                expected: n,
                actual: t.len(),
            });
        }
        if y.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "Dataset outcome rows",
                expected: n,
                actual: y.nrows(),
            });
        }
        if let Some(bad) = t.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "treatment labels must be 0 or 1, found {bad}"
            )));
        }
        Ok(Dataset {
            x,
            t: Some(t),
            y: Some(y),
        })
    }

    /// Covariates only, as available for pre-treatment prediction.
    pub fn covariates_only(x: Array2<f64>) -> Self {
        Dataset {
            x,
            t: None,
            y: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn covariate_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn outcome_dim(&self) -> Option<usize> {
        self.y.as_ref().map(|y| y.ncols())
    }

    /// Treatment and factual outcome, or an argument error for covariate-only data.
    pub fn observed(&self) -> Result<(&[u8], &Array2<f64>)> {
        match (&self.t, &self.y) {
            (Some(t), Some(y)) => Ok((t.as_slice(), y)),
            _ => Err(Error::InvalidArgument(
                "treatment and factual outcome are required but the dataset holds covariates only"
                    .into(),
            )),
        }
    }

    pub fn treatment_column(&self) -> Option<Array1<f64>> {
        self.t
            .as_ref()
            .map(|t| t.iter().map(|&v| v as f64).collect())
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            t: self
                .t
                .as_ref()
                .map(|t| rows.iter().map(|&i| t[i]).collect()),
            y: self.y.as_ref().map(|y| y.select(Axis(0), rows)),
        }
    }

    /// Stacks two datasets row-wise; observed parts are kept only if both have them.
    pub fn concat(&self, other: &Dataset) -> Dataset {
        let x = ndarray::concatenate(Axis(0), &[self.x.view(), other.x.view()])
            .expect("matching covariate dimension");
        let t = match (&self.t, &other.t) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        let y = match (&self.y, &other.y) {
            (Some(a), Some(b)) => Some(
                ndarray::concatenate(Axis(0), &[a.view(), b.view()])
                    .expect("matching outcome dimension"),
            ),
            _ => None,
        };
        Dataset { x, t, y }
    }
}

/// Row indices per split label.
pub fn split_indices(labels: &[Split], which: &[Split]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, s)| which.contains(s))
        .map(|(i, _)| i)
        .collect()
}
