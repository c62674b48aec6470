//! Observational datasets and the two-fold split used by the estimators.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Rows of `(X, A, Y)` with binary `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dataset<T> {
    pub x: Matrix<T>,
    pub a: Vec<T>,
    pub y: Matrix<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: Matrix<T>, a: Vec<T>, y: Matrix<T>) -> Result<Self> {
        if x.rows() != a.len() || y.rows() != a.len() {
            return Err(Error::invalid(format!(
                "row counts disagree: x {}, a {}, y {}",
                x.rows(),
                a.len(),
                y.rows()
            )));
        }
        if x.cols() == 0 || y.cols() == 0 {
            return Err(Error::invalid("covariates and outcomes need at least one column"));
        }
        if a.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::invalid("treatment must be binary (0/1)"));
        }
        if !x.all_finite() || !y.all_finite() {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Self { x, a, y })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn y_dim(&self) -> usize {
        self.y.cols()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.a[i] == T::one()).collect()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            y: self.y.select_rows(rows),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            x: self.x.cast(),
            a: self.a.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
            y: self.y.cast(),
        }
    }
}

/// Stage-1 fold `d0`, stage-2 fold `d1`, and the covariate columns forming `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset<T> {
    pub d0: Dataset<T>,
    pub d1: Dataset<T>,
    /// Rows of `d0` with `A = 1`.
    pub treated0: Vec<usize>,
    /// Columns of `X` that make up `V`, zero-based.
    pub v_cols: Vec<usize>,
}

impl<T: Scalar> SplitDataset<T> {
    pub fn new(d0: Dataset<T>, d1: Dataset<T>, v_cols: Vec<usize>) -> Result<Self> {
        if d0.x_dim() != d1.x_dim() || d0.y_dim() != d1.y_dim() {
            return Err(Error::invalid("folds have different column layouts"));
        }
        check_columns(&v_cols, d0.x_dim(), "V")?;
        let treated0 = d0.treated_indices();
        Ok(Self { d0, d1, treated0, v_cols })
    }

    /// `V` for the rows of `d1`.
    pub fn v1(&self) -> Matrix<T> {
        self.d1.x.select_cols(&self.v_cols)
    }

    pub fn treated1(&self) -> Vec<usize> {
        self.d1.treated_indices()
    }
}

pub(crate) fn check_columns(cols: &[usize], dim: usize, what: &str) -> Result<()> {
    if cols.is_empty() {
        return Err(Error::invalid(format!("{what} column list is empty")));
    }
    if let Some(&c) = cols.iter().find(|&&c| c >= dim) {
        return Err(Error::invalid(format!("{what} column {c} out of range for {dim} covariates")));
    }
    Ok(())
}

/// Uniform random two-fold split; `d0` receives the extra row when the size
/// is odd.
pub fn split_data<T: Scalar>(data: &Dataset<T>, v_cols: Vec<usize>, seed: u64) -> Result<SplitDataset<T>> {
    let n = data.len();
    if n < 4 {
        return Err(Error::invalid(format!("need at least 4 rows to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n0 = n - n / 2;
    let (mut r0, mut r1) = (order[..n0].to_vec(), order[n0..].to_vec());
    r0.sort_unstable();
    r1.sort_unstable();
    let split = SplitDataset::new(data.select(&r0), data.select(&r1), v_cols)?;
    if split.treated0.is_empty() {
        return Err(Error::degenerate("no treated rows in the stage-1 fold"));
    }
    Ok(split)
}
