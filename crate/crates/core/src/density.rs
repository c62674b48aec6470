//! Conditional counterfactual densities `p̂¹(y|v) = ⟨μ̂(v), φ(y)⟩`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{CcmeModel, Method};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct DensityQuery<T> {
    pub v: Vec<T>,
    /// Outcome points, one per row.
    pub grid: Matrix<T>,
}

/// Values of one estimated density on a grid. Values can be negative; they
/// are reported unclipped and `min_value` records how far below zero they go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DensityCurve<T> {
    pub grid: Matrix<T>,
    pub values: Vec<T>,
    /// Analytic integral over the whole outcome space; `None` for an
    /// unnormalized outcome kernel.
    pub mass: Option<T>,
    pub min_value: T,
}

impl<T: Scalar> DensityCurve<T> {
    fn new(grid: Matrix<T>, values: Vec<T>, mass: Option<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { stage: "density evaluation", epoch: 0 });
        }
        let min_value = values.iter().copied().fold(T::infinity(), T::min);
        Ok(Self { grid, values, mass, min_value })
    }

    pub fn has_negative_values(&self) -> bool {
        self.min_value < T::zero()
    }
}

/// `n` evenly spaced points on `[lo, hi]` as a one-column grid.
pub fn uniform_grid<T: Scalar>(lo: T, hi: T, n: usize) -> Result<Matrix<T>> {
    if n == 0 || !(lo.is_finite() && hi.is_finite()) || (n > 1 && !(hi > lo)) {
        return Err(Error::invalid(format!("cannot build a {n}-point grid on [{lo}, {hi}]")));
    }
    if n == 1 {
        return Ok(Matrix::column(vec![lo]));
    }
    let step = (hi - lo) / T::from_usize_lossy(n - 1);
    Ok(Matrix::column((0..n).map(|i| lo + step * T::from_usize_lossy(i)).collect()))
}

/// Grid over `[min(y) − margin, max(y) + margin]`.
pub fn outcome_range_grid<T: Scalar>(y: &[T], margin: T, n: usize) -> Result<Matrix<T>> {
    if y.is_empty() {
        return Err(Error::invalid("no outcomes to span"));
    }
    let lo = y.iter().copied().fold(T::infinity(), T::min);
    let hi = y.iter().copied().fold(T::neg_infinity(), T::max);
    uniform_grid(lo - margin, hi + margin, n)
}

/// Densities at every row of `vs` on one shared grid.
pub fn eval_density_batch<T: Scalar>(model: &CcmeModel<T>, vs: &Matrix<T>, grid: &Matrix<T>) -> Result<Vec<DensityCurve<T>>> {
    let values = model.values(vs, grid)?;
    let masses = if model.kernel_y.normalized { Some(model.mass(vs)?) } else { None };
    (0..vs.rows())
        .map(|i| DensityCurve::new(grid.clone(), values.row(i).to_vec(), masses.as_ref().map(|m| m[i])))
        .collect()
}

pub fn eval_density<T: Scalar>(model: &CcmeModel<T>, query: &DensityQuery<T>) -> Result<DensityCurve<T>> {
    let vs = Matrix::row_vector(query.v.clone());
    Ok(eval_density_batch(model, &vs, &query.grid)?.remove(0))
}

fn eval_for<T: Scalar>(method: Method, model: &CcmeModel<T>, query: &DensityQuery<T>) -> Result<DensityCurve<T>> {
    if model.method != method {
        return Err(Error::invalid(format!("expected a {method} model, got {}", model.method)));
    }
    eval_density(model, query)
}

pub fn eval_density_rr<T: Scalar>(model: &CcmeModel<T>, query: &DensityQuery<T>) -> Result<DensityCurve<T>> {
    eval_for(Method::Rr, model, query)
}

pub fn eval_density_df<T: Scalar>(model: &CcmeModel<T>, query: &DensityQuery<T>) -> Result<DensityCurve<T>> {
    eval_for(Method::Df, model, query)
}

pub fn eval_density_nk<T: Scalar>(model: &CcmeModel<T>, query: &DensityQuery<T>) -> Result<DensityCurve<T>> {
    eval_for(Method::Nk, model, query)
}

/// Analytic `∫ p̂¹(y|v) dy`; requires a normalized outcome kernel.
pub fn density_mass<T: Scalar>(model: &CcmeModel<T>, v: &[T]) -> Result<T> {
    Ok(model.mass(&Matrix::row_vector(v.to_vec()))?[0])
}

/// Trapezoid rule for a curve on an increasing one-dimensional grid.
pub fn trapezoid<T: Scalar>(grid: &[T], values: &[T]) -> T {
    let mut total = T::zero();
    for k in 1..grid.len().min(values.len()) {
        total += (grid[k] - grid[k - 1]) * (values[k] + values[k - 1]) / T::lit(2.0);
    }
    total
}

/// Writes `v_id,y,density` rows (`y1..yk` for multi-dimensional outcomes).
pub fn write_curves_csv<T: Scalar, W: Write>(out: W, curves: &[DensityCurve<T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dy = curves.first().map_or(1, |c| c.grid.cols());
    let mut header = vec!["v_id".to_string()];
    if dy == 1 {
        header.push("y".into());
    } else {
        header.extend((1..=dy).map(|k| format!("y{k}")));
    }
    header.push("density".into());
    w.write_record(&header)?;
    for (id, c) in curves.iter().enumerate() {
        for (g, val) in c.values.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(c.grid.row(g).iter().map(|y| y.to_string()));
            rec.push(val.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
