//! Translation-invariant kernels and Gram matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
}

/// Kernel family, bandwidth and normalization.
///
/// With `normalized = false` the Gaussian kernel is `exp(-‖u-v‖²/2σ²)`; with
/// `normalized = true` it is additionally scaled by `(√(2π)σ)^{-d}` so that it
/// integrates to one over `R^d` and `⟨μ, φ(y)⟩` reads as a density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KernelSpec<T> {
    pub family: KernelFamily,
    pub bandwidth: T,
    pub normalized: bool,
}

impl<T: Scalar> KernelSpec<T> {
    pub fn gaussian(bandwidth: T) -> Result<Self> {
        let spec = Self { family: KernelFamily::Gaussian, bandwidth, normalized: false };
        spec.validate()?;
        Ok(spec)
    }

    pub fn normalized_gaussian(bandwidth: T) -> Result<Self> {
        let spec = Self { family: KernelFamily::Gaussian, bandwidth, normalized: true };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > T::zero()) || !self.bandwidth.is_finite() {
            return Err(Error::invalid(format!("kernel bandwidth must be positive, got {}", self.bandwidth)));
        }
        Ok(())
    }

    /// Value of `k(y, y)` in dimension `d`.
    pub fn diagonal(&self, d: usize) -> T {
        if self.normalized {
            self.norm_constant(d)
        } else {
            T::one()
        }
    }

    fn norm_constant(&self, d: usize) -> T {
        let root_two_pi = T::lit((2.0 * std::f64::consts::PI).sqrt());
        (root_two_pi * self.bandwidth).powi(-(d as i32))
    }

    /// Evaluates the kernel, checking that both points share a dimension.
    pub fn eval(&self, u: &[T], v: &[T]) -> Result<T> {
        if u.len() != v.len() {
            return Err(Error::invalid(format!("kernel arguments have dimensions {} and {}", u.len(), v.len())));
        }
        if u.is_empty() {
            return Err(Error::invalid("kernel arguments must have dimension >= 1"));
        }
        Ok(self.eval_unchecked(u, v))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, u: &[T], v: &[T]) -> T {
        let inv = self.prepared(u.len());
        inv.apply(sq_dist(u, v))
    }

    fn prepared(&self, d: usize) -> PreparedKernel<T> {
        let scale = if self.normalized { self.norm_constant(d) } else { T::one() };
        PreparedKernel { neg_inv_two_var: -T::one() / (T::lit(2.0) * self.bandwidth * self.bandwidth), scale }
    }

    /// Gram matrix with entry `(i, j) = k(a_i, b_j)` over the rows of `a` and `b`.
    pub fn gram(&self, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_points(a, b)?;
        let k = self.prepared(a.cols());
        Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| k.apply(sq_dist(a.row(i), b.row(j)))))
    }

    /// Symmetric Gram matrix of one point set; the upper triangle is mirrored
    /// so the result equals its transpose exactly.
    pub fn gram_symmetric(&self, a: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_points(a, a)?;
        let k = self.prepared(a.cols());
        let n = a.rows();
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = k.apply(sq_dist(a.row(i), a.row(j)));
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }

    fn check_points(&self, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
        self.validate()?;
        if a.rows() == 0 || b.rows() == 0 {
            return Err(Error::invalid("gram matrix needs non-empty point lists"));
        }
        if a.cols() != b.cols() || a.cols() == 0 {
            return Err(Error::invalid(format!(
                "point dimensions differ ({} vs {})",
                a.cols(),
                b.cols()
            )));
        }
        Ok(())
    }
}

struct PreparedKernel<T> {
    neg_inv_two_var: T,
    scale: T,
}

impl<T: Scalar> PreparedKernel<T> {
    #[inline]
    fn apply(&self, sq: T) -> T {
        self.scale * (sq * self.neg_inv_two_var).exp()
    }
}

#[inline]
fn sq_dist<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum()
}

/// `kernel_eval` in free-function form.
pub fn kernel_eval<T: Scalar>(spec: &KernelSpec<T>, u: &[T], v: &[T]) -> Result<T> {
    spec.eval(u, v)
}

/// `gram` in free-function form.
pub fn gram<T: Scalar>(spec: &KernelSpec<T>, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    spec.gram(a, b)
}
