use serde::{Deserialize, Serialize};

use super::expansion::{bracket, row_mass, Expansion};
use super::first_stage::{CmeFit, FirstStage};
use super::pseudo::PseudoOutcomes;
use super::second_stage::{expansion_for, SecondStage};
use super::{Method, Variant};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Fitted CCME estimator `v ↦ μ̂_{Y¹|V}(v)`.
///
/// Derived caches (plug-in coefficients, factorizations) are rebuilt when a
/// model is deserialized, so only inputs and network weights are stored.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "ModelParts<T>", into = "ModelParts<T>")]
pub struct CcmeModel<T> {
    pub method: Method,
    pub variant: Variant,
    pub kernel_y: KernelSpec<T>,
    pub v_cols: Vec<usize>,
    pub first: FirstStage<T>,
    pub pseudo: PseudoOutcomes<T>,
    /// Covariates and outcomes of the stage-2 rows in `pseudo.rows` order.
    pub x: Matrix<T>,
    pub y: Matrix<T>,
    pub second: SecondStage<T>,
    expansion: Option<Expansion<T>>,
    row_mass: Vec<T>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ModelParts<T> {
    variant: Variant,
    kernel_y: KernelSpec<T>,
    v_cols: Vec<usize>,
    first: FirstStage<T>,
    pseudo: PseudoOutcomes<T>,
    x: Matrix<T>,
    y: Matrix<T>,
    second: SecondStage<T>,
}

impl<T: Scalar> TryFrom<ModelParts<T>> for CcmeModel<T> {
    type Error = Error;

    fn try_from(p: ModelParts<T>) -> Result<Self> {
        CcmeModel::assemble(p.variant, p.kernel_y, p.v_cols, p.first, p.pseudo, p.x, p.y, p.second)
    }
}

impl<T: Scalar> From<CcmeModel<T>> for ModelParts<T> {
    fn from(m: CcmeModel<T>) -> Self {
        Self {
            variant: m.variant,
            kernel_y: m.kernel_y,
            v_cols: m.v_cols,
            first: m.first,
            pseudo: m.pseudo,
            x: m.x,
            y: m.y,
            second: m.second,
        }
    }
}

impl<T: Scalar> CcmeModel<T> {
    /// Validates stage pairing and shapes, then builds the evaluation caches.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        variant: Variant,
        kernel_y: KernelSpec<T>,
        v_cols: Vec<usize>,
        first: FirstStage<T>,
        pseudo: PseudoOutcomes<T>,
        x: Matrix<T>,
        y: Matrix<T>,
        second: SecondStage<T>,
    ) -> Result<Self> {
        let method = second.method();
        if let Some(cme) = &first.cme {
            if cme.method() != method {
                return Err(Error::Config(format!("cannot pair a {} first stage with a {method} second stage", cme.method())));
            }
            if let (CmeFit::Nk(a), SecondStage::Nk(b)) = (&cme.fit, &second) {
                if a.grid != b.grid {
                    return Err(Error::GridMismatch("second-stage grid differs from the first-stage grid".into()));
                }
            }
        }
        let n = pseudo.len();
        if x.rows() != n || y.rows() != n || pseudo.direct.len() != n || pseudo.plugin.len() != n {
            return Err(Error::invalid("stage-2 rows and pseudo-outcomes disagree"));
        }
        let stage_rows = match &second {
            SecondStage::Rr(s) => Some(s.v.rows()),
            SecondStage::Df(s) => Some(s.v.rows()),
            SecondStage::Nk(_) => None,
        };
        if stage_rows.is_some_and(|r| r != n) {
            return Err(Error::invalid("second stage was fitted on a different number of rows"));
        }
        if second.v_dim() != v_cols.len() {
            return Err(Error::invalid("second stage input dimension differs from the V columns"));
        }
        let expansion = expansion_for(&first, &pseudo, &x)?;
        let row_mass = row_mass(&pseudo, expansion.as_ref());
        Ok(Self { method, variant, kernel_y, v_cols, first, pseudo, x, y, second, expansion, row_mass })
    }

    pub fn expansion(&self) -> Option<&Expansion<T>> {
        self.expansion.as_ref()
    }

    pub fn v_dim(&self) -> usize {
        self.v_cols.len()
    }

    pub fn y_dim(&self) -> usize {
        self.y.cols()
    }

    pub fn n_rows(&self) -> usize {
        self.pseudo.len()
    }

    fn check_v(&self, vs: &Matrix<T>) -> Result<()> {
        if vs.cols() != self.v_dim() {
            return Err(Error::invalid(format!("model expects V of dimension {}, got {}", self.v_dim(), vs.cols())));
        }
        if vs.rows() == 0 {
            return Err(Error::invalid("no conditioning points"));
        }
        Ok(())
    }

    /// Stage-2 weights (rows × queries) of the RR and DF estimators.
    pub fn weights(&self, vs: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_v(vs)?;
        match &self.second {
            SecondStage::Rr(s) => s.weights(vs),
            SecondStage::Df(s) => s.weights(vs),
            SecondStage::Nk(_) => Err(Error::invalid("neural-kernel models have no representer weights")),
        }
    }

    /// Coefficients `f(v)` over the grid (queries × grid) of an NK model.
    pub fn nk_coefficients(&self, vs: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_v(vs)?;
        match &self.second {
            SecondStage::Nk(s) => s.net.predict(vs),
            _ => Err(Error::invalid("model is not a neural-kernel model")),
        }
    }

    /// `⟨μ̂(v), φ(y)⟩` for every query `v` (rows) and outcome `y` (columns).
    pub fn values(&self, vs: &Matrix<T>, ys: &Matrix<T>) -> Result<Matrix<T>> {
        self.evaluator(ys)?.values(vs)
    }

    /// Precomputes everything that depends only on the outcome grid `ys`.
    pub fn evaluator(&self, ys: &Matrix<T>) -> Result<GridEvaluator<'_, T>> {
        if ys.cols() != self.y_dim() || ys.rows() == 0 {
            return Err(Error::invalid(format!("outcome grid must be non-empty with dimension {}", self.y_dim())));
        }
        let basis = match &self.second {
            SecondStage::Nk(s) => self.kernel_y.gram(&s.grid, ys)?,
            _ => bracket(&self.kernel_y, &self.y, &self.pseudo, self.expansion(), ys)?,
        };
        Ok(GridEvaluator { model: self, basis })
    }

    /// Analytic `∫⟨μ̂(v), φ(y)⟩ dy` per query, valid for a normalized `k_Y`.
    pub fn mass(&self, vs: &Matrix<T>) -> Result<Vec<T>> {
        if !self.kernel_y.normalized {
            return Err(Error::invalid("density mass needs a normalized outcome kernel"));
        }
        match &self.second {
            SecondStage::Nk(_) => {
                let f = self.nk_coefficients(vs)?;
                Ok((0..f.rows()).map(|i| f.row(i).iter().copied().sum()).collect())
            }
            _ => Ok(self.weights(vs)?.tr_matvec(&self.row_mass)),
        }
    }
}

/// A model bound to one outcome grid. For RR and DF `basis` holds
/// `⟨ξ̂_i, φ(y_g)⟩` (rows × grid); for NK it holds `k_Y(ỹⱼ, y_g)` (grid points × grid).
pub struct GridEvaluator<'a, T> {
    model: &'a CcmeModel<T>,
    basis: Matrix<T>,
}

impl<T: Scalar> GridEvaluator<'_, T> {
    pub fn grid_len(&self) -> usize {
        self.basis.cols()
    }

    /// Density values, one row per query in `vs`.
    pub fn values(&self, vs: &Matrix<T>) -> Result<Matrix<T>> {
        match &self.model.second {
            SecondStage::Nk(_) => Ok(self.model.nk_coefficients(vs)?.matmul(&self.basis)),
            _ => self.apply(&self.model.weights(vs)?),
        }
    }

    /// Curves for explicit stage-2 weights (rows × queries) of an RR or DF model.
    pub fn apply(&self, weights: &Matrix<T>) -> Result<Matrix<T>> {
        if matches!(self.model.second, SecondStage::Nk(_)) || weights.rows() != self.basis.rows() {
            return Err(Error::invalid(format!("expected {} representer weights per query", self.basis.rows())));
        }
        Ok(weights.tr_matmul(&self.basis))
    }
}
