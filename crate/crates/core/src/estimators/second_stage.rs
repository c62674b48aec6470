//! Stage 2: regression of the pseudo-outcomes on `V`.

use serde::{Deserialize, Serialize};

use super::expansion::{bracket, build_k_xi, Expansion};
use super::first_stage::{check_grid, train_coefficient_net, train_feature_net, CmeFit, FirstStage, NetConfig};
use super::model::CcmeModel;
use super::pseudo::{pseudo_targets, PseudoOutcomes};
use super::{Method, Variant};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg::{Cholesky, Matrix};
use crate::nn::{Mlp, TrainConfig};
use crate::scalar::Scalar;

/// Everything stage 2 needs besides the data and the first stage.
#[derive(Clone, Debug)]
pub struct StageTwoSettings<T> {
    pub kernel_v: KernelSpec<T>,
    pub kernel_y: KernelSpec<T>,
    /// Ridge of the RR and DF solves, already scaled.
    pub ridge: T,
    pub net: NetConfig,
    pub train: TrainConfig,
    /// NK grid; defaults to the first stage's grid.
    pub grid: Option<Matrix<T>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", rename_all = "snake_case")]
pub enum SecondStage<T> {
    Rr(RrSecondStage<T>),
    Df(DfSecondStage<T>),
    Nk(NkSecondStage<T>),
}

impl<T: Scalar> SecondStage<T> {
    pub fn method(&self) -> Method {
        match self {
            SecondStage::Rr(_) => Method::Rr,
            SecondStage::Df(_) => Method::Df,
            SecondStage::Nk(_) => Method::Nk,
        }
    }

    pub fn v_dim(&self) -> usize {
        match self {
            SecondStage::Rr(s) => s.v.cols(),
            SecondStage::Df(s) => s.net.input_dim(),
            SecondStage::Nk(s) => s.net.input_dim(),
        }
    }
}

/// `β(v) = (K_V + ridge·I)⁻¹ k_V(v)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "RrSecondParts<T>", into = "RrSecondParts<T>")]
pub struct RrSecondStage<T> {
    pub kernel_v: KernelSpec<T>,
    pub v: Matrix<T>,
    pub ridge: T,
    chol: Cholesky<T>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct RrSecondParts<T> {
    kernel_v: KernelSpec<T>,
    v: Matrix<T>,
    ridge: T,
}

impl<T: Scalar> TryFrom<RrSecondParts<T>> for RrSecondStage<T> {
    type Error = Error;

    fn try_from(p: RrSecondParts<T>) -> Result<Self> {
        RrSecondStage::new(p.kernel_v, p.v, p.ridge)
    }
}

impl<T: Scalar> From<RrSecondStage<T>> for RrSecondParts<T> {
    fn from(s: RrSecondStage<T>) -> Self {
        Self { kernel_v: s.kernel_v, v: s.v, ridge: s.ridge }
    }
}

impl<T: Scalar> RrSecondStage<T> {
    pub fn new(kernel_v: KernelSpec<T>, v: Matrix<T>, ridge: T) -> Result<Self> {
        if v.rows() == 0 {
            return Err(Error::degenerate("stage 2 has no rows"));
        }
        if !(ridge > T::zero()) {
            return Err(Error::invalid(format!("ridge must be positive, got {ridge}")));
        }
        let chol = Cholesky::factor(&kernel_v.gram_symmetric(&v)?, ridge)?;
        Ok(Self { kernel_v, v, ridge, chol })
    }

    /// Representer weights, one column per query row of `vs`.
    pub fn weights(&self, vs: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.chol.solve(&self.kernel_v.gram(&self.v, vs)?))
    }
}

/// `w(v) = Ψ S⁻¹ ψ(v)` with `Ψ = ψ(V)` and `S = ΨᵀΨ + ridge·I`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "DfSecondParts<T>", into = "DfSecondParts<T>")]
pub struct DfSecondStage<T> {
    pub net: Mlp<T>,
    pub v: Matrix<T>,
    pub ridge: T,
    pub loss_history: Vec<T>,
    psi: Matrix<T>,
    chol: Cholesky<T>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct DfSecondParts<T> {
    net: Mlp<T>,
    v: Matrix<T>,
    ridge: T,
    loss_history: Vec<T>,
}

impl<T: Scalar> TryFrom<DfSecondParts<T>> for DfSecondStage<T> {
    type Error = Error;

    fn try_from(p: DfSecondParts<T>) -> Result<Self> {
        DfSecondStage::new(p.net, p.v, p.ridge, p.loss_history)
    }
}

impl<T: Scalar> From<DfSecondStage<T>> for DfSecondParts<T> {
    fn from(s: DfSecondStage<T>) -> Self {
        Self { net: s.net, v: s.v, ridge: s.ridge, loss_history: s.loss_history }
    }
}

impl<T: Scalar> DfSecondStage<T> {
    /// Freezes `net` as the stage-2 feature map.
    pub fn new(net: Mlp<T>, v: Matrix<T>, ridge: T, loss_history: Vec<T>) -> Result<Self> {
        if v.rows() == 0 {
            return Err(Error::degenerate("stage 2 has no rows"));
        }
        let psi = net.predict(&v)?;
        let chol = Cholesky::factor(&psi.tr_matmul(&psi), ridge)?;
        Ok(Self { net, v, ridge, loss_history, psi, chol })
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.psi
    }

    pub fn weights(&self, vs: &Matrix<T>) -> Result<Matrix<T>> {
        let q = self.net.predict(vs)?;
        Ok(self.psi.matmul(&self.chol.solve(&q.transpose())))
    }
}

/// `p̂(y|v) = Σⱼ f(v)ⱼ k_Y(ỹⱼ, y)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NkSecondStage<T> {
    pub net: Mlp<T>,
    pub grid: Matrix<T>,
    pub loss_history: Vec<T>,
}

/// Stage-2 rows, pseudo-outcomes and plug-in expansion for one variant.
pub(crate) struct Prepared<T> {
    pub pseudo: PseudoOutcomes<T>,
    pub x: Matrix<T>,
    pub y: Matrix<T>,
    pub v: Matrix<T>,
    pub expansion: Option<Expansion<T>>,
}

pub(crate) fn expansion_for<T: Scalar>(
    first: &FirstStage<T>,
    pseudo: &PseudoOutcomes<T>,
    x: &Matrix<T>,
) -> Result<Option<Expansion<T>>> {
    if !pseudo.uses_plugin() {
        return Ok(None);
    }
    let cme = first.cme.as_ref().ok_or_else(|| Error::Config("plug-in variant needs a stage-1 embedding".into()))?;
    Ok(Some(Expansion { anchors: cme.anchors().clone(), coeffs: cme.coefficients(x)? }))
}

fn prepare<T: Scalar>(
    split: &SplitDataset<T>,
    first: &FirstStage<T>,
    variant: Variant,
    method: Method,
) -> Result<Prepared<T>> {
    if let Some(cme) = &first.cme {
        if cme.method() != method {
            return Err(Error::Config(format!("cannot pair a {} first stage with a {method} second stage", cme.method())));
        }
    }
    let pseudo = pseudo_targets(variant, split, first.propensity.as_ref())?;
    let x = split.d1.x.select_rows(&pseudo.rows);
    let y = split.d1.y.select_rows(&pseudo.rows);
    let v = split.v1().select_rows(&pseudo.rows);
    let expansion = expansion_for(first, &pseudo, &x)?;
    Ok(Prepared { pseudo, x, y, v, expansion })
}

fn one_step_first<T>(variant: Variant, first: FirstStage<T>) -> FirstStage<T> {
    if variant == Variant::OneStep {
        FirstStage { propensity: None, cme: None }
    } else {
        first
    }
}

pub fn fit_second_stage_rr<T: Scalar>(
    split: &SplitDataset<T>,
    first: FirstStage<T>,
    variant: Variant,
    settings: &StageTwoSettings<T>,
) -> Result<CcmeModel<T>> {
    let first = one_step_first(variant, first);
    let p = prepare(split, &first, variant, Method::Rr)?;
    let second = RrSecondStage::new(settings.kernel_v, p.v, settings.ridge)?;
    CcmeModel::assemble(variant, settings.kernel_y, split.v_cols.clone(), first, p.pseudo, p.x, p.y, SecondStage::Rr(second))
}

pub fn fit_second_stage_df<T: Scalar>(
    split: &SplitDataset<T>,
    first: FirstStage<T>,
    variant: Variant,
    settings: &StageTwoSettings<T>,
) -> Result<CcmeModel<T>> {
    let first = one_step_first(variant, first);
    let p = prepare(split, &first, variant, Method::Df)?;
    let g = build_k_xi(&settings.kernel_y, &p.y, &p.pseudo, p.expansion.as_ref())?;
    let mut net = settings.net.init(p.v.cols())?;
    let history = train_feature_net(&mut net, &p.v, &g, settings.ridge, &settings.train, "deep-feature stage 2")?;
    let second = DfSecondStage::new(net, p.v, settings.ridge, history)?;
    CcmeModel::assemble(variant, settings.kernel_y, split.v_cols.clone(), first, p.pseudo, p.x, p.y, SecondStage::Df(second))
}

/// Grid shared by both NK stages; a second-stage grid that differs from the
/// first stage's is rejected.
pub(crate) fn shared_grid<T: Scalar>(first: &FirstStage<T>, requested: Option<&Matrix<T>>) -> Result<Matrix<T>> {
    let stage1 = first.cme.as_ref().and_then(|c| match &c.fit {
        CmeFit::Nk(nk) => Some(&nk.grid),
        _ => None,
    });
    let grid = match (stage1, requested) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::GridMismatch("second-stage grid differs from the first-stage grid".into()))
        }
        (Some(a), _) => a.clone(),
        (None, Some(b)) => b.clone(),
        (None, None) => return Err(Error::Config("neural-kernel stage 2 needs a grid".into())),
    };
    check_grid(&grid)?;
    Ok(grid)
}

pub fn fit_second_stage_nk<T: Scalar>(
    split: &SplitDataset<T>,
    first: FirstStage<T>,
    variant: Variant,
    settings: &StageTwoSettings<T>,
) -> Result<CcmeModel<T>> {
    let grid = shared_grid(&first, settings.grid.as_ref())?;
    if grid.rows() != settings.net.outputs {
        return Err(Error::invalid(format!("{} grid points for {} network outputs", grid.rows(), settings.net.outputs)));
    }
    let first = one_step_first(variant, first);
    let p = prepare(split, &first, variant, Method::Nk)?;
    let k_grid = settings.kernel_y.gram_symmetric(&grid)?;
    let targets = bracket(&settings.kernel_y, &p.y, &p.pseudo, p.expansion.as_ref(), &grid)?;
    let mut net = settings.net.init(p.v.cols())?;
    let history = train_coefficient_net(&mut net, &p.v, &k_grid, &targets, &settings.train, "neural-kernel stage 2")?;
    let second = NkSecondStage { net, grid, loss_history: history };
    CcmeModel::assemble(variant, settings.kernel_y, split.v_cols.clone(), first, p.pseudo, p.x, p.y, SecondStage::Nk(second))
}

/// Regression of `φ(Y)` on `V` over the treated stage-2 rows, with no
/// propensity and no stage-1 embedding.
pub fn fit_one_step<T: Scalar>(split: &SplitDataset<T>, method: Method, settings: &StageTwoSettings<T>) -> Result<CcmeModel<T>> {
    let none = FirstStage { propensity: None, cme: None };
    match method {
        Method::Rr => fit_second_stage_rr(split, none, Variant::OneStep, settings),
        Method::Df => fit_second_stage_df(split, none, Variant::OneStep, settings),
        Method::Nk => fit_second_stage_nk(split, none, Variant::OneStep, settings),
    }
}

/// `NK` targets `b_i` (rows × grid) of a fitted model; exposed for checks
/// against the closed-form minimizer.
pub fn nk_targets<T: Scalar>(model: &CcmeModel<T>) -> Result<Matrix<T>> {
    let SecondStage::Nk(nk) = &model.second else {
        return Err(Error::invalid("model is not a neural-kernel model"));
    };
    bracket(&model.kernel_y, &model.y, &model.pseudo, model.expansion(), &nk.grid)
}
