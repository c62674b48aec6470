//! Stage 1: the conditional mean embedding `μ̂₀(x) = E[φ(Y) | X = x, A = 1]`
//! fitted on the treated rows of the first fold.
//!
//! Every representation is expanded as `μ̂₀(x) = Σⱼ Cⱼ(x) φ(zⱼ)` over a fixed
//! set of anchors `z` (the treated outcomes for RR and DF, the grid for NK).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{nk_loss, trace_loss};
use super::Method;
use crate::data::{check_columns, SplitDataset};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg::{Cholesky, Matrix};
use crate::nn::{train, Mlp, TrainConfig};
use crate::propensity::PropensityModel;
use crate::scalar::Scalar;

/// Shape of a feature or coefficient network: hidden widths, output width and
/// initialization seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub seed: u64,
}

impl NetConfig {
    pub fn layer_sizes(&self, inputs: usize) -> Vec<usize> {
        let mut s = vec![inputs];
        s.extend(&self.hidden);
        s.push(self.outputs);
        s
    }

    pub fn init<T: Scalar>(&self, inputs: usize) -> Result<Mlp<T>> {
        Mlp::init(&self.layer_sizes(inputs), self.seed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FirstStage<T> {
    pub propensity: Option<PropensityModel<T>>,
    pub cme: Option<CmeFirstStage<T>>,
}

/// Fitted stage-1 embedding plus the covariate columns it was trained on.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CmeFirstStage<T> {
    pub cols: Vec<usize>,
    pub fit: CmeFit<T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", rename_all = "snake_case")]
pub enum CmeFit<T> {
    Rr(RrFirstStage<T>),
    Df(DfFirstStage<T>),
    Nk(NkFirstStage<T>),
}

impl<T: Scalar> CmeFirstStage<T> {
    pub fn method(&self) -> Method {
        match self.fit {
            CmeFit::Rr(_) => Method::Rr,
            CmeFit::Df(_) => Method::Df,
            CmeFit::Nk(_) => Method::Nk,
        }
    }

    pub fn anchors(&self) -> &Matrix<T> {
        match &self.fit {
            CmeFit::Rr(f) => &f.y0,
            CmeFit::Df(f) => &f.y0,
            CmeFit::Nk(f) => &f.grid,
        }
    }

    /// Coefficient matrix `C` (anchors × rows) such that `μ̂₀(x_i) = Σⱼ C_{ji} φ(zⱼ)`.
    /// `x` holds full covariate rows; the stage's columns are selected here.
    pub fn coefficients(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_columns(&self.cols, x.cols(), "outcome-model")?;
        let xs = x.select_cols(&self.cols);
        match &self.fit {
            CmeFit::Rr(f) => f.coefficients(&xs),
            CmeFit::Df(f) => f.coefficients(&xs),
            CmeFit::Nk(f) => f.coefficients(&xs),
        }
    }
}

/// Rows of `d0` with `A = 1`, restricted to `cols`, and their outcomes.
fn treated_fold<T: Scalar>(split: &SplitDataset<T>, cols: &[usize]) -> Result<(Matrix<T>, Matrix<T>)> {
    if split.treated0.is_empty() {
        return Err(Error::degenerate("stage 1 needs at least one treated row"));
    }
    check_columns(cols, split.d0.x_dim(), "outcome-model")?;
    let x0 = split.d0.x.select_rows(&split.treated0).select_cols(cols);
    let y0 = split.d0.y.select_rows(&split.treated0);
    Ok((x0, y0))
}

fn check_ridge<T: Scalar>(ridge: T) -> Result<()> {
    if !(ridge > T::zero()) || !ridge.is_finite() {
        return Err(Error::invalid(format!("ridge must be positive, got {ridge}")));
    }
    Ok(())
}

/// Kernel ridge regression of `φ(Y)` on `X`: `C(x) = (K_{X₀} + ridge·I)⁻¹ k_{X₀}(x)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "RrFirstStageParts<T>", into = "RrFirstStageParts<T>")]
pub struct RrFirstStage<T> {
    pub kernel_x: KernelSpec<T>,
    pub x0: Matrix<T>,
    pub y0: Matrix<T>,
    pub ridge: T,
    chol: Cholesky<T>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct RrFirstStageParts<T> {
    kernel_x: KernelSpec<T>,
    x0: Matrix<T>,
    y0: Matrix<T>,
    ridge: T,
}

impl<T: Scalar> TryFrom<RrFirstStageParts<T>> for RrFirstStage<T> {
    type Error = Error;

    fn try_from(p: RrFirstStageParts<T>) -> Result<Self> {
        RrFirstStage::new(p.kernel_x, p.x0, p.y0, p.ridge)
    }
}

impl<T: Scalar> From<RrFirstStage<T>> for RrFirstStageParts<T> {
    fn from(f: RrFirstStage<T>) -> Self {
        Self { kernel_x: f.kernel_x, x0: f.x0, y0: f.y0, ridge: f.ridge }
    }
}

impl<T: Scalar> RrFirstStage<T> {
    pub fn new(kernel_x: KernelSpec<T>, x0: Matrix<T>, y0: Matrix<T>, ridge: T) -> Result<Self> {
        check_ridge(ridge)?;
        if x0.rows() != y0.rows() {
            return Err(Error::invalid("covariate and outcome rows differ"));
        }
        let chol = Cholesky::factor(&kernel_x.gram_symmetric(&x0)?, ridge)?;
        Ok(Self { kernel_x, x0, y0, ridge, chol })
    }

    pub fn factor(&self) -> &Cholesky<T> {
        &self.chol
    }

    pub fn coefficients(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.chol.solve(&self.kernel_x.gram(&self.x0, x)?))
    }
}

pub fn fit_first_stage_rr<T: Scalar>(
    split: &SplitDataset<T>,
    cols: &[usize],
    kernel_x: KernelSpec<T>,
    ridge: T,
) -> Result<CmeFirstStage<T>> {
    let (x0, y0) = treated_fold(split, cols)?;
    let fit = RrFirstStage::new(kernel_x, x0, y0, ridge)?;
    Ok(CmeFirstStage { cols: cols.to_vec(), fit: CmeFit::Rr(fit) })
}

/// Deep-feature embedding: `C(x) = Ψ₀ S₀⁻¹ ψ₀(x)` with `Ψ₀ = ψ₀(X₀)` and
/// `S₀ = Ψ₀ᵀΨ₀ + ridge·I`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "DfFirstStageParts<T>", into = "DfFirstStageParts<T>")]
pub struct DfFirstStage<T> {
    pub net: Mlp<T>,
    pub x0: Matrix<T>,
    pub y0: Matrix<T>,
    pub ridge: T,
    pub loss_history: Vec<T>,
    psi0: Matrix<T>,
    chol: Cholesky<T>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct DfFirstStageParts<T> {
    net: Mlp<T>,
    x0: Matrix<T>,
    y0: Matrix<T>,
    ridge: T,
    loss_history: Vec<T>,
}

impl<T: Scalar> TryFrom<DfFirstStageParts<T>> for DfFirstStage<T> {
    type Error = Error;

    fn try_from(p: DfFirstStageParts<T>) -> Result<Self> {
        DfFirstStage::new(p.net, p.x0, p.y0, p.ridge, p.loss_history)
    }
}

impl<T: Scalar> From<DfFirstStage<T>> for DfFirstStageParts<T> {
    fn from(f: DfFirstStage<T>) -> Self {
        Self { net: f.net, x0: f.x0, y0: f.y0, ridge: f.ridge, loss_history: f.loss_history }
    }
}

impl<T: Scalar> DfFirstStage<T> {
    /// Freezes `net` as the stage-1 feature map.
    pub fn new(net: Mlp<T>, x0: Matrix<T>, y0: Matrix<T>, ridge: T, loss_history: Vec<T>) -> Result<Self> {
        check_ridge(ridge)?;
        if x0.rows() != y0.rows() {
            return Err(Error::invalid("covariate and outcome rows differ"));
        }
        let psi0 = net.predict(&x0)?;
        let chol = Cholesky::factor(&psi0.tr_matmul(&psi0), ridge)?;
        Ok(Self { net, x0, y0, ridge, loss_history, psi0, chol })
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.psi0
    }

    pub fn coefficients(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let psi = self.net.predict(x)?;
        Ok(self.psi0.matmul(&self.chol.solve(&psi.transpose())))
    }
}

/// Trains a feature network on the mean trace loss `L(Ψ)/rows` of `gram`.
pub(crate) fn train_feature_net<T: Scalar>(
    net: &mut Mlp<T>,
    inputs: &Matrix<T>,
    gram: &Matrix<T>,
    ridge: T,
    config: &TrainConfig,
    stage: &'static str,
) -> Result<Vec<T>> {
    let n = inputs.rows();
    let mut loss = |out: &Matrix<T>, rows: &[usize]| -> Result<(T, Matrix<T>)> {
        let scale = T::one() / T::from_usize_lossy(rows.len());
        let (v, g) = if rows.len() == n {
            trace_loss(gram, out, ridge)?
        } else {
            trace_loss(&gram.select_rows(rows).select_cols(rows), out, ridge)?
        };
        Ok((v * scale, g.scaled(scale)))
    };
    train(net, inputs, config, stage, &mut loss)
}

pub fn fit_first_stage_df<T: Scalar>(
    split: &SplitDataset<T>,
    cols: &[usize],
    kernel_y: KernelSpec<T>,
    net: &NetConfig,
    ridge: T,
    config: &TrainConfig,
) -> Result<CmeFirstStage<T>> {
    check_ridge(ridge)?;
    let (x0, y0) = treated_fold(split, cols)?;
    if x0.rows() < net.outputs {
        log::warn!("stage-1 deep features: {} treated rows for {} features", x0.rows(), net.outputs);
    }
    let gram = kernel_y.gram_symmetric(&y0)?;
    let mut mlp = net.init(cols.len())?;
    let history = train_feature_net(&mut mlp, &x0, &gram, ridge, config, "deep-feature stage 1")?;
    let fit = DfFirstStage::new(mlp, x0, y0, ridge, history)?;
    Ok(CmeFirstStage { cols: cols.to_vec(), fit: CmeFit::Df(fit) })
}

/// Neural-kernel embedding: `C(x) = g(x)`, coefficients over fixed grid points.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NkFirstStage<T> {
    pub net: Mlp<T>,
    pub grid: Matrix<T>,
    pub loss_history: Vec<T>,
}

impl<T: Scalar> NkFirstStage<T> {
    pub fn coefficients(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.net.predict(x)?.transpose())
    }
}

/// Rejects grids with repeated points; `K_M` would be singular.
pub fn check_grid<T: Scalar>(grid: &Matrix<T>) -> Result<()> {
    if grid.rows() == 0 || grid.cols() == 0 {
        return Err(Error::invalid("grid is empty"));
    }
    if !grid.all_finite() {
        return Err(Error::invalid("grid has non-finite points"));
    }
    for i in 0..grid.rows() {
        for j in 0..i {
            if grid.row(i) == grid.row(j) {
                return Err(Error::invalid(format!("grid points {j} and {i} coincide")));
            }
        }
    }
    Ok(())
}

/// Grid of `size` anchors for the neural-kernel estimator. One-dimensional
/// outcomes get an even grid over `[min − margin, max + margin]`; otherwise a
/// seeded sample of distinct observed outcomes is used.
pub fn nk_grid<T: Scalar>(outcomes: &Matrix<T>, size: usize, margin: T, seed: u64) -> Result<Matrix<T>> {
    if size == 0 || outcomes.rows() == 0 {
        return Err(Error::invalid("grid needs at least one point and one outcome"));
    }
    if outcomes.cols() == 1 {
        let col = outcomes.as_slice();
        let lo = col.iter().copied().fold(T::infinity(), T::min) - margin;
        let hi = col.iter().copied().fold(T::neg_infinity(), T::max) + margin;
        if size == 1 {
            return Ok(Matrix::column(vec![(lo + hi) / T::lit(2.0)]));
        }
        let step = (hi - lo) / T::from_usize_lossy(size - 1);
        let grid = Matrix::column((0..size).map(|j| lo + step * T::from_usize_lossy(j)).collect());
        check_grid(&grid)?;
        return Ok(grid);
    }
    let mut distinct: Vec<usize> = Vec::new();
    for i in 0..outcomes.rows() {
        if distinct.iter().all(|&j| outcomes.row(j) != outcomes.row(i)) {
            distinct.push(i);
        }
    }
    if distinct.len() < size {
        return Err(Error::invalid(format!("only {} distinct outcomes for a grid of {size}", distinct.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = sample(&mut rng, distinct.len(), size).into_iter().map(|k| distinct[k]).collect();
    picks.sort_unstable();
    Ok(outcomes.select_rows(&picks))
}

/// Trains a coefficient network on the mean neural-kernel quadratic with
/// per-row targets `b_i`.
pub(crate) fn train_coefficient_net<T: Scalar>(
    net: &mut Mlp<T>,
    inputs: &Matrix<T>,
    k_grid: &Matrix<T>,
    targets: &Matrix<T>,
    config: &TrainConfig,
    stage: &'static str,
) -> Result<Vec<T>> {
    let n = inputs.rows();
    let mut loss = |out: &Matrix<T>, rows: &[usize]| -> Result<(T, Matrix<T>)> {
        if rows.len() == n {
            nk_loss(k_grid, out, targets)
        } else {
            nk_loss(k_grid, out, &targets.select_rows(rows))
        }
    };
    train(net, inputs, config, stage, &mut loss)
}

pub fn fit_first_stage_nk<T: Scalar>(
    split: &SplitDataset<T>,
    cols: &[usize],
    kernel_y: KernelSpec<T>,
    grid: Matrix<T>,
    net: &NetConfig,
    config: &TrainConfig,
) -> Result<CmeFirstStage<T>> {
    check_grid(&grid)?;
    if grid.rows() != net.outputs {
        return Err(Error::invalid(format!("{} grid points for {} network outputs", grid.rows(), net.outputs)));
    }
    let (x0, y0) = treated_fold(split, cols)?;
    let k_grid = kernel_y.gram_symmetric(&grid)?;
    let targets = kernel_y.gram(&y0, &grid)?;
    let mut mlp = net.init(cols.len())?;
    let history = train_coefficient_net(&mut mlp, &x0, &k_grid, &targets, config, "neural-kernel stage 1")?;
    let fit = NkFirstStage { net: mlp, grid, loss_history: history };
    Ok(CmeFirstStage { cols: cols.to_vec(), fit: CmeFit::Nk(fit) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::estimators::losses::nk_pointwise_minimizer;
    use crate::nn::Layer;

    fn split_from(x: Vec<f64>, y: Vec<f64>) -> SplitDataset<f64> {
        let n = x.len();
        let d = Dataset::new(Matrix::column(x), vec![1.0; n], Matrix::column(y)).unwrap();
        SplitDataset::new(d.clone(), d, vec![0]).unwrap()
    }

    #[test]
    fn rr_single_point_by_hand() {
        let s = split_from(vec![0.4], vec![1.0]);
        let kx = KernelSpec::gaussian(2.0).unwrap();
        let f = fit_first_stage_rr(&s, &[0], kx, 20.0).unwrap();
        let c = f.coefficients(&Matrix::column(vec![1.3])).unwrap();
        let expected = kx.eval(&[1.3], &[0.4]).unwrap() / (1.0 + 20.0);
        assert!((c[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn rr_large_ridge_vanishes() {
        let s = split_from(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0]);
        let f = fit_first_stage_rr(&s, &[0], KernelSpec::gaussian(2.0).unwrap(), 1e12).unwrap();
        assert!(f.coefficients(&Matrix::column(vec![0.5, 1.5])).unwrap().max_abs() < 1e-11);
    }

    #[test]
    fn rr_interpolates_at_small_ridge() {
        let s = split_from(vec![0.0, 1.5, 3.0], vec![0.0, 1.0, 2.0]);
        let f = fit_first_stage_rr(&s, &[0], KernelSpec::gaussian(1.0).unwrap(), 1e-8).unwrap();
        let c = f.coefficients(&Matrix::column(vec![0.0])).unwrap();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(c[(1, 0)].abs() < 1e-6 && c[(2, 0)].abs() < 1e-6);
    }

    #[test]
    fn untreated_fold_is_degenerate() {
        let d = Dataset::new(Matrix::column(vec![0.0, 1.0]), vec![0.0, 0.0], Matrix::column(vec![0.0, 1.0])).unwrap();
        let s = SplitDataset::new(d.clone(), d, vec![0]).unwrap();
        let err = fit_first_stage_rr(&s, &[0], KernelSpec::gaussian(1.0).unwrap(), 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateData(_)));
    }

    #[test]
    fn df_coefficients_match_direct_formula() {
        let s = split_from(vec![0.0, 1.0, 2.0], vec![0.5, 1.0, -1.0]);
        let w = Matrix::from_rows(&[vec![1.0], vec![-0.5]]).unwrap();
        let net = Mlp::from_layers(vec![Layer { weight: w, bias: vec![0.2, 1.0] }]).unwrap();
        let x0 = Matrix::column(vec![0.0, 1.0, 2.0]);
        let f = DfFirstStage::new(net, x0, s.d0.y.clone(), 0.5, vec![]).unwrap();
        let psi = Matrix::from_rows(&[vec![0.2, 1.0], vec![1.2, 0.5], vec![2.2, 0.0]]).unwrap();
        let s_mat = psi.tr_matmul(&psi).add_diag(0.5);
        let det = s_mat[(0, 0)] * s_mat[(1, 1)] - s_mat[(0, 1)] * s_mat[(1, 0)];
        let inv = Matrix::from_rows(&[
            vec![s_mat[(1, 1)] / det, -s_mat[(0, 1)] / det],
            vec![-s_mat[(1, 0)] / det, s_mat[(0, 0)] / det],
        ])
        .unwrap();
        let q = Matrix::column(vec![3.2, -0.5]);
        let expected = psi.matmul(&inv).matmul(&q);
        let got = f.coefficients(&Matrix::column(vec![3.0])).unwrap();
        assert!(got.sub(&expected).max_abs() < 1e-12);
    }

    #[test]
    fn df_training_lowers_trace_loss() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|v| (2.0 * v).sin() * 2.0).collect();
        let s = split_from(x, y);
        let net = NetConfig { hidden: vec![8], outputs: 3, seed: 1 };
        let cfg = TrainConfig { epochs: 300, lr: 0.05, momentum: 0.9, batch_size: None, seed: 0 };
        let f = fit_first_stage_df(&s, &[0], KernelSpec::normalized_gaussian(1.0).unwrap(), &net, 0.1, &cfg).unwrap();
        let CmeFit::Df(df) = &f.fit else { panic!() };
        assert!(df.loss_history.last().unwrap() < &df.loss_history[0]);
    }

    #[test]
    fn nk_grid_shapes() {
        let y = Matrix::column(vec![1.0, 3.0, 2.0]);
        let g = nk_grid(&y, 5, 2.0, 0).unwrap();
        assert_eq!(g.as_slice(), &[-1.0, 0.5, 2.0, 3.5, 5.0]);
        let y2 = Matrix::from_fn(6, 2, |i, j| (i + j) as f64);
        let g2 = nk_grid(&y2, 4, 2.0, 3).unwrap();
        assert_eq!(g2.shape(), (4, 2));
        check_grid(&g2).unwrap();
        assert!(nk_grid(&y2, 7, 2.0, 3).is_err());
        assert!(check_grid(&Matrix::column(vec![1.0, 2.0, 1.0])).is_err());
    }

    #[test]
    fn nk_training_approaches_minimizer() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + v).collect();
        let s = split_from(x.clone(), y.clone());
        let ky = KernelSpec::gaussian(1.0).unwrap();
        let grid = Matrix::column(vec![0.0, 1.5, 3.0, 4.5]);
        let net = NetConfig { hidden: vec![16], outputs: 4, seed: 2 };
        let cfg = TrainConfig { epochs: 3000, lr: 0.02, momentum: 0.9, batch_size: None, seed: 0 };
        let f = fit_first_stage_nk(&s, &[0], ky, grid.clone(), &net, &cfg).unwrap();
        let CmeFit::Nk(nk) = &f.fit else { panic!() };
        let km = ky.gram_symmetric(&grid).unwrap();
        let b = ky.gram(&Matrix::column(y), &grid).unwrap();
        let best = nk_loss(&km, &nk_pointwise_minimizer(&km, &b, 0.0).unwrap(), &b).unwrap().0;
        let got = nk_loss(&km, &nk.net.predict(&Matrix::column(x)).unwrap(), &b).unwrap().0;
        assert!((got - best).abs() < 0.1 * best.abs(), "{got} vs {best}");
    }

    #[test]
    fn nk_rejects_duplicate_grid() {
        let s = split_from(vec![0.0, 1.0], vec![0.0, 1.0]);
        let net = NetConfig { hidden: vec![4], outputs: 2, seed: 0 };
        let cfg = TrainConfig { epochs: 1, lr: 0.01, momentum: 0.0, batch_size: None, seed: 0 };
        let grid = Matrix::column(vec![1.0, 1.0]);
        assert!(fit_first_stage_nk(&s, &[0], KernelSpec::gaussian(1.0).unwrap(), grid, &net, &cfg).is_err());
    }
}
