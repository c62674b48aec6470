//! Split, fit the nuisances on the first fold, regress on the second.

use super::config::{Hyperparams, PropensityKind};
use super::first_stage::{
    fit_first_stage_df, fit_first_stage_nk, fit_first_stage_rr, nk_grid, CmeFirstStage, FirstStage, NetConfig,
};
use super::model::CcmeModel;
use super::second_stage::{fit_second_stage_df, fit_second_stage_nk, fit_second_stage_rr, StageTwoSettings};
use super::Method;
use crate::data::{split_data, Dataset, SplitDataset};
use crate::error::Result;
use crate::kernel::KernelSpec;
use crate::linalg::Matrix;
use crate::nn::TrainConfig;
use crate::propensity::{fit_forest, fit_logistic, ForestParams, OracleRule, PropensityModel};
use crate::scalar::Scalar;

/// Independent 64-bit seed for sub-task `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SPLIT_STREAM: u64 = 0;
const FOREST_STREAM: u64 = 1;
const STAGE1_NET_STREAM: u64 = 2;
const STAGE2_NET_STREAM: u64 = 3;
const GRID_STREAM: u64 = 4;
const BATCH_STREAM: u64 = 5;

pub fn fit_propensity<T: Scalar>(split: &SplitDataset<T>, hp: &Hyperparams, seed: u64) -> Result<PropensityModel<T>> {
    let d0 = &split.d0;
    match hp.propensity {
        PropensityKind::Forest => {
            let params = ForestParams { seed: derive_seed(seed, FOREST_STREAM), ..hp.forest.clone() };
            fit_forest(&d0.x, &d0.a, &params, hp.clip)
        }
        PropensityKind::Logistic => fit_logistic(&d0.x, &d0.a, &hp.logistic, hp.clip),
        PropensityKind::Oracle => PropensityModel::oracle(OracleRule::BoxIndicator, hp.clip),
        PropensityKind::Constant { p } => PropensityModel::oracle(OracleRule::Constant(p), hp.clip),
    }
}

fn outcome_cols(hp: &Hyperparams, dim: usize) -> Vec<usize> {
    hp.outcome_cols.clone().unwrap_or_else(|| (0..dim).collect())
}

fn train_config(hp: &Hyperparams, stage1: bool, n: usize, seed: u64) -> TrainConfig {
    let schedules = hp.schedules().unwrap_or(hp.df);
    let s = if stage1 { schedules.stage1 } else { schedules.stage2 };
    TrainConfig {
        epochs: s.epochs,
        lr: hp.learning_rate(s, n),
        momentum: hp.momentum,
        batch_size: hp.batch_size,
        seed: derive_seed(seed, BATCH_STREAM + if stage1 { 0 } else { 1 }),
    }
}

fn net_config(hp: &Hyperparams, seed: u64, stream: u64) -> NetConfig {
    NetConfig { hidden: hp.hidden.clone(), outputs: hp.features, seed: derive_seed(seed, stream) }
}

fn stage1_grid<T: Scalar>(split: &SplitDataset<T>, hp: &Hyperparams, seed: u64) -> Result<Matrix<T>> {
    let treated_y = split.d0.y.select_rows(&split.treated0);
    nk_grid(&treated_y, hp.features, T::lit(hp.nk_grid_margin), derive_seed(seed, GRID_STREAM))
}

/// Stage-1 embedding of the configured method. Learning rates scale with the
/// stage-2 fold size, like the second stage.
pub fn fit_first_stage<T: Scalar>(split: &SplitDataset<T>, hp: &Hyperparams, seed: u64) -> Result<CmeFirstStage<T>> {
    let cols = outcome_cols(hp, split.d0.x_dim());
    let n = split.d1.len();
    let m = split.treated0.len();
    let ridge = T::lit(hp.ridge_scaling.ridge(hp.lambda0, m));
    let kernel_y = KernelSpec::normalized_gaussian(T::lit(hp.bandwidth_y))?;
    match hp.method {
        Method::Rr => fit_first_stage_rr(split, &cols, KernelSpec::gaussian(T::lit(hp.bandwidth_x))?, ridge),
        Method::Df => {
            let net = net_config(hp, seed, STAGE1_NET_STREAM);
            fit_first_stage_df(split, &cols, kernel_y, &net, ridge, &train_config(hp, true, n, seed))
        }
        Method::Nk => {
            let grid = stage1_grid(split, hp, seed)?;
            let net = net_config(hp, seed, STAGE1_NET_STREAM);
            fit_first_stage_nk(split, &cols, kernel_y, grid, &net, &train_config(hp, true, n, seed))
        }
    }
}

/// Fits the configured estimator on `data`.
pub fn fit<T: Scalar>(data: &Dataset<T>, hp: &Hyperparams, seed: u64) -> Result<CcmeModel<T>> {
    hp.validate()?;
    let split = split_data(data, hp.v_cols.clone(), derive_seed(seed, SPLIT_STREAM))?;
    fit_split(&split, hp, seed)
}

/// [`fit`] on an existing split.
pub fn fit_split<T: Scalar>(split: &SplitDataset<T>, hp: &Hyperparams, seed: u64) -> Result<CcmeModel<T>> {
    hp.validate()?;
    let propensity = if hp.variant.needs_propensity() { Some(fit_propensity(split, hp, seed)?) } else { None };
    let cme = if hp.variant.needs_embedding() { Some(fit_first_stage(split, hp, seed)?) } else { None };
    let first = FirstStage { propensity, cme };
    let n = split.d1.len();
    let grid = match (&hp.nk_grid_override, hp.method) {
        (Some(g), _) => Some(Matrix::column(g.iter().map(|&v| T::lit(v)).collect())),
        (None, Method::Nk) if first.cme.is_none() => Some(stage1_grid(split, hp, seed)?),
        _ => None,
    };
    let settings = StageTwoSettings {
        kernel_v: KernelSpec::gaussian(T::lit(hp.bandwidth_v))?,
        kernel_y: KernelSpec::normalized_gaussian(T::lit(hp.bandwidth_y))?,
        ridge: T::lit(hp.ridge_scaling.ridge(hp.lambda1, n)),
        net: net_config(hp, seed, STAGE2_NET_STREAM),
        train: train_config(hp, false, n, seed),
        grid,
    };
    match hp.method {
        Method::Rr => fit_second_stage_rr(split, first, hp.variant, &settings),
        Method::Df => fit_second_stage_df(split, first, hp.variant, &settings),
        Method::Nk => fit_second_stage_nk(split, first, hp.variant, &settings),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..6).map(|k| derive_seed(7, k)).collect();
        for i in 0..6 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
    }
}
