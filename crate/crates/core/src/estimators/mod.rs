//! Two-stage CCME estimators: ridge regression (RR), deep features (DF) and
//! neural kernel (NK), each with the DR, IPW, PI and One-Step variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

mod config;
pub mod expansion;
pub mod first_stage;
pub mod losses;
mod model;
mod pipeline;
pub mod pseudo;
pub mod second_stage;

pub use config::{Hyperparams, PropensityKind, RidgeScaling, Schedule, StageSchedules};
pub use expansion::{bracket, build_k_xi, Expansion};
pub use first_stage::{
    check_grid, fit_first_stage_df, fit_first_stage_nk, fit_first_stage_rr, nk_grid, CmeFirstStage, CmeFit, DfFirstStage,
    FirstStage, NetConfig, NkFirstStage, RrFirstStage,
};
pub use losses::{nk_loss, nk_pointwise_minimizer, trace_loss};
pub use model::{CcmeModel, GridEvaluator};
pub use pipeline::{derive_seed, fit, fit_first_stage, fit_propensity, fit_split};
pub use pseudo::{compute_omega, pseudo_targets, PseudoOutcomes};
pub use second_stage::{
    fit_one_step, fit_second_stage_df, fit_second_stage_nk, fit_second_stage_rr, nk_targets, DfSecondStage, NkSecondStage,
    RrSecondStage, SecondStage, StageTwoSettings,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rr,
    Df,
    Nk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dr,
    Ipw,
    Pi,
    #[serde(rename = "onestep")]
    OneStep,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rr, Method::Df, Method::Nk];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rr => "rr",
            Method::Df => "df",
            Method::Nk => "nk",
        }
    }
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dr, Variant::Ipw, Variant::Pi, Variant::OneStep];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dr => "dr",
            Variant::Ipw => "ipw",
            Variant::Pi => "pi",
            Variant::OneStep => "onestep",
        }
    }

    pub fn needs_propensity(self) -> bool {
        matches!(self, Variant::Dr | Variant::Ipw)
    }

    pub fn needs_embedding(self) -> bool {
        matches!(self, Variant::Dr | Variant::Pi)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "rr" => Ok(Method::Rr),
            "df" => Ok(Method::Df),
            "nk" => Ok(Method::Nk),
            other => Err(Error::Parse(format!("unknown method {other:?} (expected rr, df or nk)"))),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "dr" => Ok(Variant::Dr),
            "ipw" => Ok(Variant::Ipw),
            "pi" => Ok(Variant::Pi),
            "onestep" => Ok(Variant::OneStep),
            other => Err(Error::Parse(format!("unknown variant {other:?} (expected dr, ipw, pi or onestep)"))),
        }
    }
}
