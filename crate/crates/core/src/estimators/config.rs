use serde::{Deserialize, Serialize};

use super::{Method, Variant};
use crate::error::{Error, Result};
use crate::propensity::{ClipBounds, ForestParams, LogisticParams};

/// How `λ` turns into the ridge added to a Gram or feature matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgeScaling {
    /// ridge = λ
    Absolute,
    /// ridge = rows·λ
    SampleScaled,
}

impl RidgeScaling {
    pub fn ridge(self, lambda: f64, rows: usize) -> f64 {
        match self {
            RidgeScaling::Absolute => lambda,
            RidgeScaling::SampleScaled => lambda * rows as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensityKind {
    Forest,
    Logistic,
    /// The true propensity of the synthetic design.
    Oracle,
    Constant { p: f64 },
}

/// Epoch count and base learning rate `κ`; the rate used is `κ·n/n_ref`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub kappa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedules {
    pub stage1: Schedule,
    pub stage2: Schedule,
}

/// Full estimator configuration. Defaults follow the synthetic experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub method: Method,
    pub variant: Variant,
    /// Must equal `method` when given; mixed pairings are not supported.
    pub first_stage_method: Option<Method>,
    pub bandwidth_x: f64,
    pub bandwidth_v: f64,
    pub bandwidth_y: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub ridge_scaling: RidgeScaling,
    /// Feature count of DF networks and grid size of NK.
    pub features: usize,
    pub hidden: Vec<usize>,
    pub momentum: f64,
    pub lr_reference_n: f64,
    pub batch_size: Option<usize>,
    pub df: StageSchedules,
    pub nk: StageSchedules,
    pub nk_grid_margin: f64,
    /// Replaces the stage-2 NK grid (one-dimensional outcomes). Must agree
    /// with the stage-1 grid whenever a stage-1 embedding is fitted.
    pub nk_grid_override: Option<Vec<f64>>,
    pub propensity: PropensityKind,
    pub forest: ForestParams,
    pub logistic: LogisticParams,
    pub clip: ClipBounds,
    /// Zero-based covariate columns forming `V`.
    pub v_cols: Vec<usize>,
    /// Covariate columns seen by the stage-1 embedding; all when `None`.
    pub outcome_cols: Option<Vec<usize>>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            method: Method::Rr,
            variant: Variant::Dr,
            first_stage_method: None,
            bandwidth_x: 2.0,
            bandwidth_v: 2.0,
            bandwidth_y: 2.0,
            lambda0: 20.0,
            lambda1: 20.0,
            ridge_scaling: RidgeScaling::Absolute,
            features: 20,
            hidden: vec![20, 20],
            momentum: 0.9,
            lr_reference_n: 200.0,
            batch_size: None,
            df: StageSchedules {
                stage1: Schedule { epochs: 6000, kappa: 2e-4 },
                stage2: Schedule { epochs: 1000, kappa: 2e-4 },
            },
            nk: StageSchedules {
                stage1: Schedule { epochs: 16000, kappa: 4e-4 },
                stage2: Schedule { epochs: 500, kappa: 4e-4 },
            },
            nk_grid_margin: 2.0,
            nk_grid_override: None,
            propensity: PropensityKind::Forest,
            forest: ForestParams::default(),
            logistic: LogisticParams::default(),
            clip: ClipBounds::default(),
            v_cols: (0..5).collect(),
            outcome_cols: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let Some(m) = self.first_stage_method {
            if m != self.method {
                return bad(format!("first stage {m} cannot be paired with second stage {}", self.method));
            }
        }
        for (name, v) in [
            ("bandwidth_x", self.bandwidth_x),
            ("bandwidth_v", self.bandwidth_v),
            ("bandwidth_y", self.bandwidth_y),
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lr_reference_n", self.lr_reference_n),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.features == 0 || self.hidden.contains(&0) {
            return bad("network layers must have at least one unit".into());
        }
        for s in [self.df.stage1, self.df.stage2, self.nk.stage1, self.nk.stage2] {
            if !(s.kappa > 0.0 && s.kappa.is_finite()) {
                return bad(format!("learning-rate base must be positive, got {}", s.kappa));
            }
        }
        if !(self.nk_grid_margin >= 0.0) {
            return bad("grid margin must be non-negative".into());
        }
        if let Some(g) = &self.nk_grid_override {
            if self.method != Method::Nk {
                return bad("a grid override only applies to the neural-kernel method".into());
            }
            if g.len() != self.features {
                return bad(format!("grid override has {} points, features = {}", g.len(), self.features));
            }
        }
        if let PropensityKind::Constant { p } = self.propensity {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("constant propensity must lie in (0, 1], got {p}"));
            }
        }
        if self.v_cols.is_empty() {
            return bad("V needs at least one column".into());
        }
        if self.outcome_cols.as_ref().is_some_and(|c| c.is_empty()) {
            return bad("outcome model needs at least one column".into());
        }
        self.clip.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Learning rate `κ·n/n_ref` for a fold of `n` rows.
    pub fn learning_rate(&self, schedule: Schedule, n: usize) -> f64 {
        schedule.kappa * n as f64 / self.lr_reference_n
    }

    pub fn schedules(&self) -> Option<StageSchedules> {
        match self.method {
            Method::Rr => None,
            Method::Df => Some(self.df),
            Method::Nk => Some(self.nk),
        }
    }
}
