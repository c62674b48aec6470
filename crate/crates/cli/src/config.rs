use std::path::Path;

use ccme::estimators::{Hyperparams, Method, Variant};
use ccme::sweep::{EvalProfile, SweepConfig, SweepGrid};
use ccme::synth::{Scenario, DEFAULT_BETA, DEFAULT_GAMMA};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a command needs. Loaded from `--config`, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Rows generated by `simulate`.
    pub n: usize,
    /// Nuisance wiring applied by `fit`; `simulate` records it in the metadata.
    pub scenario: Option<Scenario>,
    pub hyperparams: Hyperparams,
    pub beta: [f64; 10],
    pub gamma: [f64; 10],
    pub sweep: SweepGrid,
    pub profile: EvalProfile,
    pub rr_max_n: usize,
    pub density_grid: GridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 1000,
            scenario: None,
            hyperparams: Hyperparams::default(),
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            sweep: SweepGrid::desk(),
            profile: EvalProfile::desk(),
            rr_max_n: 20_000,
            density_grid: GridSpec::default(),
        }
    }
}

/// Outcome grid for `density`. Without bounds the grid spans the model's
/// training outcomes widened by `margin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub points: usize,
    pub margin: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { lo: None, hi: None, points: 1000, margin: 2.0 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
    }

    pub fn set_method(&mut self, m: Method) {
        self.hyperparams.method = m;
        self.sweep.methods = vec![m];
    }

    pub fn set_variant(&mut self, v: Variant) {
        self.hyperparams.variant = v;
        self.sweep.variants = vec![v];
    }

    pub fn set_scenario(&mut self, s: Scenario) {
        self.scenario = Some(s);
        self.sweep.scenarios = vec![s];
    }

    /// Hyperparameters with the scenario wiring applied, if any.
    pub fn effective_hyperparams(&self) -> Hyperparams {
        match self.scenario {
            Some(s) => s.configure(&self.hyperparams),
            None => self.hyperparams.clone(),
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            grid: self.sweep.clone(),
            hyperparams: self.hyperparams.clone(),
            profile: self.profile,
            rr_max_n: self.rr_max_n,
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "hyperparams": {"method": "df"}}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.hyperparams.method, Method::Df);
        assert_eq!(partial.hyperparams.lambda1, 20.0);
    }

    #[test]
    fn scenario_applies_wiring() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.effective_hyperparams(), cfg.hyperparams);
        cfg.set_scenario(Scenario::MuMisspecified);
        assert_eq!(cfg.effective_hyperparams().outcome_cols.unwrap().len(), 9);
        assert_eq!(cfg.sweep.scenarios, vec![Scenario::MuMisspecified]);
    }
}
