//! Synthetic design with a bimodal counterfactual outcome, its closed-form
//! conditional density, and the misspecification scenarios.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{CcmeModel, Hyperparams, PropensityKind};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const DIM_X: usize = 10;
pub const DIM_V: usize = 5;
/// Covariate dropped from the outcome model in scenario (c), zero-based.
pub const DROPPED_COVARIATE: usize = 5;

pub const DEFAULT_BETA: [f64; DIM_X] = [1.0, -0.5, 0.8, -0.7, 0.6, 1.0, 0.3, -0.2, 0.1, -0.3];
pub const DEFAULT_GAMMA: [f64; DIM_X] = [0.8, 0.0, 0.0, 0.6, 0.0, 2.0, 0.4, 0.0, 0.0, 0.2];

/// Which nuisance is misspecified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// (a) forest propensity, full outcome model.
    #[serde(rename = "a")]
    BothCorrect,
    /// (b) logistic propensity.
    #[serde(rename = "b")]
    PiMisspecified,
    /// (c) outcome model without `X₆`.
    #[serde(rename = "c")]
    MuMisspecified,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::BothCorrect, Scenario::PiMisspecified, Scenario::MuMisspecified];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::BothCorrect => "a",
            Scenario::PiMisspecified => "b",
            Scenario::MuMisspecified => "c",
        }
    }

    /// Applies the scenario's nuisance wiring to `base`.
    pub fn configure(self, base: &Hyperparams) -> Hyperparams {
        let mut hp = base.clone();
        match self {
            Scenario::BothCorrect => {
                hp.propensity = PropensityKind::Forest;
                hp.outcome_cols = None;
            }
            Scenario::PiMisspecified => {
                hp.propensity = PropensityKind::Logistic;
                hp.outcome_cols = None;
            }
            Scenario::MuMisspecified => {
                hp.propensity = PropensityKind::Forest;
                hp.outcome_cols = Some((0..DIM_X).filter(|&j| j != DROPPED_COVARIATE).collect());
            }
        }
        hp
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "both" | "both_correct" => Ok(Scenario::BothCorrect),
            "b" | "pi" | "pi_misspecified" => Ok(Scenario::PiMisspecified),
            "c" | "mu" | "mu_misspecified" => Ok(Scenario::MuMisspecified),
            other => Err(Error::Parse(format!("unknown scenario {other:?} (expected a, b or c)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub seed: u64,
    pub scenario: Scenario,
    pub beta: [f64; DIM_X],
    pub gamma: [f64; DIM_X],
}

impl DgpConfig {
    pub fn new(n: usize, seed: u64, scenario: Scenario) -> Self {
        Self { n, seed, scenario, beta: DEFAULT_BETA, gamma: DEFAULT_GAMMA }
    }
}

/// Unobserved quantities of each generated row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub propensity: Vec<f64>,
    pub shift: Vec<f64>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

pub fn true_propensity(x: &[f64]) -> f64 {
    let inside = (0.0..=2.0).contains(&x[0]) && x[DROPPED_COVARIATE] >= 1.5;
    if inside {
        0.9
    } else {
        0.1
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Noise scale `0.5(1 + 0.5|x₁| + 0.3|x₅|)`.
pub fn noise_sd(x1: f64, x5: f64) -> f64 {
    0.5 * (1.0 + 0.5 * x1.abs() + 0.3 * x5.abs())
}

/// Draws `cfg.n` rows. The scenario does not change the data, only how the
/// estimators are wired.
pub fn generate(cfg: &DgpConfig) -> Result<(Dataset<f64>, Latent)> {
    if cfg.n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c: Vec<f64> = cfg.beta.iter().zip(&cfg.gamma).map(|(b, g)| b + g).collect();
    let n = cfg.n;
    let mut x = Matrix::zeros(n, DIM_X);
    let mut a = Vec::with_capacity(n);
    let mut y = Matrix::zeros(n, 1);
    let mut latent = Latent {
        propensity: Vec::with_capacity(n),
        shift: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
    };
    for i in 0..n {
        for j in 0..DIM_X {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[(i, j)] = 1.0 + z;
        }
        let row = x.row(i);
        let pi = true_propensity(row);
        let treated = rng.random::<f64>() < pi;
        let shift = if rng.random::<f64>() < logistic(0.5 * row[0]) { 15.0 } else { 0.0 };
        let sd = noise_sd(row[0], row[4]);
        let noise = Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()))?;
        let eps = noise.sample(&mut rng);
        let eps0 = noise.sample(&mut rng);
        let y1 = 3.0 + row.iter().zip(&c).map(|(v, w)| v * w).sum::<f64>() + shift + eps;
        let y0 = 1.0 + row.iter().zip(&cfg.beta).map(|(v, w)| v * w).sum::<f64>() + eps0;
        a.push(if treated { 1.0 } else { 0.0 });
        y[(i, 0)] = if treated { y1 } else { y0 };
        latent.propensity.push(pi);
        latent.shift.push(shift);
        latent.y1.push(y1);
        latent.y0.push(y0);
    }
    Ok((Dataset::new(x, a, y)?, latent))
}

/// Draws `n` conditioning points from the marginal of `V`, `N(1, I₅)`.
pub fn sample_v(n: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(n, DIM_V, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        1.0 + z
    })
}

/// Closed-form law of `Y¹ | V = v`: a two-component Gaussian mixture with
/// means `m₀(v)` and `m₀(v) + 15`, common variance and weight
/// `logistic(0.5 v₁)` on the shifted component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub c: [f64; DIM_X],
    /// `Σ_{j>5} c_j`, the mean contribution of the unobserved covariates.
    pub hidden_mean: f64,
    /// `Σ_{j>5} c_j²`, their variance contribution.
    pub hidden_var: f64,
}

impl GroundTruth {
    pub fn new(beta: &[f64; DIM_X], gamma: &[f64; DIM_X]) -> Self {
        let mut c = [0.0; DIM_X];
        for j in 0..DIM_X {
            c[j] = beta[j] + gamma[j];
        }
        let hidden_mean = c[DIM_V..].iter().sum();
        let hidden_var = c[DIM_V..].iter().map(|v| v * v).sum();
        Self { c, hidden_mean, hidden_var }
    }

    pub fn from_config(cfg: &DgpConfig) -> Self {
        Self::new(&cfg.beta, &cfg.gamma)
    }

    pub fn weight(&self, v: &[f64]) -> f64 {
        logistic(0.5 * v[0])
    }

    pub fn mean0(&self, v: &[f64]) -> f64 {
        3.0 + self.c[..DIM_V].iter().zip(v).map(|(c, x)| c * x).sum::<f64>() + self.hidden_mean
    }

    pub fn mean1(&self, v: &[f64]) -> f64 {
        self.mean0(v) + 15.0
    }

    pub fn variance(&self, v: &[f64]) -> f64 {
        self.hidden_var + noise_sd(v[0], v[4]).powi(2)
    }

    pub fn density(&self, v: &[f64], y: f64) -> f64 {
        let var = self.variance(v);
        let norm = |m: f64| (-(y - m).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        let p = self.weight(v);
        p * norm(self.mean1(v)) + (1.0 - p) * norm(self.mean0(v))
    }

    pub fn cdf(&self, v: &[f64], y: f64) -> f64 {
        let sd = self.variance(v).sqrt();
        let p = self.weight(v);
        p * normal_cdf((y - self.mean1(v)) / sd) + (1.0 - p) * normal_cdf((y - self.mean0(v)) / sd)
    }

    /// Truth on a grid, one row per conditioning point.
    pub fn density_matrix(&self, vs: &Matrix<f64>, ys: &[f64]) -> Matrix<f64> {
        Matrix::from_fn(vs.rows(), ys.len(), |i, g| self.density(vs.row(i), ys[g]))
    }
}

impl Default for GroundTruth {
    fn default() -> Self {
        Self::new(&DEFAULT_BETA, &DEFAULT_GAMMA)
    }
}

/// `true_density` in free-function form.
pub fn true_density(truth: &GroundTruth, v: &[f64], y: f64) -> f64 {
    truth.density(v, y)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes `erfcc`, |error| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Mean of squared differences over every entry.
pub fn mse_values(estimate: &Matrix<f64>, truth: &Matrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() || estimate.rows() * estimate.cols() == 0 {
        return Err(Error::invalid("estimate and truth differ in shape"));
    }
    let n = (estimate.rows() * estimate.cols()) as f64;
    Ok(estimate.as_slice().iter().zip(truth.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// Joint mean over test points and grid of `(p̂¹(y|v) − p¹(y|v))²`.
/// Test points are processed in chunks to bound memory.
pub fn mse<T: Scalar>(model: &CcmeModel<T>, truth: &GroundTruth, test_v: &Matrix<f64>, ys: &[f64]) -> Result<f64> {
    const CHUNK: usize = 512;
    let grid: Matrix<T> = Matrix::column(ys.iter().map(|&y| T::lit(y)).collect());
    let eval = model.evaluator(&grid)?;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start < test_v.rows() {
        let rows: Vec<usize> = (start..(start + CHUNK).min(test_v.rows())).collect();
        let vs = test_v.select_rows(&rows);
        let est = eval.values(&vs.cast::<T>())?;
        for (k, &r) in rows.iter().enumerate() {
            for (g, &y) in ys.iter().enumerate() {
                let d = est[(k, g)].to_f64_lossy() - truth.density(test_v.row(r), y);
                total += d * d;
            }
        }
        count += rows.len() * ys.len();
        start += CHUNK;
    }
    if count == 0 {
        return Err(Error::invalid("no test points"));
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { stage: "mse", epoch: 0 });
    }
    Ok(total / count as f64)
}

/// Least-squares slope of `log(mse)` against `log(n)`.
pub fn loglog_slope(ns: &[f64], mses: &[f64]) -> Result<f64> {
    if ns.len() != mses.len() || ns.len() < 3 {
        return Err(Error::invalid("need at least three (n, mse) pairs"));
    }
    if ns.iter().chain(mses).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("sample sizes and errors must be positive"));
    }
    let lx: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = mses.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("sample sizes must not all be equal"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::trapezoid;

    #[test]
    fn constants_at_defaults() {
        let t = GroundTruth::default();
        assert!((t.hidden_mean - 3.5).abs() < 1e-12);
        assert!((t.hidden_var - 9.55).abs() < 1e-12);
        let v1 = [2.2, -0.2, 2.2, -0.2, 2.2];
        assert!((t.weight(&v1) - 0.750_260_105_595_117_4).abs() < 1e-12);
        assert!((t.mean0(&v1) - 13.66).abs() < 1e-12);
        assert!((t.variance(&v1) - 11.4544).abs() < 1e-12);
        let v2 = [-0.2, 2.2, -0.2, 2.2, -0.2];
        assert!((t.weight(&v2) - 0.475).abs() < 1e-3);
    }

    #[test]
    fn density_integrates_to_one() {
        let t = GroundTruth::default();
        for v in [[2.2, -0.2, 2.2, -0.2, 2.2], [-1.0, 0.0, 3.0, 1.0, -2.0]] {
            let s = t.variance(&v).sqrt();
            let lo = t.mean0(&v) - 10.0 * s;
            let hi = t.mean1(&v) + 10.0 * s;
            let ys: Vec<f64> = (0..=20_000).map(|k| lo + (hi - lo) * k as f64 / 20_000.0).collect();
            let fs: Vec<f64> = ys.iter().map(|&y| t.density(&v, y)).collect();
            assert!((trapezoid(&ys, &fs) - 1.0).abs() < 1e-6);
            assert!((t.cdf(&v, hi) - 1.0).abs() < 1e-6 && t.cdf(&v, lo) < 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let cfg = DgpConfig::new(500, 3, Scenario::BothCorrect);
        let (d1, l1) = generate(&cfg).unwrap();
        let (d2, _) = generate(&cfg).unwrap();
        assert_eq!(d1, d2);
        for i in 0..500 {
            assert!(d1.a[i] == 0.0 || d1.a[i] == 1.0);
            if d1.a[i] == 1.0 {
                assert_eq!(d1.y[(i, 0)], l1.y1[i]);
            } else {
                assert_eq!(d1.y[(i, 0)], l1.y0[i]);
            }
            assert_eq!(l1.propensity[i], true_propensity(d1.x.row(i)));
        }
        assert_ne!(generate(&DgpConfig::new(500, 4, Scenario::BothCorrect)).unwrap().0, d1);
    }

    #[test]
    fn treated_fraction_matches_monte_carlo() {
        let (d, _) = generate(&DgpConfig::new(50_000, 8, Scenario::BothCorrect)).unwrap();
        let frac = d.a.iter().sum::<f64>() / 50_000.0;
        let probe = sample_v(0, 0);
        assert_eq!(probe.rows(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 400_000;
        let mut mean_pi = 0.0;
        for _ in 0..draws {
            let mut x = [0.0; DIM_X];
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = 1.0 + z;
            }
            mean_pi += true_propensity(&x);
        }
        mean_pi /= draws as f64;
        assert!((frac - mean_pi).abs() < 0.01, "{frac} vs {mean_pi}");
    }

    #[test]
    fn scenario_wiring() {
        let base = Hyperparams::default();
        let c = Scenario::MuMisspecified.configure(&base);
        assert_eq!(c.outcome_cols.as_ref().unwrap().len(), 9);
        assert!(!c.outcome_cols.unwrap().contains(&DROPPED_COVARIATE));
        assert_eq!(Scenario::PiMisspecified.configure(&base).propensity, PropensityKind::Logistic);
        assert_eq!("C".parse::<Scenario>().unwrap(), Scenario::MuMisspecified);
        assert!("d".parse::<Scenario>().is_err());
    }

    #[test]
    fn mse_identities() {
        let t = GroundTruth::default();
        let vs = sample_v(7, 1);
        let ys: Vec<f64> = (0..50).map(|k| k as f64 * 0.8 - 5.0).collect();
        let truth = t.density_matrix(&vs, &ys);
        assert_eq!(mse_values(&truth, &truth).unwrap(), 0.0);
        let zero = Matrix::zeros(7, 50);
        let mean_sq = truth.as_slice().iter().map(|v| v * v).sum::<f64>() / 350.0;
        assert!((mse_values(&zero, &truth).unwrap() - mean_sq).abs() < 1e-15);
        let delta = 0.01;
        let a = truth.map(|v| v + 0.002);
        let b = a.map(|v| v + delta);
        let mean_err = a.sub(&truth).sum() / 350.0;
        let lhs = mse_values(&b, &truth).unwrap();
        let rhs = mse_values(&a, &truth).unwrap() + 2.0 * delta * mean_err + delta * delta;
        assert!((lhs - rhs).abs() < 1e-15);
    }

    #[test]
    fn slopes() {
        let ns = [200.0, 500.0, 2000.0, 5000.0];
        let inv: Vec<f64> = ns.iter().map(|n| 3.0 / n).collect();
        assert!((loglog_slope(&ns, &inv).unwrap() + 1.0).abs() < 1e-12);
        assert!(loglog_slope(&ns, &[2.0; 4]).unwrap().abs() < 1e-12);
        let two_thirds: Vec<f64> = ns.iter().map(|n: &f64| 0.7 * n.powf(-2.0 / 3.0)).collect();
        assert!((loglog_slope(&ns, &two_thirds).unwrap() + 2.0 / 3.0).abs() < 1e-9);
        assert!(loglog_slope(&ns[..2], &inv[..2]).is_err());
        assert!(loglog_slope(&ns, &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn erfc_accuracy() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.959_963_985) - 0.975).abs() < 2e-7);
        assert!((normal_cdf(-1.0) - 0.158_655_253_9).abs() < 2e-7);
    }
}
