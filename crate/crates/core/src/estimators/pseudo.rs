//! Inverse-propensity weights and the coefficient form of the pseudo-outcomes.
//!
//! A pseudo-outcome is `direct_i·φ(Y_i) + plugin_i·μ̂₀(X_i)`. Only the two
//! coefficient vectors are stored; every estimator works with Gram entries.

use serde::{Deserialize, Serialize};

use super::Variant;
use crate::data::{Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::propensity::PropensityModel;
use crate::scalar::Scalar;

/// `ω_i = A_i / π̂(X_i)`, exactly zero for control rows.
pub fn compute_omega<T: Scalar>(d1: &Dataset<T>, propensity: &PropensityModel<T>) -> Result<Vec<T>> {
    (0..d1.len())
        .map(|i| {
            if d1.a[i] == T::one() {
                Ok(T::one() / propensity.predict(d1.x.row(i))?)
            } else {
                Ok(T::zero())
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PseudoOutcomes<T> {
    /// Rows of the stage-2 fold entering the regression.
    pub rows: Vec<usize>,
    pub direct: Vec<T>,
    pub plugin: Vec<T>,
}

impl<T: Scalar> PseudoOutcomes<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn uses_plugin(&self) -> bool {
        self.plugin.iter().any(|&c| c != T::zero())
    }

    pub fn uses_direct(&self) -> bool {
        self.direct.iter().any(|&c| c != T::zero())
    }
}

/// Pseudo-outcome coefficients of `variant` on the stage-2 fold.
///
/// DR and IPW need a propensity model; PI and One-Step ignore it. One-Step
/// keeps only the treated rows and never touches the first-stage embedding.
pub fn pseudo_targets<T: Scalar>(
    variant: Variant,
    split: &SplitDataset<T>,
    propensity: Option<&PropensityModel<T>>,
) -> Result<PseudoOutcomes<T>> {
    let n = split.d1.len();
    let omega = || -> Result<Vec<T>> {
        let p = propensity.ok_or_else(|| Error::Config(format!("{variant} needs a propensity model")))?;
        compute_omega(&split.d1, p)
    };
    let all: Vec<usize> = (0..n).collect();
    let out = match variant {
        Variant::Dr => {
            let w = omega()?;
            let plugin = w.iter().map(|&v| T::one() - v).collect();
            PseudoOutcomes { rows: all, direct: w, plugin }
        }
        Variant::Ipw => PseudoOutcomes { rows: all, direct: omega()?, plugin: vec![T::zero(); n] },
        Variant::Pi => PseudoOutcomes { rows: all, direct: vec![T::zero(); n], plugin: vec![T::one(); n] },
        Variant::OneStep => {
            if propensity.is_some() {
                log::warn!("one-step ignores the propensity model");
            }
            let rows = split.treated1();
            let m = rows.len();
            PseudoOutcomes { rows, direct: vec![T::one(); m], plugin: vec![T::zero(); m] }
        }
    };
    if out.is_empty() {
        return Err(Error::degenerate(format!("{variant} has no stage-2 rows to regress on")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::propensity::{ClipBounds, OracleRule};

    fn split(a: &[f64]) -> SplitDataset<f64> {
        let n = a.len();
        let mut x = Matrix::from_fn(n, 10, |_, _| 1.0);
        for i in 0..n {
            x[(i, 5)] = 2.0;
        }
        let d = Dataset::new(x, a.to_vec(), Matrix::from_fn(n, 1, |i, _| i as f64)).unwrap();
        SplitDataset::new(d.clone(), d, vec![0, 1, 2, 3, 4]).unwrap()
    }

    fn constant(p: f64) -> PropensityModel<f64> {
        PropensityModel::oracle(OracleRule::Constant(p), ClipBounds::new(0.01, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn omega_values() {
        let s = split(&[1.0, 0.0]);
        assert_eq!(compute_omega(&s.d1, &constant(0.5)).unwrap(), vec![2.0, 0.0]);
        let oracle = PropensityModel::oracle(OracleRule::BoxIndicator, ClipBounds::default()).unwrap();
        let w = compute_omega(&s.d1, &oracle).unwrap();
        assert!((w[0] - 1.0 / 0.9).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn dr_with_unit_propensity_drops_plugin() {
        let s = split(&[1.0, 1.0, 1.0]);
        let p = pseudo_targets(Variant::Dr, &s, Some(&constant(1.0))).unwrap();
        assert_eq!(p.direct, vec![1.0; 3]);
        assert!(!p.uses_plugin());
    }

    #[test]
    fn variants() {
        let s = split(&[1.0, 0.0, 1.0]);
        let prop = constant(0.5);
        let ipw = pseudo_targets(Variant::Ipw, &s, Some(&prop)).unwrap();
        assert_eq!(ipw.direct, vec![2.0, 0.0, 2.0]);
        assert!(!ipw.uses_plugin());
        let pi = pseudo_targets(Variant::Pi, &s, None).unwrap();
        assert!(!pi.uses_direct() && pi.plugin == vec![1.0; 3]);
        let one = pseudo_targets(Variant::OneStep, &s, None).unwrap();
        assert_eq!(one.rows, vec![0, 2]);
        let dr = pseudo_targets(Variant::Dr, &s, Some(&prop)).unwrap();
        assert_eq!(dr.plugin, vec![-1.0, 1.0, -1.0]);
        assert!(matches!(pseudo_targets(Variant::Dr, &s, None), Err(Error::Config(_))));
        assert!(pseudo_targets(Variant::OneStep, &split(&[0.0, 0.0]), None).is_err());
    }
}
