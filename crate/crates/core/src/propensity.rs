//! Propensity-score models: logistic regression, a shallow random forest and
//! closed-form oracles. Every prediction is clipped into `[lo, hi]`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{train, Layer, Mlp, TrainConfig};
use crate::scalar::Scalar;

/// Clipping interval for predicted probabilities, `0 < lo < hi <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ClipBounds {
    fn default() -> Self {
        Self { lo: 0.01, hi: 0.99 }
    }
}

impl ClipBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let c = Self { lo, hi };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        // hi = 1 is allowed so that an oracle can report π ≡ 1 exactly.
        if !(self.lo > 0.0 && self.lo < self.hi && self.hi <= 1.0) {
            return Err(Error::invalid(format!("clip bounds must satisfy 0 < lo < hi <= 1, got ({}, {})", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn apply<T: Scalar>(&self, p: T) -> T {
        p.max(T::lit(self.lo)).min(T::lit(self.hi))
    }
}

/// Closed-form propensity functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleRule {
    /// `0.1 + 0.8·I(x₁ ∈ [0, 2] and x₆ ≥ 1.5)` (1-based feature indices).
    BoxIndicator,
    Constant(f64),
}

impl OracleRule {
    fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            OracleRule::BoxIndicator => {
                let inside = x[0] >= 0.0 && x[0] <= 2.0 && x[5] >= 1.5;
                0.1 + if inside { 0.8 } else { 0.0 }
            }
            OracleRule::Constant(p) => p,
        }
    }

    fn min_dim(&self) -> usize {
        match self {
            OracleRule::BoxIndicator => 6,
            OracleRule::Constant(_) => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum TreeNode<T> {
    /// Rows with `x[feature] < threshold` go left, the rest (ties included) right.
    Split { feature: usize, threshold: T, left: usize, right: usize },
    Leaf { prob: T },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tree<T> {
    pub nodes: Vec<TreeNode<T>>,
}

impl<T: Scalar> Tree<T> {
    pub fn predict(&self, x: &[T]) -> T {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { prob } => return *prob,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk<T>(nodes: &[TreeNode<T>], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", rename_all = "snake_case")]
pub enum PropensityRule<T> {
    Logistic { coefficients: Vec<T>, intercept: T },
    Forest { trees: Vec<Tree<T>> },
    Oracle(OracleRule),
}

/// Fitted propensity model `x ↦ P(A = 1 | X = x)`, clipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PropensityModel<T> {
    pub rule: PropensityRule<T>,
    pub clip: ClipBounds,
    /// Covariate dimension, `None` when any dimension is accepted.
    pub dim: Option<usize>,
}

/// Candidate features examined at each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubset {
    All,
    Sqrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub features: FeatureSubset,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: 4, features: FeatureSubset::All, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self { epochs: 2000, lr: 0.1 }
    }
}

impl<T: Scalar> PropensityModel<T> {
    pub fn oracle(rule: OracleRule, clip: ClipBounds) -> Result<Self> {
        clip.validate()?;
        Ok(Self { rule: PropensityRule::Oracle(rule), clip, dim: None })
    }

    pub fn predict(&self, x: &[T]) -> Result<T> {
        if let Some(d) = self.dim {
            if x.len() != d {
                return Err(Error::invalid(format!("propensity model expects {d} covariates, got {}", x.len())));
            }
        }
        let raw = match &self.rule {
            PropensityRule::Logistic { coefficients, intercept } => {
                let z = *intercept + coefficients.iter().zip(x).map(|(&c, &v)| c * v).sum::<T>();
                sigmoid(z)
            }
            PropensityRule::Forest { trees } => {
                let total: T = trees.iter().map(|t| t.predict(x)).sum();
                total / T::from_usize_lossy(trees.len())
            }
            PropensityRule::Oracle(rule) => {
                if x.len() < rule.min_dim() {
                    return Err(Error::invalid(format!("oracle rule needs {} covariates", rule.min_dim())));
                }
                let xf: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
                T::lit(rule.eval(&xf))
            }
        };
        Ok(self.clip.apply(raw))
    }

    pub fn predict_batch(&self, x: &Matrix<T>) -> Result<Vec<T>> {
        (0..x.rows()).map(|i| self.predict(x.row(i))).collect()
    }
}

/// `predict_propensity` in free-function form.
pub fn predict_propensity<T: Scalar>(model: &PropensityModel<T>, x: &[T]) -> Result<T> {
    model.predict(x)
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn check_binary<T: Scalar>(x: &Matrix<T>, a: &[T]) -> Result<usize> {
    if x.rows() != a.len() {
        return Err(Error::invalid(format!("{} covariate rows but {} treatments", x.rows(), a.len())));
    }
    if a.iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid("treatment must be binary (0/1)"));
    }
    Ok(a.iter().filter(|&&v| v == T::one()).count())
}

/// Mean log-loss of a logistic model and its gradient
/// `(∂/∂coefficients, ∂/∂intercept)`.
pub fn logistic_loss_and_grad<T: Scalar>(coefficients: &[T], intercept: T, x: &Matrix<T>, a: &[T]) -> (T, Vec<T>, T) {
    let n = T::from_usize_lossy(x.rows());
    let mut loss = T::zero();
    let mut g = vec![T::zero(); coefficients.len()];
    let mut gb = T::zero();
    for i in 0..x.rows() {
        let row = x.row(i);
        let z = intercept + coefficients.iter().zip(row).map(|(&c, &v)| c * v).sum::<T>();
        loss += softplus(z) - a[i] * z;
        let r = (sigmoid(z) - a[i]) / n;
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj += r * v;
        }
        gb += r;
    }
    (loss / n, g, gb)
}

/// Full-batch gradient descent on the mean log-loss, no penalty.
pub fn fit_logistic<T: Scalar>(x: &Matrix<T>, a: &[T], params: &LogisticParams, clip: ClipBounds) -> Result<PropensityModel<T>> {
    clip.validate()?;
    let treated = check_binary(x, a)?;
    if x.rows() < 2 {
        return Err(Error::degenerate("logistic regression needs at least two rows"));
    }
    if treated == 0 || treated == x.rows() {
        return Err(Error::degenerate("logistic regression needs both treatment classes"));
    }
    let d = x.cols();
    let mut net = Mlp::from_layers(vec![Layer { weight: Matrix::zeros(1, d), bias: vec![T::zero()] }])?;
    let cfg = TrainConfig { epochs: params.epochs, lr: params.lr, momentum: 0.0, batch_size: None, seed: 0 };
    let mut loss = |z: &Matrix<T>, rows: &[usize]| -> Result<(T, Matrix<T>)> {
        let n = T::from_usize_lossy(rows.len());
        let mut total = T::zero();
        let mut g = Matrix::zeros(rows.len(), 1);
        for (k, &r) in rows.iter().enumerate() {
            let zk = z[(k, 0)];
            total += softplus(zk) - a[r] * zk;
            g[(k, 0)] = (sigmoid(zk) - a[r]) / n;
        }
        Ok((total / n, g))
    };
    train(&mut net, x, &cfg, "logistic propensity", &mut loss)?;
    let layer = &net.layers()[0];
    Ok(PropensityModel {
        rule: PropensityRule::Logistic { coefficients: layer.weight.row(0).to_vec(), intercept: layer.bias[0] },
        clip,
        dim: Some(d),
    })
}

/// Bagged Gini trees. Tree `t` draws its bootstrap sample and feature subsets
/// from a stream keyed by `(seed, t)`.
pub fn fit_forest<T: Scalar>(x: &Matrix<T>, a: &[T], params: &ForestParams, clip: ClipBounds) -> Result<PropensityModel<T>> {
    clip.validate()?;
    let treated = check_binary(x, a)?;
    let n = x.rows();
    if n < 10 {
        return Err(Error::invalid(format!("random forest needs at least 10 rows, got {n}")));
    }
    if params.n_trees == 0 {
        return Err(Error::invalid("random forest needs at least one tree"));
    }
    let d = x.cols();
    if treated == 0 || treated == n {
        let rate = treated as f64 / n as f64;
        return Ok(PropensityModel { rule: PropensityRule::Oracle(OracleRule::Constant(rate)), clip, dim: Some(d) });
    }
    let n_candidates = match params.features {
        FeatureSubset::All => d,
        FeatureSubset::Sqrt => ((d as f64).sqrt().floor() as usize).max(1),
    };
    let labels: Vec<bool> = a.iter().map(|&v| v == T::one()).collect();
    let trees = (0..params.n_trees)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut builder = TreeBuilder { x, labels: &labels, max_depth: params.max_depth, n_candidates, rng, nodes: Vec::new() };
            builder.grow(rows, 0);
            Tree { nodes: builder.nodes }
        })
        .collect();
    Ok(PropensityModel { rule: PropensityRule::Forest { trees }, clip, dim: Some(d) })
}

struct TreeBuilder<'a, T> {
    x: &'a Matrix<T>,
    labels: &'a [bool],
    max_depth: usize,
    n_candidates: usize,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode<T>>,
}

fn gini(pos: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = pos as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

impl<T: Scalar> TreeBuilder<'_, T> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let pos = rows.iter().filter(|&&r| self.labels[r]).count();
        let id = self.nodes.len();
        let prob = T::lit(pos as f64 / rows.len() as f64);
        self.nodes.push(TreeNode::Leaf { prob });
        if depth >= self.max_depth || pos == 0 || pos == rows.len() || rows.len() < 2 {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&rows, pos) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| self.x[(r, feature)] < threshold);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[id] = TreeNode::Split { feature, threshold, left, right };
        id
    }

    fn best_split(&mut self, rows: &[usize], pos: usize) -> Option<(usize, T)> {
        let d = self.x.cols();
        let mut features = sample(&mut self.rng, d, self.n_candidates).into_vec();
        features.sort_unstable();
        let total = rows.len();
        let parent = gini(pos, total);
        let mut best: Option<(f64, usize, T)> = None;
        let mut sorted: Vec<(T, bool)> = Vec::with_capacity(total);
        for f in features {
            sorted.clear();
            sorted.extend(rows.iter().map(|&r| (self.x[(r, f)], self.labels[r])));
            sorted.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap_or(std::cmp::Ordering::Equal));
            let mut left_pos = 0;
            for k in 0..total - 1 {
                if sorted[k].1 {
                    left_pos += 1;
                }
                let (lo, hi) = (sorted[k].0, sorted[k + 1].0);
                if !(lo < hi) {
                    continue;
                }
                let nl = k + 1;
                let nr = total - nl;
                let score = (nl as f64 * gini(left_pos, nl) + nr as f64 * gini(pos - left_pos, nr)) / total as f64;
                if best.as_ref().map_or(true, |b| score < b.0) {
                    let mut t = (lo + hi) / T::lit(2.0);
                    if !(t > lo) {
                        t = hi;
                    }
                    best = Some((score, f, t));
                }
            }
        }
        match best {
            Some((score, f, t)) if score < parent - 1e-12 => Some((f, t)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn dgp(n: usize, seed: u64) -> (Matrix<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(1.0, 1.0).unwrap();
        let x = Matrix::from_fn(n, 10, |_, _| normal.sample(&mut rng));
        let truth: Vec<f64> = (0..n).map(|i| OracleRule::BoxIndicator.eval(x.row(i))).collect();
        let a = truth.iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
        (x, a, truth)
    }

    #[test]
    fn oracle_values() {
        let m = PropensityModel::<f64>::oracle(OracleRule::BoxIndicator, ClipBounds::default()).unwrap();
        let mut x = vec![1.0; 10];
        x[5] = 2.0;
        assert!((m.predict(&x).unwrap() - 0.9).abs() < 1e-15);
        x[5] = 0.0;
        assert!((m.predict(&x).unwrap() - 0.1).abs() < 1e-15);
        assert!(m.predict(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn clip_validation() {
        assert!(ClipBounds::new(0.0, 0.5).is_err());
        assert!(ClipBounds::new(0.6, 0.5).is_err());
        assert!(ClipBounds::new(0.01, 1.0).is_ok());
    }

    #[test]
    fn logistic_balanced_labels_predict_half() {
        let x = Matrix::from_fn(200, 2, |i, j| ((i * 13 + j * 7) % 17) as f64 / 17.0);
        // labels alternate within every x value pattern, so they carry no signal
        let a: Vec<f64> = (0..200).map(|i| (i % 2) as f64).collect();
        let xx = Matrix::from_fn(400, 2, |i, j| x[(i / 2, j)]);
        let aa: Vec<f64> = (0..400).map(|i| a[i / 2].max(0.0) * 0.0 + (i % 2) as f64).collect();
        let m = fit_logistic(&xx, &aa, &LogisticParams::default(), ClipBounds::default()).unwrap();
        for i in 0..20 {
            assert!((m.predict(xx.row(i)).unwrap() - 0.5).abs() < 0.02);
        }
        if let PropensityRule::Logistic { intercept, .. } = m.rule {
            assert!(intercept.abs() < 0.1);
        }
    }

    #[test]
    fn logistic_intercept_only_matches_base_rate() {
        let x = Matrix::zeros(50, 3);
        let a: Vec<f64> = (0..50).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let m = fit_logistic(&x, &a, &LogisticParams::default(), ClipBounds::default()).unwrap();
        assert!((m.predict(&[0.0, 0.0, 0.0]).unwrap() - 0.2).abs() < 0.02);
    }

    #[test]
    fn logistic_separable_hits_upper_clip() {
        let x = Matrix::from_fn(40, 1, |i, _| i as f64 - 19.5);
        let a: Vec<f64> = (0..40).map(|i| if i >= 20 { 1.0 } else { 0.0 }).collect();
        let m = fit_logistic(&x, &a, &LogisticParams::default(), ClipBounds::default()).unwrap();
        assert_eq!(m.predict(&[50.0]).unwrap(), 0.99);
        assert_eq!(m.predict(&[-50.0]).unwrap(), 0.01);
    }

    #[test]
    fn logistic_rejects_single_class() {
        let x = Matrix::zeros(5, 1);
        assert!(matches!(
            fit_logistic(&x, &[1.0; 5], &LogisticParams::default(), ClipBounds::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let (x, a, _) = dgp(60, 2);
        let coef: Vec<f64> = (0..10).map(|j| 0.1 * j as f64 - 0.4).collect();
        let b = 0.3;
        let (_, g, gb) = logistic_loss_and_grad(&coef, b, &x, &a);
        let h = 1e-5;
        for j in 0..10 {
            let mut up = coef.clone();
            up[j] += h;
            let mut dn = coef.clone();
            dn[j] -= h;
            let fd = (logistic_loss_and_grad(&up, b, &x, &a).0 - logistic_loss_and_grad(&dn, b, &x, &a).0) / (2.0 * h);
            assert!((fd - g[j]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
        let fd = (logistic_loss_and_grad(&coef, b + h, &x, &a).0 - logistic_loss_and_grad(&coef, b - h, &x, &a).0) / (2.0 * h);
        assert!((fd - gb).abs() / fd.abs().max(1e-8) < 1e-4);
    }

    #[test]
    fn forest_pure_leaves_clip() {
        let x = Matrix::from_fn(30, 2, |i, j| if j == 0 { i as f64 } else { 0.0 });
        let a: Vec<f64> = (0..30).map(|i| if i >= 15 { 1.0 } else { 0.0 }).collect();
        let params = ForestParams { n_trees: 10, max_depth: 1, ..Default::default() };
        let m = fit_forest(&x, &a, &params, ClipBounds::default()).unwrap();
        for i in 0..30 {
            let p = m.predict(x.row(i)).unwrap();
            assert!(p == 0.01 || p == 0.99 || (0.01..=0.99).contains(&p));
        }
        assert_eq!(m.predict(&[0.0, 0.0]).unwrap(), 0.01);
        assert_eq!(m.predict(&[29.0, 0.0]).unwrap(), 0.99);
    }

    #[test]
    fn forest_ties_go_right() {
        let x = Matrix::from_fn(20, 1, |i, _| if i < 10 { 0.0 } else { 1.0 });
        let a: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        let params = ForestParams { n_trees: 1, max_depth: 1, ..Default::default() };
        let m = fit_forest(&x, &a, &params, ClipBounds::new(0.001, 0.999).unwrap()).unwrap();
        let PropensityRule::Forest { trees } = &m.rule else { panic!() };
        let TreeNode::Split { threshold, .. } = trees[0].nodes[0] else { panic!() };
        assert_eq!(threshold, 0.5);
        assert_eq!(trees[0].predict(&[threshold]), 1.0);
    }

    #[test]
    fn forest_is_deterministic_and_bounded() {
        let (x, a, _) = dgp(300, 5);
        let p = ForestParams { n_trees: 20, seed: 17, ..Default::default() };
        let m1 = fit_forest(&x, &a, &p, ClipBounds::default()).unwrap();
        let m2 = fit_forest(&x, &a, &p, ClipBounds::default()).unwrap();
        assert_eq!(m1, m2);
        let PropensityRule::Forest { trees } = &m1.rule else { panic!() };
        assert!(trees.iter().all(|t| t.depth() <= 4));
        for i in 0..x.rows() {
            let v = m1.predict(x.row(i)).unwrap();
            assert!((0.01..=0.99).contains(&v));
        }
    }

    #[test]
    fn forest_single_class_is_constant() {
        let x = Matrix::from_fn(12, 2, |i, j| (i + j) as f64);
        let m = fit_forest(&x, &[1.0; 12], &ForestParams::default(), ClipBounds::default()).unwrap();
        assert_eq!(m.predict(&[3.0, 1.0]).unwrap(), 0.99);
        assert!(fit_forest(&Matrix::zeros(5, 2), &[0.0; 5], &ForestParams::default(), ClipBounds::default()).is_err());
    }

    #[test]
    fn forest_recovers_box_propensity() {
        let (x, a, truth) = dgp(20_000, 11);
        let m = fit_forest(&x, &a, &ForestParams::default(), ClipBounds::default()).unwrap();
        let (xt, _, tt) = dgp(4_000, 12);
        let mae_test: f64 = (0..xt.rows()).map(|i| (m.predict(xt.row(i)).unwrap() - tt[i]).abs()).sum::<f64>() / xt.rows() as f64;
        let mae_train: f64 = (0..2000).map(|i| (m.predict(x.row(i)).unwrap() - truth[i]).abs()).sum::<f64>() / 2000.0;
        assert!(mae_test < 0.05, "test MAE {mae_test}");
        assert!(mae_train < 0.05, "train MAE {mae_train}");
    }

    #[test]
    fn widening_clip_keeps_interior_predictions() {
        let (x, a, _) = dgp(200, 3);
        let narrow = fit_logistic(&x, &a, &LogisticParams { epochs: 200, lr: 0.1 }, ClipBounds::new(0.2, 0.8).unwrap()).unwrap();
        let mut wide = narrow.clone();
        wide.clip = ClipBounds::new(0.01, 0.99).unwrap();
        for i in 0..x.rows() {
            let p = narrow.predict(x.row(i)).unwrap();
            if p > 0.2 && p < 0.8 {
                assert_eq!(p, wide.predict(x.row(i)).unwrap());
            }
        }
    }
}
