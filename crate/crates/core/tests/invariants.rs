use ccme::density::{density_mass, eval_density, trapezoid, uniform_grid, DensityQuery};
use ccme::estimators::{fit, CcmeModel, Hyperparams, Method, Variant};
use ccme::io::save_model;
use ccme::linalg::Matrix;
use ccme::propensity::{fit_forest, ClipBounds, FeatureSubset, ForestParams};
use ccme::synth::{generate, DgpConfig, GroundTruth, Scenario};
use proptest::prelude::*;

fn small_fit(seed: u64, method: Method, variant: Variant) -> CcmeModel<f64> {
    let (data, _) = generate(&DgpConfig::new(80, seed, Scenario::BothCorrect)).unwrap();
    let mut hp = Hyperparams { method, variant, features: 5, hidden: vec![6], ..Default::default() };
    hp.forest.n_trees = 4;
    hp.df.stage1.epochs = 20;
    hp.df.stage2.epochs = 20;
    hp.nk.stage1.epochs = 20;
    hp.nk.stage2.epochs = 20;
    fit(&data, &hp, seed).unwrap()
}

fn v_point() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.5f64..2.5, 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipping_is_a_monotone_projection(p in -0.5f64..1.5, lo in 0.001f64..0.4, hi in 0.6f64..1.0, widen in 0.0f64..0.2) {
        let narrow = ClipBounds::new(lo, hi).unwrap();
        let wide = ClipBounds::new((lo - widen).max(0.001), (hi + widen).min(1.0)).unwrap();
        let q = narrow.apply(p);
        prop_assert!((lo..=hi).contains(&q));
        if p > lo && p < hi {
            prop_assert_eq!(q, p);
            prop_assert_eq!(wide.apply(p), p);
        }
    }

    #[test]
    fn ground_truth_integrates_to_one(v in v_point()) {
        let truth = GroundTruth::default();
        let s = truth.variance(&v).sqrt();
        let lo = truth.mean0(&v) - 10.0 * s;
        let hi = truth.mean1(&v) + 10.0 * s;
        let ys: Vec<f64> = (0..=20000).map(|k| lo + (hi - lo) * k as f64 / 20000.0).collect();
        let fs: Vec<f64> = ys.iter().map(|&y| truth.density(&v, y)).collect();
        prop_assert!((trapezoid(&ys, &fs) - 1.0).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_is_deterministic_and_observes_y1(seed in any::<u64>(), n in 1usize..200) {
        let cfg = DgpConfig::new(n, seed, Scenario::BothCorrect);
        let (a, la) = generate(&cfg).unwrap();
        let (b, _) = generate(&cfg).unwrap();
        prop_assert_eq!(&a, &b);
        for i in 0..n {
            if a.a[i] == 1.0 {
                prop_assert_eq!(a.y[(i, 0)], la.y1[i]);
            } else {
                prop_assert_eq!(a.y[(i, 0)], la.y0[i]);
            }
        }
    }

    #[test]
    fn forest_predictions_respect_clip(seed in any::<u64>(), lo in 0.01f64..0.3, hi in 0.7f64..0.99) {
        let (data, _) = generate(&DgpConfig::new(120, seed, Scenario::BothCorrect)).unwrap();
        let params = ForestParams { n_trees: 5, max_depth: 6, features: FeatureSubset::Sqrt, seed };
        let model = fit_forest(&data.x, &data.a, &params, ClipBounds::new(lo, hi).unwrap()).unwrap();
        for p in model.predict_batch(&data.x).unwrap() {
            prop_assert!((lo..=hi).contains(&p));
        }
    }

    #[test]
    fn curves_are_linear_in_the_weights(seed in 0u64..1000, v in v_point(), c in -3.0f64..3.0) {
        for method in [Method::Rr, Method::Df] {
            let model = small_fit(seed, method, Variant::Dr);
            let grid = uniform_grid(-10.0, 40.0, 25).unwrap();
            let eval = model.evaluator(&grid).unwrap();
            let w = model.weights(&Matrix::row_vector(v.clone())).unwrap();
            let base = eval.apply(&w).unwrap();
            prop_assert_eq!(eval.apply(&w.scaled(2.0)).unwrap(), base.scaled(2.0));
            let scaled = eval.apply(&w.scaled(c)).unwrap();
            for (s, b) in scaled.as_slice().iter().zip(base.as_slice()) {
                prop_assert!((s - c * b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn repeated_queries_are_bitwise_identical(seed in 0u64..1000, v in v_point()) {
        for method in [Method::Rr, Method::Df, Method::Nk] {
            let model = small_fit(seed, method, Variant::Dr);
            let q = DensityQuery { v: v.clone(), grid: uniform_grid(-10.0, 40.0, 50).unwrap() };
            let a = eval_density(&model, &q).unwrap();
            let b = eval_density(&model, &q).unwrap();
            prop_assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn analytic_mass_matches_quadrature(seed in 0u64..1000, v in v_point()) {
        for (method, variant) in [(Method::Rr, Variant::Dr), (Method::Rr, Variant::Pi), (Method::Df, Variant::Ipw), (Method::Nk, Variant::Dr)] {
            let model = small_fit(seed, method, variant);
            let lo = model.y.as_slice().iter().copied().fold(f64::INFINITY, f64::min) - 40.0;
            let hi = model.y.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max) + 40.0;
            let curve = eval_density(&model, &DensityQuery { v: v.clone(), grid: uniform_grid(lo, hi, 8001).unwrap() }).unwrap();
            let quad = trapezoid(curve.grid.as_slice(), &curve.values);
            let mass = density_mass(&model, &v).unwrap();
            prop_assert!((quad - mass).abs() < 1e-4, "{method} {variant}: {quad} vs {mass}");
        }
    }

    #[test]
    fn fits_are_reproducible(seed in 0u64..1000) {
        for method in [Method::Rr, Method::Df, Method::Nk] {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            save_model(&mut a, &small_fit(seed, method, Variant::Dr)).unwrap();
            save_model(&mut b, &small_fit(seed, method, Variant::Dr)).unwrap();
            prop_assert!(a == b);
        }
    }
}
