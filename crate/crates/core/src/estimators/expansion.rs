//! Gram-entry algebra of the pseudo-outcomes
//! `ξ̂_i = a_i φ(Y_i) + c_i Σⱼ C_{ji} φ(zⱼ)`.

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::pseudo::PseudoOutcomes;

/// Stage-1 anchors `z` and the coefficients `C` (anchors × stage-2 rows)
/// of `μ̂₀` at the stage-2 covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion<T> {
    pub anchors: Matrix<T>,
    pub coeffs: Matrix<T>,
}

fn check<T: Scalar>(y1: &Matrix<T>, pseudo: &PseudoOutcomes<T>, expansion: Option<&Expansion<T>>) -> Result<()> {
    let n = y1.rows();
    if pseudo.direct.len() != n || pseudo.plugin.len() != n {
        return Err(Error::invalid(format!("{n} outcomes but {} pseudo-outcome coefficients", pseudo.direct.len())));
    }
    match expansion {
        Some(e) if e.coeffs.shape() != (e.anchors.rows(), n) => Err(Error::invalid(format!(
            "coefficients are {:?}, expected {}x{n}",
            e.coeffs.shape(),
            e.anchors.rows()
        ))),
        None if pseudo.uses_plugin() => Err(Error::Config("plug-in terms need a stage-1 embedding".into())),
        _ => Ok(()),
    }
}

/// `K_ξ` with entries `⟨ξ̂_i, ξ̂_j⟩`:
/// `D_a K_{Y₁} D_a + D_a K_{ZY₁}ᵀ C D_c + D_c Cᵀ K_{ZY₁} D_a + D_c Cᵀ K_Z C D_c`.
pub fn build_k_xi<T: Scalar>(
    kernel_y: &KernelSpec<T>,
    y1: &Matrix<T>,
    pseudo: &PseudoOutcomes<T>,
    expansion: Option<&Expansion<T>>,
) -> Result<Matrix<T>> {
    check(y1, pseudo, expansion)?;
    let (a, c) = (&pseudo.direct, &pseudo.plugin);
    let n = y1.rows();
    let mut k = Matrix::zeros(n, n);
    if pseudo.uses_direct() {
        k = kernel_y.gram_symmetric(y1)?.scale_rows(a).scale_cols(a);
    }
    if let (true, Some(e)) = (pseudo.uses_plugin(), expansion) {
        let kz = kernel_y.gram_symmetric(&e.anchors)?;
        let plug = e.coeffs.tr_matmul(&kz.matmul(&e.coeffs)).scale_rows(c).scale_cols(c);
        k.add_assign(&plug);
        if pseudo.uses_direct() {
            let kzy = kernel_y.gram(&e.anchors, y1)?;
            let cross = kzy.tr_matmul(&e.coeffs).scale_rows(a).scale_cols(c);
            k.add_assign(&cross);
            k.add_assign(&cross.transpose());
        }
        // the four blocks are summed in floating point; restore exact symmetry
        for i in 0..n {
            for j in 0..i {
                let v = (k[(i, j)] + k[(j, i)]) / T::lit(2.0);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
    }
    Ok(k)
}

/// Inner products `⟨ξ̂_i, φ(y_g)⟩` for every stage-2 row `i` and query `y_g`
/// (rows × queries): `D_a K_{Y₁,y} + D_c Cᵀ K_{Z,y}`.
pub fn bracket<T: Scalar>(
    kernel_y: &KernelSpec<T>,
    y1: &Matrix<T>,
    pseudo: &PseudoOutcomes<T>,
    expansion: Option<&Expansion<T>>,
    ys: &Matrix<T>,
) -> Result<Matrix<T>> {
    check(y1, pseudo, expansion)?;
    let mut b = if pseudo.uses_direct() {
        kernel_y.gram(y1, ys)?.scale_rows(&pseudo.direct)
    } else {
        if ys.cols() != y1.cols() {
            return Err(Error::invalid(format!("queries have dimension {}, outcomes {}", ys.cols(), y1.cols())));
        }
        Matrix::zeros(y1.rows(), ys.rows())
    };
    if let (true, Some(e)) = (pseudo.uses_plugin(), expansion) {
        let plug = e.coeffs.tr_matmul(&kernel_y.gram(&e.anchors, ys)?).scale_rows(&pseudo.plugin);
        b.add_assign(&plug);
    }
    Ok(b)
}

/// `∫⟨ξ̂_i, φ(y)⟩ dy` for a normalized kernel: `a_i + c_i Σⱼ C_{ji}`.
pub fn row_mass<T: Scalar>(pseudo: &PseudoOutcomes<T>, expansion: Option<&Expansion<T>>) -> Vec<T> {
    let col_sums: Option<Vec<T>> = expansion.map(|e| {
        let ones = vec![T::one(); e.coeffs.rows()];
        e.coeffs.tr_matvec(&ones)
    });
    (0..pseudo.len())
        .map(|i| {
            let plug = match (&col_sums, pseudo.plugin[i] != T::zero()) {
                (Some(s), true) => pseudo.plugin[i] * s[i],
                _ => T::zero(),
            };
            pseudo.direct[i] + plug
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(n: usize, p: usize, seed: u64) -> (KernelSpec<f64>, Matrix<f64>, PseudoOutcomes<f64>, Expansion<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y1 = Matrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let anchors = Matrix::from_fn(p, 1, |_, _| rng.random_range(-3.0..3.0));
        let coeffs = Matrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        let w: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { rng.random_range(1.0..5.0) } else { 0.0 }).collect();
        let pseudo = PseudoOutcomes { rows: (0..n).collect(), plugin: w.iter().map(|v| 1.0 - v).collect(), direct: w };
        (KernelSpec::normalized_gaussian(1.5).unwrap(), y1, pseudo, Expansion { anchors, coeffs })
    }

    /// `⟨ξ̂_i, ξ̂_j⟩` by expanding both over the combined point list.
    fn brute(k: &KernelSpec<f64>, y1: &Matrix<f64>, p: &PseudoOutcomes<f64>, e: &Expansion<f64>) -> Matrix<f64> {
        let n = y1.rows();
        let q = e.anchors.rows();
        let pts: Vec<f64> = y1.as_slice().iter().chain(e.anchors.as_slice()).copied().collect();
        let coef = |i: usize| -> Vec<f64> {
            let mut c = vec![0.0; n + q];
            c[i] = p.direct[i];
            for j in 0..q {
                c[n + j] = p.plugin[i] * e.coeffs[(j, i)];
            }
            c
        };
        Matrix::from_fn(n, n, |i, j| {
            let (ci, cj) = (coef(i), coef(j));
            let mut s = 0.0;
            for u in 0..n + q {
                for v in 0..n + q {
                    s += ci[u] * cj[v] * k.eval(&[pts[u]], &[pts[v]]).unwrap();
                }
            }
            s
        })
    }

    #[test]
    fn matches_brute_force_expansion() {
        for seed in 0..5 {
            let (k, y1, p, e) = instance(6, 4, seed);
            let got = build_k_xi(&k, &y1, &p, Some(&e)).unwrap();
            assert!(got.sub(&brute(&k, &y1, &p, &e)).max_abs() < 1e-12);
            let pi = PseudoOutcomes { rows: p.rows.clone(), direct: vec![0.0; 6], plugin: vec![1.0; 6] };
            let got = build_k_xi(&k, &y1, &pi, Some(&e)).unwrap();
            assert!(got.sub(&brute(&k, &y1, &pi, &e)).max_abs() < 1e-12);
        }
    }

    #[test]
    fn unit_weights_give_outcome_gram() {
        let (k, y1, _, e) = instance(5, 3, 9);
        let p = PseudoOutcomes { rows: (0..5).collect(), direct: vec![1.0; 5], plugin: vec![0.0; 5] };
        assert_eq!(build_k_xi(&k, &y1, &p, Some(&e)).unwrap(), k.gram_symmetric(&y1).unwrap());
    }

    #[test]
    fn ipw_is_weighted_outcome_gram() {
        let (k, y1, p, _) = instance(5, 3, 10);
        let ipw = PseudoOutcomes { rows: p.rows.clone(), direct: p.direct.clone(), plugin: vec![0.0; 5] };
        let expected = k.gram_symmetric(&y1).unwrap().scale_rows(&p.direct).scale_cols(&p.direct);
        assert_eq!(build_k_xi(&k, &y1, &ipw, None).unwrap(), expected);
    }

    #[test]
    fn plugin_without_expansion_is_rejected() {
        let (k, y1, p, _) = instance(4, 2, 11);
        assert!(build_k_xi(&k, &y1, &p, None).is_err());
    }

    #[test]
    fn symmetric_and_psd() {
        for seed in 20..30 {
            let (k, y1, p, e) = instance(12, 5, seed);
            let g = build_k_xi(&k, &y1, &p, Some(&e)).unwrap();
            assert_eq!(g, g.transpose());
            let ev = symmetric_eigenvalues(&g);
            assert!(ev[0] >= -1e-8 * ev.last().unwrap().abs().max(1e-300));
        }
    }

    #[test]
    fn bracket_matches_gram_entries() {
        let (k, y1, p, e) = instance(5, 3, 12);
        let ys = Matrix::column(vec![-1.0, 0.0, 2.5]);
        let b = bracket(&k, &y1, &p, Some(&e), &ys).unwrap();
        for i in 0..5 {
            for g in 0..3 {
                let mut want = p.direct[i] * k.eval(y1.row(i), ys.row(g)).unwrap();
                for j in 0..3 {
                    want += p.plugin[i] * e.coeffs[(j, i)] * k.eval(e.anchors.row(j), ys.row(g)).unwrap();
                }
                assert!((b[(i, g)] - want).abs() < 1e-13);
            }
        }
    }
}
