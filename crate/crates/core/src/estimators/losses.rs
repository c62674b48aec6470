//! Training objectives of the deep-feature and neural-kernel estimators,
//! with their gradients with respect to the network outputs.

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::Scalar;

/// `Tr(G) − Tr(S⁻¹ΨᵀGΨ)` with `S = ΨᵀΨ + ridge·I`, i.e. `Tr(G(I − ΨS⁻¹Ψᵀ))`,
/// and its gradient `−2(I − ΨS⁻¹Ψᵀ)GΨS⁻¹`. `G` must be symmetric.
pub fn trace_loss<T: Scalar>(g: &Matrix<T>, psi: &Matrix<T>, ridge: T) -> Result<(T, Matrix<T>)> {
    let n = psi.rows();
    if g.shape() != (n, n) {
        return Err(Error::invalid(format!("Gram matrix is {:?}, features have {n} rows", g.shape())));
    }
    let m = psi.cols();
    let chol = Cholesky::factor(&psi.tr_matmul(psi), ridge)?;
    let s_inv = chol.solve(&Matrix::identity(m));
    let a = g.matmul(psi);
    let b = psi.tr_matmul(&a);
    let mut proj = T::zero();
    for i in 0..m {
        for j in 0..m {
            proj += s_inv[(i, j)] * b[(j, i)];
        }
    }
    let value = g.trace() - proj;
    let resid = a.sub(&psi.matmul(&s_inv.matmul(&b)));
    let grad = resid.matmul(&s_inv).scaled(T::lit(-2.0));
    Ok((value, grad))
}

/// Mean quadratic `(1/n)Σᵢ [fᵢᵀK fᵢ − 2fᵢᵀbᵢ]` over the rows of `f` and
/// `targets`, and its gradient `(2 f K − 2 B)/n`. `K` must be symmetric.
pub fn nk_loss<T: Scalar>(k: &Matrix<T>, f: &Matrix<T>, targets: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    let m = k.rows();
    if k.cols() != m || f.cols() != m || targets.shape() != f.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: K {:?}, f {:?}, b {:?}",
            k.shape(),
            f.shape(),
            targets.shape()
        )));
    }
    let n = T::from_usize_lossy(f.rows().max(1));
    let fk = f.matmul(k);
    let mut value = T::zero();
    for ((&a, &fi), &bi) in fk.as_slice().iter().zip(f.as_slice()).zip(targets.as_slice()) {
        value += fi * (a - T::lit(2.0) * bi);
    }
    let two_over_n = T::lit(2.0) / n;
    let grad = fk.sub(targets).scaled(two_over_n);
    Ok((value / n, grad))
}

/// Per-sample minimizer `fᵢ* = K⁻¹bᵢ` of [`nk_loss`], one row per sample.
pub fn nk_pointwise_minimizer<T: Scalar>(k: &Matrix<T>, targets: &Matrix<T>, ridge: T) -> Result<Matrix<T>> {
    let chol = Cholesky::factor(k, ridge)?;
    Ok(chol.solve(&targets.transpose()).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn psd(n: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let pts = random(n, 1, rng).scaled(3.0);
        KernelSpec::gaussian(1.0).unwrap().gram_symmetric(&pts).unwrap()
    }

    #[test]
    fn zero_features_give_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = psd(5, &mut rng);
        let (v, grad) = trace_loss(&g, &Matrix::zeros(5, 3), 0.7).unwrap();
        assert!((v - g.trace()).abs() < 1e-12);
        assert_eq!(grad.max_abs(), 0.0);
    }

    #[test]
    fn huge_ridge_kills_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = psd(6, &mut rng);
        let psi = random(6, 2, &mut rng);
        let (v, _) = trace_loss(&g, &psi, 1e12).unwrap();
        assert!((v - g.trace()).abs() < 1e-9);
    }

    #[test]
    fn trace_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = psd(6, &mut rng);
        let psi = random(6, 3, &mut rng);
        let (_, grad) = trace_loss(&g, &psi, 0.3).unwrap();
        let h = 1e-5;
        for i in 0..6 {
            for j in 0..3 {
                let mut up = psi.clone();
                up[(i, j)] += h;
                let mut dn = psi.clone();
                dn[(i, j)] -= h;
                let fd = (trace_loss(&g, &up, 0.3).unwrap().0 - trace_loss(&g, &dn, 0.3).unwrap().0) / (2.0 * h);
                let rel = (fd - grad[(i, j)]).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-4, "({i},{j}) fd {fd} analytic {}", grad[(i, j)]);
            }
        }
    }

    #[test]
    fn new_direction_never_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let g = psd(5, &mut rng);
            let psi = random(5, 1, &mut rng);
            let extra = random(5, 1, &mut rng);
            let wide = Matrix::from_fn(5, 2, |i, j| if j == 0 { psi[(i, 0)] } else { extra[(i, 0)] });
            let narrow = trace_loss(&g, &psi, 1e-10).unwrap().0;
            let wider = trace_loss(&g, &wide, 1e-10).unwrap().0;
            assert!(wider <= narrow + 1e-9);
        }
    }

    #[test]
    fn nk_zero_and_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = psd(4, &mut rng).add_diag(0.1);
        let b = random(7, 4, &mut rng);
        let (v, _) = nk_loss(&k, &Matrix::zeros(7, 4), &b).unwrap();
        assert_eq!(v, 0.0);
        let f_star = nk_pointwise_minimizer(&k, &b, 0.0).unwrap();
        let (_, grad) = nk_loss(&k, &f_star, &b).unwrap();
        assert!(grad.max_abs() < 1e-10);
        let (best, _) = nk_loss(&k, &f_star, &b).unwrap();
        let perturbed = f_star.add(&random(7, 4, &mut rng).scaled(1e-2));
        assert!(nk_loss(&k, &perturbed, &b).unwrap().0 > best);
    }

    #[test]
    fn nk_single_grid_point() {
        let grid = Matrix::column(vec![0.5f64]);
        let ys = Matrix::column(vec![0.0, 1.0, 3.0]);
        let ky = KernelSpec::gaussian(2.0).unwrap();
        let km = ky.gram_symmetric(&grid).unwrap();
        let b = ky.gram(&ys, &grid).unwrap();
        let f = nk_pointwise_minimizer(&km, &b, 0.0).unwrap();
        for i in 0..3 {
            assert!((f[(i, 0)] - ky.eval(&[0.5], ys.row(i)).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn nk_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = psd(3, &mut rng);
        let b = random(4, 3, &mut rng);
        let f = random(4, 3, &mut rng);
        let (_, grad) = nk_loss(&k, &f, &b).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..3 {
                let mut up = f.clone();
                up[(i, j)] += h;
                let mut dn = f.clone();
                dn[(i, j)] -= h;
                let fd = (nk_loss(&k, &up, &b).unwrap().0 - nk_loss(&k, &dn, &b).unwrap().0) / (2.0 * h);
                assert!((fd - grad[(i, j)]).abs() / fd.abs().max(1e-6) < 1e-4);
            }
        }
    }
}
