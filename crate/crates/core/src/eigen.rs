//! Dense symmetric and generalized symmetric-definite eigensolvers.

use nalgebra::{DMatrix, DVector};

/// Eigenpairs sorted by ascending eigenvalue; `vectors` holds them as columns.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

const MAX_SWEEPS: usize = 100;

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += 2.0 * a[(i, j)] * a[(i, j)];
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi on a symmetric matrix, rotations applied row by row in
/// `(p, q)` order, `p < q`.
///
/// Returns `None` if the sweep limit is hit before the off-diagonal mass drops
/// below `1e-15` of the Frobenius norm.
pub fn symmetric_jacobi(a: &DMatrix<f64>) -> Option<EigenPairs> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm();
    if scale == 0.0 {
        return Some(sorted(a.diagonal().iter().copied().collect(), v));
    }
    let tol = 1e-15 * scale;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > tol {
        return None;
    }
    Some(sorted(a.diagonal().iter().copied().collect(), v))
}

fn sorted(values: Vec<f64>, vectors: DMatrix<f64>) -> EigenPairs {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let values_sorted = order.iter().map(|&i| values[i]).collect();
    let mut vecs = DMatrix::zeros(vectors.nrows(), vectors.ncols());
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &vectors.column(src));
    }
    EigenPairs {
        values: values_sorted,
        vectors: vecs,
    }
}

/// Flips `v` so that its largest-magnitude entry (lowest index on ties) is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneralizedEigenError {
    /// `b` is not positive definite even after a relative diagonal shift.
    NotDefinite,
    NoConvergence,
}

/// Solves `a v = lambda b v` for symmetric `a` and SPD `b` by whitening with
/// the Cholesky factor of `b` and running cyclic Jacobi.
///
/// Eigenvectors are `b`-orthonormal and sign-normalized with [`fix_sign`].
pub fn generalized_symmetric(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<EigenPairs, GeneralizedEigenError> {
    let n = a.nrows();
    let chol = match b.clone().cholesky() {
        Some(c) => c,
        None => {
            let shift = 1e-12 * b.diagonal().amax();
            let shifted = b + DMatrix::<f64>::identity(n, n) * shift;
            shifted.cholesky().ok_or(GeneralizedEigenError::NotDefinite)?
        }
    };
    let l = chol.l();
    // c = l^{-1} a l^{-T}
    let linv_a = l
        .solve_lower_triangular(a)
        .ok_or(GeneralizedEigenError::NotDefinite)?;
    let c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or(GeneralizedEigenError::NotDefinite)?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = symmetric_jacobi(&c).ok_or(GeneralizedEigenError::NoConvergence)?;
    let lt = l.transpose();
    let mut vectors = lt
        .solve_upper_triangular(&eig.vectors)
        .ok_or(GeneralizedEigenError::NotDefinite)?;
    for j in 0..n {
        let mut col: DVector<f64> = vectors.column(j).into_owned();
        fix_sign(&mut col);
        vectors.set_column(j, &col);
    }
    Ok(EigenPairs {
        values: eig.values,
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_two_by_two() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = symmetric_jacobi(&a).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let n = 7;
        let a = DMatrix::from_fn(n, n, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let e = symmetric_jacobi(&a).unwrap();
        let d = DMatrix::from_diagonal(&DVector::from_vec(e.values.clone()));
        let rec = &e.vectors * d * e.vectors.transpose();
        assert!((rec - &a).amax() < 1e-13);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn generalized_matches_diagonal_pencil() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![6.0, 2.0, 3.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 3.0]));
        let e = generalized_symmetric(&a, &b).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 2.0).abs() < 1e-14);
        assert!((e.values[2] - 3.0).abs() < 1e-14);
        let btb = e.vectors.transpose() * &b * &e.vectors;
        assert!((btb - DMatrix::<f64>::identity(3, 3)).amax() < 1e-14);
        for j in 0..3 {
            assert!(e.vectors.column(j).max() > 0.0);
        }
    }

    #[test]
    fn sign_ties_go_to_lowest_index() {
        let mut v = DVector::from_vec(vec![-1.0, 1.0, 0.5]);
        fix_sign(&mut v);
        assert_eq!(v[0], 1.0);
    }
}
