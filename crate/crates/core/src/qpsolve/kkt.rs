use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Smallest acceptable Schur-complement pivot, relative to its diagonal.
const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub y: DVector<f64>,
    /// Multipliers with the sign convention `H y + g + Eᵀλ = 0`.
    pub lambda: DVector<f64>,
}

/// Closed-form solution of `min ½yᵀHy + gᵀy s.t. E y = f` for positive
/// definite `H` and full-row-rank `E`:
///
/// ```text
/// S = E H⁻¹ Eᵀ
/// λ = -S⁻¹ (E H⁻¹ g + f)
/// y = H⁻¹ (Eᵀ S⁻¹ (E H⁻¹ g + f) - g) = -H⁻¹ (g + Eᵀλ)
/// ```
///
/// Both inverses are applied through LDLᵀ factors. A Schur pivot below
/// `1e-8` of its diagonal entry is reported as [`Error::RankDeficient`].
pub fn solve_kkt_equality(
    cost_matrix: &DMatrix<f64>,
    cost_vector: &DVector<f64>,
    constraint_matrix: &DMatrix<f64>,
    constraint_rhs: &DVector<f64>,
) -> Result<KktSolution> {
    let nv = cost_matrix.nrows();
    let k = constraint_matrix.nrows();
    if !cost_matrix.is_square() || cost_vector.len() != nv || constraint_matrix.ncols() != nv {
        return Err(Error::Dimension("KKT cost/constraint shapes".into()));
    }
    if constraint_rhs.len() != k {
        return Err(Error::Dimension("KKT right-hand side length".into()));
    }
    let ldl_h = Ldl::factor(cost_matrix).ok_or(Error::NotPositiveDefinite)?;

    // W = H⁻¹ Eᵀ, h = H⁻¹ g
    let mut w = constraint_matrix.transpose();
    for mut col in w.column_iter_mut() {
        ldl_h.solve_in_place(col.as_mut_slice());
    }
    let mut h = cost_vector.clone();
    ldl_h.solve_in_place(h.as_mut_slice());

    let mut schur = constraint_matrix * &w;
    // Symmetrize against round-off before factoring.
    for i in 0..k {
        for j in 0..i {
            let v = 0.5 * (schur[(i, j)] + schur[(j, i)]);
            schur[(i, j)] = v;
            schur[(j, i)] = v;
        }
    }
    let ldl_s = Ldl::factor(&schur).ok_or(Error::RankDeficient)?;
    for i in 0..k {
        if ldl_s.d[i] <= RANK_TOL * schur[(i, i)] {
            return Err(Error::RankDeficient);
        }
    }

    let mut lambda = constraint_matrix * &h + constraint_rhs;
    ldl_s.solve_in_place(lambda.as_mut_slice());
    lambda.neg_mut();
    let mut y = -h;
    y.gemv(-1.0, &w, &lambda, 1.0);
    Ok(KktSolution { y, lambda })
}

/// Square-root-free factorization `M = L D Lᵀ` with unit lower-triangular
/// `L`. Only positive pivots are accepted.
struct Ldl {
    l: DMatrix<f64>,
    d: Vec<f64>,
}

impl Ldl {
    fn factor(m: &DMatrix<f64>) -> Option<Self> {
        let n = m.nrows();
        let mut l = DMatrix::zeros(n, n);
        let mut d = vec![0.0; n];
        // Scratch row: l[j, k]·d[k] for k < j.
        let mut ld = vec![0.0; n];
        for j in 0..n {
            let mut dj = m[(j, j)];
            for k in 0..j {
                ld[k] = l[(j, k)] * d[k];
                dj -= l[(j, k)] * ld[k];
            }
            if !(dj > 0.0) || !dj.is_finite() {
                return None;
            }
            d[j] = dj;
            l[(j, j)] = 1.0;
            for i in j + 1..n {
                let mut v = m[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * ld[k];
                }
                l[(i, j)] = v / dj;
            }
        }
        Some(Ldl { l, d })
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.d.len();
        for j in 0..n {
            let bj = b[j];
            if bj != 0.0 {
                for i in j + 1..n {
                    b[i] -= self.l[(i, j)] * bj;
                }
            }
        }
        for (bi, di) in b.iter_mut().zip(&self.d) {
            *bi /= di;
        }
        for j in (0..n).rev() {
            let mut v = b[j];
            for i in j + 1..n {
                v -= self.l[(i, j)] * b[i];
            }
            b[j] = v;
        }
    }
}

/// Solves `M x = rhs` for symmetric positive definite `M` by Cholesky with
/// one step of iterative refinement. If the factorization fails, the diagonal
/// is shifted by `regularization` and tried once more.
pub fn linear_solve_spd(matrix: &DMatrix<f64>, rhs: &DVector<f64>, regularization: f64) -> Result<DVector<f64>> {
    if !matrix.is_square() || matrix.nrows() != rhs.len() {
        return Err(Error::Dimension("linear system shapes".into()));
    }
    let chol = match matrix.clone().cholesky() {
        Some(c) => c,
        None => {
            let mut shifted = matrix.clone();
            for i in 0..shifted.nrows() {
                shifted[(i, i)] += regularization;
            }
            shifted.cholesky().ok_or(Error::NotPositiveDefinite)?
        }
    };
    let mut x = chol.solve(rhs);
    let mut r = rhs - matrix * &x;
    chol.solve_mut(&mut r);
    x += r;
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_point_on_line() {
        let q = DMatrix::identity(2, 2);
        let p = DVector::zeros(2);
        let e = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let f = DVector::from_vec(vec![1.0]);
        let sol = solve_kkt_equality(&q, &p, &e, &f).unwrap();
        assert_eq!(sol.y.as_slice(), &[1.0, 0.0]);
        assert_eq!(sol.lambda.as_slice(), &[-1.0]);
    }

    #[test]
    fn hand_solved_three_by_three() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
        let p = DVector::from_vec(vec![-2.0, -4.0]);
        let e = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let f = DVector::from_vec(vec![1.0]);
        let sol = solve_kkt_equality(&q, &p, &e, &f).unwrap();
        assert_eq!(sol.y.as_slice(), &[0.0, 1.0]);
        assert_eq!(sol.lambda.as_slice(), &[2.0]);
    }

    #[test]
    fn duplicated_row_is_rank_deficient() {
        let q = DMatrix::identity(3, 3);
        let p = DVector::zeros(3);
        let e = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 1.0, 2.0, 0.0]);
        let f = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(solve_kkt_equality(&q, &p, &e, &f), Err(Error::RankDeficient)));
    }

    #[test]
    fn empty_constraint_set_is_unconstrained_minimum() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let p = DVector::from_vec(vec![-8.0, 1.0]);
        let e = DMatrix::zeros(0, 2);
        let f = DVector::zeros(0);
        let sol = solve_kkt_equality(&q, &p, &e, &f).unwrap();
        assert_eq!(sol.y.as_slice(), &[2.0, -1.0]);
    }

    #[test]
    fn ldl_reconstructs_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, -2.0, 2.0, 5.0, 1.0, -2.0, 1.0, 6.0]);
        let f = Ldl::factor(&m).unwrap();
        let back = &f.l * DMatrix::from_diagonal(&DVector::from_vec(f.d.clone())) * f.l.transpose();
        assert!((back - &m).amax() < 1e-14);
        let mut b = vec![1.0, 2.0, 3.0];
        f.solve_in_place(&mut b);
        let r = &m * DVector::from_vec(b) - DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(r.amax() < 1e-14);
    }

    #[test]
    fn spd_solve_trivial_cases() {
        let rhs = DVector::from_vec(vec![3.0, -1.5, 7.0]);
        assert_eq!(linear_solve_spd(&DMatrix::identity(3, 3), &rhs, 0.0).unwrap(), rhs);
        let x = linear_solve_spd(&DMatrix::from_element(1, 1, 4.0), &DVector::from_element(1, 8.0), 0.0).unwrap();
        assert_eq!(x[0], 2.0);
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            linear_solve_spd(&m, &DVector::zeros(2), 1e-9),
            Err(Error::NotPositiveDefinite)
        ));
    }
}
