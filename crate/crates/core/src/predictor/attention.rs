use nalgebra::{DMatrix, DMatrixView};

use crate::error::{Error, Result};

/// In-place row softmax with max subtraction.
pub(crate) fn softmax_rows(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        let mut row = m.row_mut(i);
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Scaled dot-product weights `softmax(Q Kᵀ / √d_k)` for matrix views.
pub(crate) fn attention_weights_view(q: DMatrixView<'_, f64>, k: DMatrixView<'_, f64>) -> DMatrix<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut s = q * k.transpose();
    s *= scale;
    softmax_rows(&mut s);
    s
}

/// Scaled dot-product attention. Returns the context `A V` and the weight
/// matrix `A`, whose rows are probability vectors.
pub fn attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() || q.ncols() == 0 {
        return Err(Error::Dimension(format!(
            "attention shapes Q {}x{}, K {}x{}, V {}x{}",
            q.nrows(),
            q.ncols(),
            k.nrows(),
            k.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    if q.iter().chain(k.iter()).chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("attention input"));
    }
    let weights = attention_weights_view(q.as_view(), k.as_view());
    Ok((&weights * v, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_returns_values() {
        let q = DMatrix::from_row_slice(1, 3, &[0.3, -1.0, 2.0]);
        let k = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let v = DMatrix::from_row_slice(1, 2, &[4.0, -5.5]);
        let (c, a) = attention(&q, &k, &v).unwrap();
        assert_eq!(c, v);
        assert_eq!(a[(0, 0)], 1.0);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = DMatrix::from_element(3, 2, 0.7);
        let k = DMatrix::from_element(3, 2, -0.2);
        let v = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let (c, _) = attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert!((c[(i, 0)] - 3.0).abs() < 1e-12);
            assert!((c[(i, 1)] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_logits_stay_finite() {
        let q = DMatrix::from_row_slice(2, 1, &[1e6, -1e6]);
        let k = DMatrix::from_row_slice(2, 1, &[1e3, -1e3]);
        let v = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let (c, a) = attention(&q, &k, &v).unwrap();
        assert!(c.iter().all(|x| x.is_finite()));
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(1, 0)], 2.0);
        assert!((a.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        let m = DMatrix::zeros(2, 2);
        assert!(attention(&m, &DMatrix::zeros(2, 3), &m).is_err());
        let mut bad = m.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(attention(&bad, &m, &m), Err(Error::NonFinite(_))));
    }
}
