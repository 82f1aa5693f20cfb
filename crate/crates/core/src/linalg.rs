//! Small dense routines used by the weighting and diagnostics code.
//!
//! Matrices here are at most a few hundred on a side, so plain
//! substitution loops are fast enough and keep results deterministic.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{QdfError, Result};

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// Returns `None` when a pivot is not strictly positive.
pub fn cholesky(a: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Some(l)
}

/// Solves `L z = r` for every row `r` of `rows`, returning the rows `z`.
pub fn forward_rows(l: ArrayView2<'_, f64>, rows: ArrayView2<'_, f64>) -> Array2<f64> {
    let t = l.nrows();
    let mut out = Array2::<f64>::zeros(rows.raw_dim());
    for (src, mut dst) in rows.outer_iter().zip(out.outer_iter_mut()) {
        for i in 0..t {
            let mut s = src[i];
            for k in 0..i {
                s -= l[[i, k]] * dst[k];
            }
            dst[i] = s / l[[i, i]];
        }
    }
    out
}

/// Solves `Lᵀ x = z` for every row `z` of `rows`.
pub fn backward_rows(l: ArrayView2<'_, f64>, rows: ArrayView2<'_, f64>) -> Array2<f64> {
    let t = l.nrows();
    let mut out = Array2::<f64>::zeros(rows.raw_dim());
    for (src, mut dst) in rows.outer_iter().zip(out.outer_iter_mut()) {
        for i in (0..t).rev() {
            let mut s = src[i];
            for k in (i + 1)..t {
                s -= l[[k, i]] * dst[k];
            }
            dst[i] = s / l[[i, i]];
        }
    }
    out
}

/// Applies `(L Lᵀ)⁻¹` to each row of `rows`.
pub fn spd_solve_rows(l: ArrayView2<'_, f64>, rows: ArrayView2<'_, f64>) -> Array2<f64> {
    let z = forward_rows(l, rows);
    backward_rows(l, z.view())
}

/// Applies `(L Lᵀ)⁻¹` to each column of `cols`.
pub fn spd_solve_cols(l: ArrayView2<'_, f64>, cols: ArrayView2<'_, f64>) -> Array2<f64> {
    spd_solve_rows(l, cols.t()).reversed_axes()
}

/// Explicit inverse of `L Lᵀ`. Only used where the full matrix is needed.
pub fn spd_inverse(l: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = l.nrows();
    spd_solve_rows(l, Array2::<f64>::eye(n).view())
}

pub fn frobenius(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Ordinary least squares with an intercept-free design (callers add the
/// intercept column). Solves the normal equations through a Cholesky
/// factor and falls back to a ridge of `ridge` on the diagonal when the
/// Gram matrix is not numerically positive definite.
///
/// Returns the coefficient matrix (p × k) and whether the fallback fired.
pub fn least_squares(
    design: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    ridge: f64,
) -> Result<(Array2<f64>, bool)> {
    if design.nrows() != targets.nrows() {
        return Err(QdfError::InvalidDimension(format!(
            "design has {} rows, targets {}",
            design.nrows(),
            targets.nrows()
        )));
    }
    let gram = design.t().dot(&design);
    let rhs = design.t().dot(&targets);
    let p = gram.nrows();
    let scale = gram.diag().iter().cloned().fold(0.0_f64, f64::max).max(1.0);
    let tol = 1e-12 * scale;

    let factor = cholesky(gram.view()).filter(|l| l.diag().iter().all(|d| d * d > tol));
    let (l, degraded) = match factor {
        Some(l) => (l, false),
        None => {
            let mut g = gram.clone();
            for i in 0..p {
                g[[i, i]] += ridge;
            }
            let l = cholesky(g.view()).ok_or_else(|| {
                QdfError::Conditioning("normal equations singular even after ridge".into())
            })?;
            (l, true)
        }
    };
    Ok((spd_solve_cols(l.view(), rhs.view()), degraded))
}

/// Column means.
pub fn col_mean(a: ArrayView2<'_, f64>) -> Array1<f64> {
    a.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(a.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_recovers_factor() {
        let a = array![[4.0, 2.0], [2.0, 5.0]];
        let l = cholesky(a.view()).unwrap();
        assert_abs_diff_eq!(l, array![[2.0, 0.0], [1.0, 2.0]], epsilon = 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(a.view()).is_none());
    }

    #[test]
    fn solves_match_explicit_inverse() {
        let l = array![[2.0, 0.0], [1.0, 2.0]];
        let inv = spd_inverse(l.view());
        let expected = array![[5.0, -2.0], [-2.0, 4.0]] / 16.0;
        assert_abs_diff_eq!(inv, expected, epsilon = 1e-14);
        let e = array![[2.0, 3.0]];
        let z = forward_rows(l.view(), e.view());
        assert_abs_diff_eq!(z, array![[1.0, 1.0]], epsilon = 1e-14);
    }

    #[test]
    fn least_squares_exact_fit() {
        let x = array![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0]];
        let y = array![[1.0], [3.0], [5.0], [7.0]];
        let (b, degraded) = least_squares(x.view(), y.view(), 1e-8).unwrap();
        assert!(!degraded);
        assert_abs_diff_eq!(b, array![[1.0], [2.0]], epsilon = 1e-12);
    }

    #[test]
    fn least_squares_rank_deficient_falls_back() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let y = array![[1.0], [2.0], [3.0]];
        let (_, degraded) = least_squares(x.view(), y.view(), 1e-8).unwrap();
        assert!(degraded);
    }
}
