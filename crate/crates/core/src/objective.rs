//! Quadratic-form loss `eᵀΣ⁻¹e`, the plain MSE baseline, and their
//! gradients.
//!
//! A batch is a `B × T` residual matrix. Multivariate data enters as one row
//! per (window, variable) pair, so the batch mean is also the mean over
//! variables sharing one `Σ`.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{QdfError, Result};
use crate::linalg;
use crate::weighting::WeightingParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBatch {
    residuals: Array2<f64>,
}

impl ResidualBatch {
    pub fn new(residuals: Array2<f64>) -> Result<Self> {
        if residuals.iter().any(|v| !v.is_finite()) {
            return Err(QdfError::Numeric("residuals must be finite".into()));
        }
        Ok(Self { residuals })
    }

    pub fn residuals(&self) -> ArrayView2<'_, f64> {
        self.residuals.view()
    }

    pub fn len(&self) -> usize {
        self.residuals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.nrows() == 0
    }

    pub fn horizon(&self) -> usize {
        self.residuals.ncols()
    }
}

fn check(batch: &ResidualBatch, w: &WeightingParams) -> Result<Array2<f64>> {
    if batch.is_empty() {
        return Err(QdfError::EmptyInput("residual batch has no rows".into()));
    }
    if batch.horizon() != w.horizon() {
        return Err(QdfError::InvalidDimension(format!(
            "batch horizon {} does not match weighting horizon {}",
            batch.horizon(),
            w.horizon()
        )));
    }
    w.checked_lower()
}

fn mean_row_sq_norm(rows: ArrayView2<'_, f64>) -> f64 {
    let total: f64 = rows
        .outer_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum();
    total / rows.nrows() as f64
}

/// Mean over rows of `eᵀΣ⁻¹e`, evaluated as `‖L⁻¹e‖²`.
pub fn quadratic_loss(batch: &ResidualBatch, w: &WeightingParams) -> Result<f64> {
    let l = check(batch, w)?;
    Ok(quadratic_loss_with_factor(l.view(), batch.residuals()))
}

pub(crate) fn quadratic_loss_with_factor(l: ArrayView2<'_, f64>, r: ArrayView2<'_, f64>) -> f64 {
    let z = linalg::forward_rows(l, r);
    mean_row_sq_norm(z.view())
}

/// Mean over rows of `‖e‖²`.
pub fn mse_loss(batch: &ResidualBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(QdfError::EmptyInput("residual batch has no rows".into()));
    }
    Ok(mean_row_sq_norm(batch.residuals()))
}

/// Row `i` is `(2/B)·Σ⁻¹·eᵢ`.
pub fn grad_wrt_residual(batch: &ResidualBatch, w: &WeightingParams) -> Result<Array2<f64>> {
    let l = check(batch, w)?;
    Ok(grad_residual_with_factor(l.view(), batch.residuals()))
}

pub(crate) fn grad_residual_with_factor(
    l: ArrayView2<'_, f64>,
    r: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let scale = 2.0 / r.nrows() as f64;
    linalg::spd_solve_rows(l, r).mapv_into(|v| scale * v)
}

pub fn mse_grad_wrt_residual(batch: &ResidualBatch) -> Result<Array2<f64>> {
    if batch.is_empty() {
        return Err(QdfError::EmptyInput("residual batch has no rows".into()));
    }
    let r = batch.residuals();
    let scale = 2.0 / r.nrows() as f64;
    Ok(r.mapv(|v| scale * v))
}

/// Gradient of the mean quadratic loss with respect to the raw weighting
/// entries.
///
/// With `U = R·Σ⁻¹` (rows `Σ⁻¹eᵢ`), `∂loss/∂Σ = −UᵀU / B`, which is then
/// chained through `Σ = L·Lᵀ` and the softplus diagonal.
pub fn grad_wrt_weighting(batch: &ResidualBatch, w: &WeightingParams) -> Result<Array2<f64>> {
    let l = check(batch, w)?;
    let u = linalg::spd_solve_rows(l.view(), batch.residuals());
    let b = batch.len() as f64;
    let grad_sigma = u.t().dot(&u).mapv_into(|v| -v / b);
    Ok(w.raw_gradient_from_sigma(grad_sigma.view()))
}

/// Training objective: plain MSE or a fixed quadratic form.
#[derive(Debug, Clone)]
pub enum Objective {
    Mse,
    Quadratic {
        weighting: WeightingParams,
        lower: Array2<f64>,
    },
}

impl Objective {
    pub fn quadratic(weighting: WeightingParams) -> Result<Self> {
        let lower = weighting.checked_lower()?;
        Ok(Objective::Quadratic { weighting, lower })
    }

    pub fn horizon(&self) -> Option<usize> {
        match self {
            Objective::Mse => None,
            Objective::Quadratic { weighting, .. } => Some(weighting.horizon()),
        }
    }

    /// Mean loss over the rows of `r`.
    pub fn loss(&self, r: ArrayView2<'_, f64>) -> f64 {
        match self {
            Objective::Mse => mean_row_sq_norm(r),
            Objective::Quadratic { lower, .. } => quadratic_loss_with_factor(lower.view(), r),
        }
    }

    /// Gradient of [`Objective::loss`] with respect to `r`.
    pub fn grad_residual(&self, r: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            Objective::Mse => {
                let scale = 2.0 / r.nrows() as f64;
                r.mapv(|v| scale * v)
            }
            Objective::Quadratic { lower, .. } => grad_residual_with_factor(lower.view(), r),
        }
    }

    /// Per-row Gaussian negative log-likelihood
    /// `½(eᵀΣ⁻¹e + ln|Σ| + T ln 2π)`, averaged over rows. `Mse` uses `Σ = I`.
    pub fn gaussian_nll(&self, r: ArrayView2<'_, f64>) -> f64 {
        let t = r.ncols() as f64;
        let log_det = match self {
            Objective::Mse => 0.0,
            Objective::Quadratic { lower, .. } => {
                2.0 * lower.diag().iter().map(|d| d.ln()).sum::<f64>()
            }
        };
        0.5 * (self.loss(r) + log_det + t * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Mean absolute error over all entries.
pub fn mae(r: ArrayView2<'_, f64>) -> f64 {
    r.mapv(f64::abs).mean().unwrap_or(0.0)
}

/// Mean squared error over all entries (per element, not per row).
pub fn mse_per_element(r: ArrayView2<'_, f64>) -> f64 {
    r.mapv(|v| v * v).mean().unwrap_or(0.0)
}

pub(crate) fn col_sums(a: ArrayView2<'_, f64>) -> ndarray::Array1<f64> {
    a.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weighting::{softplus_inv, WeightingMode};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn batch(r: Array2<f64>) -> ResidualBatch {
        ResidualBatch::new(r).unwrap()
    }

    fn example_weighting() -> WeightingParams {
        let raw = array![[softplus_inv(2.0), 0.0], [1.0, softplus_inv(2.0)]];
        WeightingParams::from_raw(raw, WeightingMode::Full).unwrap()
    }

    fn diag_weighting(d: &[f64]) -> WeightingParams {
        let t = d.len();
        let mut raw = Array2::zeros((t, t));
        for (i, v) in d.iter().enumerate() {
            raw[[i, i]] = softplus_inv(v.sqrt());
        }
        WeightingParams::from_raw(raw, WeightingMode::Full).unwrap()
    }

    #[test]
    fn quadratic_loss_examples() {
        let id = WeightingParams::identity(2, WeightingMode::Full).unwrap();
        assert_abs_diff_eq!(
            quadratic_loss(&batch(array![[1.0, 2.0]]), &id).unwrap(),
            5.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            quadratic_loss(&batch(array![[2.0, 3.0]]), &example_weighting()).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            quadratic_loss(&batch(array![[2.0, 2.0]]), &diag_weighting(&[1.0, 4.0])).unwrap(),
            5.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn quadratic_loss_rejects_mismatch_and_singular() {
        let id = WeightingParams::identity(3, WeightingMode::Full).unwrap();
        assert!(matches!(
            quadratic_loss(&batch(array![[1.0, 2.0]]), &id),
            Err(QdfError::InvalidDimension(_))
        ));
        let collapsed =
            WeightingParams::from_raw(array![[-80.0, 0.0], [0.0, 0.0]], WeightingMode::Full)
                .unwrap();
        assert!(matches!(
            quadratic_loss(&batch(array![[1.0, 2.0]]), &collapsed),
            Err(QdfError::Conditioning(_))
        ));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&batch(array![[1.0, 2.0, 3.0]])).unwrap(), 14.0);
        assert_eq!(mse_loss(&batch(array![[0.0, 0.0, 0.0]])).unwrap(), 0.0);
        assert_eq!(mse_loss(&batch(array![[1.0, 0.0], [0.0, 1.0]])).unwrap(), 1.0);
        assert!(matches!(
            mse_loss(&batch(Array2::zeros((0, 3)))),
            Err(QdfError::EmptyInput(_))
        ));
    }

    #[test]
    fn non_finite_residuals_rejected() {
        assert!(ResidualBatch::new(array![[f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn grad_residual_examples() {
        let id = WeightingParams::identity(2, WeightingMode::Full).unwrap();
        let g = grad_wrt_residual(&batch(array![[1.0, 2.0]]), &id).unwrap();
        assert_abs_diff_eq!(g, array![[2.0, 4.0]], epsilon = 1e-12);

        let g = grad_wrt_residual(&batch(array![[2.0, 3.0]]), &example_weighting()).unwrap();
        assert_abs_diff_eq!(g, array![[0.5, 1.0]], epsilon = 1e-12);

        let g = grad_wrt_residual(&batch(Array2::zeros((3, 2))), &example_weighting()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_weighting_zero_residual_and_mask() {
        let g = grad_wrt_weighting(&batch(Array2::zeros((2, 2))), &example_weighting()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let w = WeightingParams::from_raw(
            array![[0.3, 0.0, 0.0], [0.7, -0.2, 0.0], [0.1, 0.4, 0.9]],
            WeightingMode::DiagOnly,
        )
        .unwrap();
        let g = grad_wrt_weighting(&batch(array![[1.0, -2.0, 0.5], [0.3, 0.2, 1.0]]), &w).unwrap();
        for i in 0..3 {
            for j in 0..i {
                assert_eq!(g[[i, j]], 0.0);
            }
            assert!(g[[i, i]] != 0.0);
        }
    }

    #[test]
    fn grad_weighting_matches_central_differences_t2() {
        let w = WeightingParams::identity(2, WeightingMode::Full).unwrap();
        let b = batch(array![[1.0, 1.0]]);
        let g = grad_wrt_weighting(&b, &w).unwrap();
        let h = 1e-5;
        for (i, j) in [(0, 0), (1, 0), (1, 1)] {
            let mut plus = w.raw().clone();
            plus[[i, j]] += h;
            let mut minus = w.raw().clone();
            minus[[i, j]] -= h;
            let lp = quadratic_loss(&b, &WeightingParams::from_raw(plus, w.mode()).unwrap()).unwrap();
            let lm =
                quadratic_loss(&b, &WeightingParams::from_raw(minus, w.mode()).unwrap()).unwrap();
            assert_abs_diff_eq!(g[[i, j]], (lp - lm) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn identity_objective_matches_mse_bitwise() {
        let r = array![[0.3, -1.7, 2.25], [1e-3, 4.0, -0.5]];
        let q = Objective::quadratic(WeightingParams::identity(3, WeightingMode::Full).unwrap())
            .unwrap();
        assert_eq!(q.loss(r.view()).to_bits(), Objective::Mse.loss(r.view()).to_bits());
        assert_eq!(q.grad_residual(r.view()), Objective::Mse.grad_residual(r.view()));
    }

    #[test]
    fn nll_under_identity() {
        let r = array![[1.0, 2.0]];
        let nll = Objective::Mse.gaussian_nll(r.view());
        assert_abs_diff_eq!(nll, 0.5 * (5.0 + 2.0 * (2.0 * std::f64::consts::PI).ln()), epsilon = 1e-12);
    }
}
