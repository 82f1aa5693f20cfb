//! The learnable weighting matrix `Σ = L·Lᵀ`.
//!
//! `L` is stored as a dense raw matrix whose strictly-lower entries are used
//! directly and whose diagonal passes through a softplus, so any raw value
//! yields a positive semi-definite `Σ`. The upper triangle of `raw` is
//! ignored.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{QdfError, Result};
use crate::linalg;

/// Lower bound applied to the softplus output on the diagonal of `L`.
pub const DIAG_FLOOR: f64 = 1e-6;

/// Which parts of `L` are learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    #[default]
    Full,
    /// Strictly-lower entries of `L` pinned at zero: per-step weights only.
    DiagOnly,
    /// Diagonal of `L` pinned at one: cross-step structure only.
    OffDiagOnly,
}

impl WeightingMode {
    fn learns_diag(self) -> bool {
        !matches!(self, WeightingMode::OffDiagOnly)
    }

    fn learns_offdiag(self) -> bool {
        !matches!(self, WeightingMode::DiagOnly)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw diagonal value whose softplus rounds to exactly `1.0`.
fn unit_raw_diag() -> f64 {
    let mut x = softplus_inv(1.0);
    for _ in 0..64 {
        let y = softplus(x);
        if y == 1.0 {
            break;
        }
        x = if y > 1.0 {
            f64::from_bits(x.to_bits() - 1)
        } else {
            f64::from_bits(x.to_bits() + 1)
        };
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingParams {
    raw: Array2<f64>,
    mode: WeightingMode,
}

impl WeightingParams {
    /// `Σ = I` for the given horizon.
    pub fn identity(horizon: usize, mode: WeightingMode) -> Result<Self> {
        if horizon == 0 {
            return Err(QdfError::InvalidDimension("horizon must be at least 1".into()));
        }
        let mut raw = Array2::zeros((horizon, horizon));
        raw.diag_mut().fill(unit_raw_diag());
        Ok(Self { raw, mode })
    }

    /// Builds params from an unconstrained raw matrix. Entries above the
    /// diagonal are ignored; masked entries are zeroed.
    pub fn from_raw(raw: Array2<f64>, mode: WeightingMode) -> Result<Self> {
        if raw.nrows() == 0 || raw.nrows() != raw.ncols() {
            return Err(QdfError::InvalidDimension(format!(
                "raw weighting matrix must be square and non-empty, got {:?}",
                raw.shape()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(QdfError::Numeric("raw weighting entries must be finite".into()));
        }
        let mut raw = raw;
        let t = raw.nrows();
        for i in 0..t {
            for j in (i + 1)..t {
                raw[[i, j]] = 0.0;
            }
            if !mode.learns_offdiag() {
                for j in 0..i {
                    raw[[i, j]] = 0.0;
                }
            }
        }
        Ok(Self { raw, mode })
    }

    /// Params whose materialized `Σ` equals `sigma` (up to rounding).
    ///
    /// Used to plug a known covariance, e.g. a synthetic oracle, into the
    /// same objective. Mode is `Full`.
    pub fn from_sigma(sigma: ArrayView2<'_, f64>) -> Result<Self> {
        let l = linalg::cholesky(sigma).ok_or_else(|| {
            QdfError::Conditioning("covariance is not positive definite".into())
        })?;
        let mut raw = l.clone();
        for i in 0..l.nrows() {
            if l[[i, i]] < DIAG_FLOOR {
                return Err(QdfError::Conditioning(format!(
                    "cholesky diagonal {i} below floor"
                )));
            }
            raw[[i, i]] = softplus_inv(l[[i, i]]);
        }
        Self::from_raw(raw, WeightingMode::Full)
    }

    pub fn horizon(&self) -> usize {
        self.raw.nrows()
    }

    pub fn mode(&self) -> WeightingMode {
        self.mode
    }

    pub fn raw(&self) -> &Array2<f64> {
        &self.raw
    }

    /// The lower-triangular factor with floor and mode masks applied.
    pub fn lower(&self) -> Array2<f64> {
        let t = self.horizon();
        let mut l = Array2::zeros((t, t));
        for i in 0..t {
            l[[i, i]] = if self.mode.learns_diag() {
                softplus(self.raw[[i, i]]).max(DIAG_FLOOR)
            } else {
                1.0
            };
            if self.mode.learns_offdiag() {
                for j in 0..i {
                    l[[i, j]] = self.raw[[i, j]];
                }
            }
        }
        l
    }

    pub fn sigma(&self) -> Array2<f64> {
        self.materialize().1
    }

    pub fn materialize(&self) -> (Array2<f64>, Array2<f64>) {
        let l = self.lower();
        let mut sigma = l.dot(&l.t());
        let t = self.horizon();
        for i in 0..t {
            for j in 0..i {
                let v = 0.5 * (sigma[[i, j]] + sigma[[j, i]]);
                sigma[[i, j]] = v;
                sigma[[j, i]] = v;
            }
        }
        (l, sigma)
    }

    /// Returns `L` if every diagonal entry sits above the floor before
    /// clamping, otherwise a conditioning error.
    pub fn checked_lower(&self) -> Result<Array2<f64>> {
        if self.mode.learns_diag() {
            for i in 0..self.horizon() {
                let d = softplus(self.raw[[i, i]]);
                if !(d >= DIAG_FLOOR) {
                    return Err(QdfError::Conditioning(format!(
                        "diagonal {i} of L is {d:e}, below floor {DIAG_FLOOR:e}"
                    )));
                }
            }
        }
        Ok(self.lower())
    }

    /// Rescales `Σ` so that `trace(Σ⁻¹) = T`. The minimizer of the
    /// quadratic form over predictions does not change.
    ///
    /// In `OffDiagOnly` mode the unit diagonal already fixes `det Σ = 1`,
    /// and a uniform rescale is not representable, so params are returned
    /// as-is.
    pub fn normalize_scale(&self) -> Result<Self> {
        let l = self.checked_lower()?;
        if !self.mode.learns_diag() {
            return Ok(self.clone());
        }
        let t = self.horizon() as f64;
        let trace_inv: f64 = linalg::spd_inverse(l.view()).diag().sum();
        if !trace_inv.is_finite() || trace_inv <= 0.0 {
            return Err(QdfError::Conditioning(format!(
                "trace of inverse weighting is {trace_inv}"
            )));
        }
        let c = trace_inv / t;
        if c == 1.0 {
            return Ok(self.clone());
        }
        let s = c.sqrt();
        let n = self.horizon();
        let mut raw = self.raw.clone();
        for i in 0..n {
            raw[[i, i]] = softplus_inv(l[[i, i]] * s);
            for j in 0..i {
                raw[[i, j]] *= s;
            }
        }
        Self::from_raw(raw, self.mode)
    }

    /// Chains a gradient with respect to `Σ` back onto the raw entries,
    /// through `Σ = L·Lᵀ` and the softplus diagonal. Masked entries get 0.
    pub fn raw_gradient_from_sigma(&self, grad_sigma: ArrayView2<'_, f64>) -> Array2<f64> {
        let l = self.lower();
        let sym = &grad_sigma + &grad_sigma.t();
        let grad_l = sym.dot(&l);
        self.raw_gradient_from_lower(grad_l.view())
    }

    /// Chains a gradient with respect to `L` onto the raw entries.
    pub fn raw_gradient_from_lower(&self, grad_l: ArrayView2<'_, f64>) -> Array2<f64> {
        let t = self.horizon();
        let mut g = Array2::zeros((t, t));
        for i in 0..t {
            if self.mode.learns_diag() {
                let x = self.raw[[i, i]];
                // The floor clamp is flat, so no gradient flows through it.
                if softplus(x) > DIAG_FLOOR {
                    g[[i, i]] = grad_l[[i, i]] * sigmoid(x);
                }
            }
            if self.mode.learns_offdiag() {
                for j in 0..i {
                    g[[i, j]] = grad_l[[i, j]];
                }
            }
        }
        g
    }

    /// `raw - step * grad`, with masked entries left untouched.
    pub fn descend(&self, grad: ArrayView2<'_, f64>, step: f64) -> Result<Self> {
        if grad.shape() != self.raw.shape() {
            return Err(QdfError::InvalidDimension(format!(
                "gradient shape {:?} does not match weighting {:?}",
                grad.shape(),
                self.raw.shape()
            )));
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(QdfError::Numeric("non-finite weighting gradient".into()));
        }
        let mask = self.mask();
        let raw = &self.raw - &(&grad * &mask * step);
        Self::from_raw(raw, self.mode)
    }

    /// 1 where the raw entry is learned, 0 elsewhere.
    pub fn mask(&self) -> Array2<f64> {
        let t = self.horizon();
        Array2::from_shape_fn((t, t), |(i, j)| {
            let learned = (i == j && self.mode.learns_diag())
                || (j < i && self.mode.learns_offdiag());
            if learned {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Writes the materialized `Σ` as CSV with 17 significant digits.
    pub fn dump_sigma(&self, path: &Path) -> Result<()> {
        crate::data::write_matrix_csv(path, self.sigma().view())
    }
}

/// `‖Σ_a − Σ_b‖_F` on the materialized matrices.
pub fn frobenius_distance(a: &WeightingParams, b: &WeightingParams) -> Result<f64> {
    if a.horizon() != b.horizon() {
        return Err(QdfError::InvalidDimension(format!(
            "horizons differ: {} vs {}",
            a.horizon(),
            b.horizon()
        )));
    }
    let diff = a.sigma() - b.sigma();
    Ok(linalg::frobenius(diff.view()))
}
