//! Channel-independent linear direct forecaster.
//!
//! One `T × H` weight matrix and a length-`T` bias are shared by every
//! variable: column `d` of the forecast is `W·x[:, d] + b`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{QdfError, Result};
use crate::objective::col_sums;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearForecaster {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

/// Gradient with respect to the forecaster parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ParamGrads {
    pub fn zeros(history: usize, horizon: usize) -> Self {
        Self {
            weights: Array2::zeros((horizon, history)),
            bias: Array1::zeros(horizon),
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

impl LinearForecaster {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() || weights.is_empty() {
            return Err(QdfError::InvalidDimension(format!(
                "weights {:?} incompatible with bias of length {}",
                weights.shape(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(QdfError::Numeric("model parameters must be finite".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(history: usize, horizon: usize) -> Self {
        Self {
            weights: Array2::zeros((horizon, history)),
            bias: Array1::zeros(horizon),
        }
    }

    /// Weights uniform in `[−1/√H, 1/√H]`, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(history: usize, horizon: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (history as f64).sqrt();
        let weights = Array2::from_shape_fn((horizon, history), |_| rng.random_range(-bound..=bound));
        Self {
            weights,
            bias: Array1::zeros(horizon),
        }
    }

    pub fn history(&self) -> usize {
        self.weights.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    /// Maps an `H × D` history to a `T × D` forecast.
    pub fn forecast(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.history() {
            return Err(QdfError::InvalidDimension(format!(
                "input has {} steps, model expects {}",
                x.nrows(),
                self.history()
            )));
        }
        let mut out = self.weights.dot(&x);
        out += &self.bias.view().insert_axis(Axis(1));
        Ok(out)
    }

    /// Gradient of a scalar loss given `upstream = ∂loss/∂forecast` (T × D).
    pub fn grad_params(
        &self,
        x: ArrayView2<'_, f64>,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<ParamGrads> {
        if x.nrows() != self.history()
            || upstream.nrows() != self.horizon()
            || x.ncols() != upstream.ncols()
        {
            return Err(QdfError::InvalidDimension(format!(
                "input {:?} and upstream {:?} do not fit a model with H={} T={}",
                x.shape(),
                upstream.shape(),
                self.history(),
                self.horizon()
            )));
        }
        Ok(ParamGrads {
            weights: upstream.dot(&x.t()),
            bias: upstream.sum_axis(Axis(1)),
        })
    }

    /// Forecasts for row-major samples: `x` is `M × H`, result `M × T`.
    pub fn predict_rows(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weights.t());
        out += &self.bias;
        out
    }

    /// Row-major counterpart of [`grad_params`](Self::grad_params);
    /// `upstream` is `M × T`.
    pub fn grad_rows(&self, x: ArrayView2<'_, f64>, upstream: ArrayView2<'_, f64>) -> ParamGrads {
        ParamGrads {
            weights: upstream.t().dot(&x),
            bias: col_sums(upstream),
        }
    }

    /// Plain gradient descent: `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&self, grads: &ParamGrads, lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(QdfError::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !grads.is_finite() {
            return Err(QdfError::Numeric("non-finite model gradient".into()));
        }
        if grads.weights.shape() != self.weights.shape() || grads.bias.len() != self.bias.len() {
            return Err(QdfError::InvalidDimension("gradient shape mismatch".into()));
        }
        Ok(Self {
            weights: &self.weights - &(&grads.weights * lr),
            bias: &self.bias - &(&grads.bias * lr),
        })
    }

    /// Writes `weights.csv`, `bias.csv` and `header.json` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, header: &CheckpointHeader) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| QdfError::io(dir, e))?;
        crate::data::write_matrix_csv(&dir.join("weights.csv"), self.weights.view())?;
        let bias = self.bias.view().insert_axis(Axis(1));
        crate::data::write_matrix_csv(&dir.join("bias.csv"), bias)?;
        let path = dir.join("header.json");
        let text = serde_json::to_string_pretty(header)?;
        fs::write(&path, text).map_err(|e| QdfError::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Self, CheckpointHeader)> {
        let path = dir.join("header.json");
        let text = fs::read_to_string(&path).map_err(|e| QdfError::io(&path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)?;
        let weights = crate::data::read_matrix_csv(&dir.join("weights.csv"))?;
        let bias = crate::data::read_matrix_csv(&dir.join("bias.csv"))?;
        let bias = bias.column(0).to_owned();
        let model = Self::new(weights, bias)?;
        if model.history() != header.history || model.horizon() != header.horizon {
            return Err(QdfError::InvalidDimension(
                "checkpoint header disagrees with stored matrices".into(),
            ));
        }
        Ok((model, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub history: usize,
    pub horizon: usize,
    pub variables: usize,
    pub standardization: Standardization,
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: ParamGrads,
    v: ParamGrads,
}

impl Adam {
    pub fn new(history: usize, horizon: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ParamGrads::zeros(history, horizon),
            v: ParamGrads::zeros(history, horizon),
        }
    }

    pub fn step(&mut self, model: &mut LinearForecaster, grads: &ParamGrads) -> Result<()> {
        if !grads.is_finite() {
            return Err(QdfError::Numeric("non-finite model gradient".into()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        ndarray::Zip::from(&mut model.weights)
            .and(&grads.weights)
            .and(&mut self.m.weights)
            .and(&mut self.v.weights)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut model.bias)
            .and(&grads.bias)
            .and(&mut self.m.bias)
            .and(&mut self.v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        Ok(())
    }
}
