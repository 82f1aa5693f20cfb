//! Learnable quadratic-form objectives for direct multi-step forecasting.
//!
//! A weighting matrix `Σ = L·Lᵀ` is learned by bilevel optimization on the
//! training split (a few gradient steps on the model, then one hypergradient
//! step on `Σ` through those steps), and the forecaster is then trained on
//! `eᵀΣ⁻¹e` instead of plain MSE.

pub mod bilevel;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod rng;
pub mod weighting;
pub mod workflow;

pub use error::{QdfError, Result};
