//! One atomic update of the weighting matrix: `N` gradient steps on the
//! model over the inner split, then one step on `Σ` along the exact
//! derivative of the outer-split loss through those inner steps.
//!
//! For the linear forecaster with parameters `Θ = [W | b]` (`T × (H+1)`)
//! and augmented inputs `x̃ = [x, 1]`, one inner step is
//!
//! ```text
//! Θ_{k+1} = Θ_k + 2α·A·S_k,   S_k = R_kᵀ X̃ / M,   A = Σ⁻¹
//! ```
//!
//! so the reverse pass only needs `S_k`, `C = X̃ᵀX̃ / M`, and solves
//! against `L`. The `Σ` that appears directly in the outer loss is held
//! fixed; only the path through `Θ_N` is differentiated.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{chrono_split_windows, WindowSet};
use crate::error::{QdfError, Result};
use crate::linalg;
use crate::model::LinearForecaster;
use crate::objective::quadratic_loss_with_factor;
use crate::weighting::WeightingParams;

/// Time-disjoint inner/outer windows.
#[derive(Debug, Clone)]
pub struct SplitPair {
    inner: WindowSet,
    outer: WindowSet,
}

impl SplitPair {
    pub fn new(inner: WindowSet, outer: WindowSet) -> Result<Self> {
        if inner.is_empty() || outer.is_empty() {
            return Err(QdfError::InvalidSplit("inner and outer splits must be nonempty".into()));
        }
        if inner.history() != outer.history() || inner.horizon() != outer.horizon() {
            return Err(QdfError::InvalidDimension(
                "inner and outer windows differ in shape".into(),
            ));
        }
        if !inner.disjoint_from(&outer) {
            return Err(QdfError::InvalidSplit(
                "inner and outer windows share source indices".into(),
            ));
        }
        Ok(Self { inner, outer })
    }

    /// First half of `windows` for the inner loop, second half for the
    /// outer loop, with boundary-straddling windows dropped.
    pub fn chronological(windows: &WindowSet) -> Result<Self> {
        let mut parts = chrono_split_windows(windows, &[0.5, 0.5], true)?;
        let outer = parts.pop().expect("two parts");
        let inner = parts.pop().expect("two parts");
        Self::new(inner, outer)
    }

    pub fn inner(&self) -> &WindowSet {
        &self.inner
    }

    pub fn outer(&self) -> &WindowSet {
        &self.outer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomicConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub eta: f64,
    /// Rescale `Σ` to `trace(Σ⁻¹) = T` after each outer step.
    pub normalize: bool,
}

impl AtomicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(QdfError::Config("inner_steps must be at least 1".into()));
        }
        if !(self.inner_lr > 0.0) || !self.inner_lr.is_finite() {
            return Err(QdfError::Config(format!(
                "inner_lr must be positive, got {}",
                self.inner_lr
            )));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(QdfError::Config(format!("eta must be nonnegative, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Wall-clock spent in each phase, accumulated across updates, plus the
/// duration of every individual step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub inner_fwd: Duration,
    pub inner_bwd: Duration,
    pub outer_fwd: Duration,
    pub outer_bwd: Duration,
    pub inner_steps: usize,
    pub outer_steps: usize,
    /// Per-step durations in phase order: inner fwd/bwd, outer fwd/bwd.
    pub step_log: [Vec<Duration>; 4],
}

impl PhaseTimings {
    pub fn add(&mut self, other: &PhaseTimings) {
        self.inner_fwd += other.inner_fwd;
        self.inner_bwd += other.inner_bwd;
        self.outer_fwd += other.outer_fwd;
        self.outer_bwd += other.outer_bwd;
        self.inner_steps += other.inner_steps;
        self.outer_steps += other.outer_steps;
        for (mine, theirs) in self.step_log.iter_mut().zip(other.step_log.iter()) {
            mine.extend_from_slice(theirs);
        }
    }

    fn record(&mut self, phase: usize, d: Duration) {
        match phase {
            0 => self.inner_fwd += d,
            1 => self.inner_bwd += d,
            2 => self.outer_fwd += d,
            _ => self.outer_bwd += d,
        }
        self.step_log[phase].push(d);
    }

    /// Median step duration of each phase; zero for phases never run.
    pub fn medians(&self) -> [Duration; 4] {
        let median = |v: &Vec<Duration>| {
            let mut s = v.clone();
            s.sort_unstable();
            match s.len() {
                0 => Duration::ZERO,
                n if n % 2 == 1 => s[n / 2],
                n => (s[n / 2 - 1] + s[n / 2]) / 2,
            }
        };
        [
            median(&self.step_log[0]),
            median(&self.step_log[1]),
            median(&self.step_log[2]),
            median(&self.step_log[3]),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AtomicOutcome {
    pub weighting: WeightingParams,
    pub model: LinearForecaster,
    /// Inner loss before each inner step.
    pub inner_losses: Vec<f64>,
    /// Outer loss at the adapted parameters.
    pub outer_loss: f64,
    pub hypergradient: Option<Array2<f64>>,
    pub timings: PhaseTimings,
}

/// Row samples and second moments of one split.
struct Prepared {
    x: Array2<f64>,
    y: Array2<f64>,
    /// `XᵀX / M`
    xx: Array2<f64>,
    /// column means of `X`
    mx: Array1<f64>,
}

impl Prepared {
    fn new(windows: &WindowSet) -> Self {
        let (x, y) = windows.to_rows();
        let m = x.nrows() as f64;
        let xx = x.t().dot(&x).mapv_into(|v| v / m);
        let mx = linalg::col_mean(x.view());
        Self { x, y, xx, mx }
    }

    fn residuals(&self, model: &LinearForecaster) -> Array2<f64> {
        &self.y - &model.predict_rows(self.x.view())
    }

    /// `(RᵀX / M, colsum(R) / M)`.
    fn moments(&self, r: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
        let m = r.nrows() as f64;
        (
            r.t().dot(&self.x).mapv_into(|v| v / m),
            r.sum_axis(Axis(0)).mapv_into(|v| v / m),
        )
    }

    /// `Λ·C` for `Λ = [lw | lb]`.
    fn times_c(&self, lw: &Array2<f64>, lb: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
        let mut cw = lw.dot(&self.xx);
        for (mut row, &b) in cw.outer_iter_mut().zip(lb.iter()) {
            row.scaled_add(b, &self.mx);
        }
        let cb = lw.dot(&self.mx) + lb;
        (cw, cb)
    }
}

/// `A·[mw | mb]` via two triangular solves per column.
fn apply_inverse(l: &Array2<f64>, mw: &Array2<f64>, mb: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let aw = linalg::spd_solve_cols(l.view(), mw.view());
    let ab = linalg::spd_solve_cols(l.view(), mb.view().insert_axis(Axis(1)));
    (aw, ab.column(0).to_owned())
}

fn check_shapes(model: &LinearForecaster, w: &WeightingParams, split: &SplitPair) -> Result<()> {
    let h = split.inner.history();
    let t = split.inner.horizon();
    if model.history() != h || model.horizon() != t || w.horizon() != t {
        return Err(QdfError::InvalidDimension(format!(
            "model (H={}, T={}), weighting (T={}) and windows (H={h}, T={t}) disagree",
            model.history(),
            model.horizon(),
            w.horizon()
        )));
    }
    Ok(())
}

struct Unrolled {
    model: LinearForecaster,
    moments: Vec<(Array2<f64>, Array1<f64>)>,
    losses: Vec<f64>,
}

fn unroll(
    model: &LinearForecaster,
    l: &Array2<f64>,
    inner: &Prepared,
    cfg: &AtomicConfig,
    timings: &mut PhaseTimings,
) -> Result<Unrolled> {
    let mut theta = model.clone();
    let mut moments = Vec::with_capacity(cfg.inner_steps);
    let mut losses = Vec::with_capacity(cfg.inner_steps);
    for _ in 0..cfg.inner_steps {
        let t0 = Instant::now();
        let r = inner.residuals(&theta);
        losses.push(quadratic_loss_with_factor(l.view(), r.view()));
        timings.record(0, t0.elapsed());

        let t1 = Instant::now();
        let (sw, sb) = inner.moments(r.view());
        let (aw, ab) = apply_inverse(l, &sw, &sb);
        // ∇Θ = −2·A·S
        let grads = crate::model::ParamGrads {
            weights: aw.mapv(|v| -2.0 * v),
            bias: ab.mapv(|v| -2.0 * v),
        };
        theta = theta.sgd_step(&grads, cfg.inner_lr)?;
        moments.push((sw, sb));
        timings.record(1, t1.elapsed());
        timings.inner_steps += 1;
    }
    Ok(Unrolled {
        model: theta,
        moments,
        losses,
    })
}

/// Reverse pass through the unrolled inner steps, returning `∂F/∂raw`.
fn reverse(
    w: &WeightingParams,
    l: &Array2<f64>,
    inner: &Prepared,
    unrolled: &Unrolled,
    outer_moments: (Array2<f64>, Array1<f64>),
    cfg: &AtomicConfig,
) -> Array2<f64> {
    let t = w.horizon();
    let alpha = cfg.inner_lr;
    // Λ_N = ∂F/∂Θ_N = −2·Ā·S_out
    let (aw, ab) = apply_inverse(l, &outer_moments.0, &outer_moments.1);
    let mut lw = aw.mapv(|v| -2.0 * v);
    let mut lb = ab.mapv(|v| -2.0 * v);
    let mut grad_a = Array2::<f64>::zeros((t, t));
    for (sw, sb) in unrolled.moments.iter().rev() {
        // ∂F/∂A += 2α·Λ_{k+1}·S_kᵀ
        let outer = lw.dot(&sw.t())
            + &lb
                .view()
                .insert_axis(Axis(1))
                .dot(&sb.view().insert_axis(Axis(0)));
        grad_a.scaled_add(2.0 * alpha, &outer);
        // Λ_k = Λ_{k+1} − 2α·A·Λ_{k+1}·C
        let (cw, cb) = inner.times_c(&lw, &lb);
        let (acw, acb) = apply_inverse(l, &cw, &cb);
        lw.scaled_add(-2.0 * alpha, &acw);
        lb.scaled_add(-2.0 * alpha, &acb);
    }
    // ∂F/∂Σ = −A·(∂F/∂A)·A
    let left = linalg::spd_solve_cols(l.view(), grad_a.view());
    let grad_sigma = linalg::spd_solve_rows(l.view(), left.view()).mapv_into(|v| -v);
    w.raw_gradient_from_sigma(grad_sigma.view())
}

/// Derivative of the outer loss with respect to the raw weighting entries,
/// taken through the `N`-step inner trajectory from `theta0`.
pub fn hypergradient(
    theta0: &LinearForecaster,
    w: &WeightingParams,
    split: &SplitPair,
    cfg: &AtomicConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_shapes(theta0, w, split)?;
    let l = w.checked_lower()?;
    let inner = Prepared::new(&split.inner);
    let outer = Prepared::new(&split.outer);
    let mut timings = PhaseTimings::default();
    let unrolled = unroll(theta0, &l, &inner, cfg, &mut timings)?;
    let r_out = outer.residuals(&unrolled.model);
    let moments = outer.moments(r_out.view());
    Ok(reverse(w, &l, &inner, &unrolled, moments, cfg))
}

/// Inner steps on the model, then one outer step on the weighting.
pub fn atomic_update(
    model: &LinearForecaster,
    w: &WeightingParams,
    split: &SplitPair,
    cfg: &AtomicConfig,
) -> Result<AtomicOutcome> {
    cfg.validate()?;
    check_shapes(model, w, split)?;
    let l = w.checked_lower()?;
    let inner = Prepared::new(&split.inner);
    let outer = Prepared::new(&split.outer);
    let mut timings = PhaseTimings::default();
    let unrolled = unroll(model, &l, &inner, cfg, &mut timings)?;

    let t0 = Instant::now();
    let r_out = outer.residuals(&unrolled.model);
    let outer_loss = quadratic_loss_with_factor(l.view(), r_out.view());
    timings.record(2, t0.elapsed());

    let (weighting, hypergradient) = if cfg.eta == 0.0 {
        (w.clone(), None)
    } else {
        let t1 = Instant::now();
        let moments = outer.moments(r_out.view());
        let g = reverse(w, &l, &inner, &unrolled, moments, cfg);
        let mut next = w.descend(g.view(), cfg.eta)?;
        if cfg.normalize {
            next = next.normalize_scale()?;
        }
        timings.record(3, t1.elapsed());
        (next, Some(g))
    };
    timings.outer_steps += 1;

    Ok(AtomicOutcome {
        weighting,
        model: unrolled.model,
        inner_losses: unrolled.losses,
        outer_loss,
        hypergradient,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, SeriesFrame};
    use crate::objective::{grad_wrt_residual, quadratic_loss, ResidualBatch};
    use crate::weighting::WeightingMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent route: inner steps through the public objective and
    /// model APIs, outer loss with `Σ` pinned at `fixed`.
    pub(crate) fn outer_loss_via_public_api(
        theta0: &LinearForecaster,
        w: &WeightingParams,
        fixed: &WeightingParams,
        split: &SplitPair,
        cfg: &AtomicConfig,
    ) -> f64 {
        let (xi, yi) = split.inner().to_rows();
        let (xo, yo) = split.outer().to_rows();
        let mut theta = theta0.clone();
        for _ in 0..cfg.inner_steps {
            let r = &yi - &theta.predict_rows(xi.view());
            let g = grad_wrt_residual(&ResidualBatch::new(r).unwrap(), w).unwrap();
            let up = g.mapv(|v| -v);
            theta = theta.sgd_step(&theta.grad_rows(xi.view(), up.view()), cfg.inner_lr).unwrap();
        }
        let r = &yo - &theta.predict_rows(xo.view());
        quadratic_loss(&ResidualBatch::new(r).unwrap(), fixed).unwrap()
    }

    fn instance(seed: u64, h: usize, t: usize) -> (LinearForecaster, WeightingParams, SplitPair) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40 + h + t;
        let v = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let frame = SeriesFrame::new(v, vec!["a".into(), "b".into()], "t").unwrap();
        let ws = make_windows(&frame, h, t).unwrap();
        let split = SplitPair::chronological(&ws).unwrap();
        let model = LinearForecaster::init_uniform(h, t, &mut rng);
        let raw = Array2::from_shape_fn((t, t), |_| rng.random_range(-0.5..0.5));
        let w = WeightingParams::from_raw(raw, WeightingMode::Full).unwrap();
        (model, w, split)
    }

    fn cfg(n: usize) -> AtomicConfig {
        AtomicConfig {
            inner_steps: n,
            inner_lr: 0.05,
            eta: 0.1,
            normalize: true,
        }
    }

    #[test]
    fn eta_zero_returns_weighting_unchanged() {
        let (model, w, split) = instance(1, 3, 2);
        let c = AtomicConfig { eta: 0.0, ..cfg(2) };
        let out = atomic_update(&model, &w, &split, &c).unwrap();
        assert_eq!(out.weighting, w);
        assert_eq!(out.inner_losses.len(), 2);
        assert_ne!(out.model, model);
        assert!(out.hypergradient.is_none());
    }

    #[test]
    fn one_step_hypergradient_matches_finite_differences() {
        let (model, w, split) = instance(2, 2, 2);
        let c = cfg(1);
        let g = hypergradient(&model, &w, &split, &c).unwrap();
        let h = 1e-4;
        for i in 0..2 {
            for j in 0..=i {
                let mut p = w.raw().clone();
                p[[i, j]] += h;
                let mut m = w.raw().clone();
                m[[i, j]] -= h;
                let wp = WeightingParams::from_raw(p, w.mode()).unwrap();
                let wm = WeightingParams::from_raw(m, w.mode()).unwrap();
                let fd = (outer_loss_via_public_api(&model, &wp, &w, &split, &c)
                    - outer_loss_via_public_api(&model, &wm, &w, &split, &c))
                    / (2.0 * h);
                let err = (g[[i, j]] - fd).abs() / fd.abs().max(1e-8);
                assert!(err <= 1e-3, "entry ({i},{j}): {} vs {fd}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn vanishing_inner_rate_kills_hypergradient() {
        let (model, w, split) = instance(3, 3, 3);
        let big = hypergradient(&model, &w, &split, &AtomicConfig { inner_lr: 1e-2, ..cfg(1) })
            .unwrap();
        let small = hypergradient(&model, &w, &split, &AtomicConfig { inner_lr: 1e-8, ..cfg(1) })
            .unwrap();
        let norm = |a: &Array2<f64>| linalg::frobenius(a.view());
        assert!(norm(&small) < 1e-5 * norm(&big));
    }

    #[test]
    fn diag_only_hypergradient_is_masked() {
        let (model, w, split) = instance(4, 3, 3);
        let w = WeightingParams::from_raw(w.raw().clone(), WeightingMode::DiagOnly).unwrap();
        let g = hypergradient(&model, &w, &split, &cfg(2)).unwrap();
        for i in 0..3 {
            for j in 0..i {
                assert_eq!(g[[i, j]], 0.0);
            }
        }
        assert!(g.diag().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_outer_residuals_give_zero_hypergradient() {
        // Outer labels equal the adapted model's forecast exactly.
        let (model, w, split) = instance(5, 2, 2);
        let c = cfg(1);
        let adapted = atomic_update(&model, &w, &split, &AtomicConfig { eta: 0.0, ..c })
            .unwrap()
            .model;
        let outer = split.outer();
        let mut fake = Vec::new();
        for i in 0..outer.len() {
            let (x, _) = outer.window(i);
            fake.push((x.clone(), adapted.forecast(x.view()).unwrap()));
        }
        let pair = split_with_outer_labels(&split, &fake);
        let g = hypergradient(&model, &w, &pair, &c).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
        let out = atomic_update(&model, &w, &pair, &c).unwrap();
        assert!(frobenius_raw(&out.weighting, &w.normalize_scale().unwrap()) < 1e-12);
    }

    fn frobenius_raw(a: &WeightingParams, b: &WeightingParams) -> f64 {
        crate::weighting::frobenius_distance(a, b).unwrap()
    }

    fn split_with_outer_labels(
        split: &SplitPair,
        windows: &[(Array2<f64>, Array2<f64>)],
    ) -> SplitPair {
        let outer = split.outer().with_labels(windows.iter().map(|(_, y)| y.clone()).collect());
        SplitPair::new(split.inner().clone(), outer).unwrap()
    }

    #[test]
    fn overlapping_split_rejected() {
        let (_, _, split) = instance(6, 3, 2);
        let inner = split.inner().clone();
        assert!(matches!(
            SplitPair::new(inner.clone(), inner),
            Err(QdfError::InvalidSplit(_))
        ));
    }

    #[test]
    fn deterministic() {
        let (model, w, split) = instance(7, 4, 3);
        let a = atomic_update(&model, &w, &split, &cfg(3)).unwrap();
        let b = atomic_update(&model, &w, &split, &cfg(3)).unwrap();
        assert_eq!(a.weighting, b.weighting);
        assert_eq!(a.model, b.model);
    }
}
