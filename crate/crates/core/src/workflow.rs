//! The full procedure: learn `Σ` on chronological blocks of the training
//! windows, then train the forecaster on the resulting quadratic form.

use std::time::{Duration, Instant};

use log::{debug, info};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bilevel::{atomic_update, AtomicConfig, PhaseTimings, SplitPair};
use crate::data::{chrono_split_windows, split_even, WindowSet};
use crate::error::{QdfError, Result};
use crate::model::{Adam, LinearForecaster};
use crate::objective::{mae, mse_per_element, Objective};
use crate::rng::{stream, Stream};
use crate::weighting::{frobenius_distance, WeightingMode, WeightingParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QdfConfig {
    pub k_splits: usize,
    pub outer_rounds: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub eta: f64,
    /// Multiplies `eta` after every round; 1 keeps it constant.
    pub eta_decay: f64,
    pub tol: f64,
    pub normalize: bool,
    /// Restore the initial model before every atomic update instead of
    /// carrying the adapted parameters forward.
    pub reset_theta: bool,
    pub final_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Fraction of training windows held out for early stopping when no
    /// explicit validation set is given.
    pub valid_fraction: f64,
    pub mode: WeightingMode,
    pub seed: u64,
}

impl Default for QdfConfig {
    fn default() -> Self {
        Self {
            k_splits: 3,
            outer_rounds: 50,
            inner_steps: 1,
            inner_lr: 0.1,
            eta: 0.1,
            eta_decay: 1.0,
            tol: 1e-4,
            normalize: true,
            reset_theta: false,
            final_lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            patience: 3,
            valid_fraction: 0.2,
            mode: WeightingMode::Full,
            seed: 0,
        }
    }
}

impl QdfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(QdfError::Config(m.to_string()));
        if self.k_splits == 0 {
            return bad("k_splits must be at least 1");
        }
        if self.outer_rounds == 0 {
            return bad("outer_rounds must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.final_lr > 0.0) {
            return bad("final_lr must be positive");
        }
        if !(self.tol >= 0.0) {
            return bad("tol must be nonnegative");
        }
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return bad("eta_decay must lie in (0, 1]");
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return bad("valid_fraction must lie in (0, 1)");
        }
        self.atomic(self.eta).validate()
    }

    fn atomic(&self, eta: f64) -> AtomicConfig {
        AtomicConfig {
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            eta,
            normalize: self.normalize,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnedWeighting {
    pub weighting: WeightingParams,
    /// `‖Σ_{n+1} − Σ_n‖_F` after each full pass over the blocks.
    pub deltas: Vec<f64>,
    pub converged: bool,
    pub timings: PhaseTimings,
}

/// Learns `Σ` starting from the identity. Each round runs one atomic
/// update per chronological block, in order; the loop stops once a round
/// moves `Σ` by less than `tol` in Frobenius norm, or after
/// `outer_rounds` rounds.
pub fn learn_weighting(
    train: &WindowSet,
    model_init: &LinearForecaster,
    cfg: &QdfConfig,
) -> Result<LearnedWeighting> {
    cfg.validate()?;
    if train.len() < 2 * cfg.k_splits {
        return Err(QdfError::InvalidSplit(format!(
            "{} training windows cannot form {} blocks of inner/outer pairs",
            train.len(),
            cfg.k_splits
        )));
    }
    let blocks = split_even(train, cfg.k_splits)?;
    let pairs: Vec<SplitPair> = blocks
        .iter()
        .map(SplitPair::chronological)
        .collect::<Result<_>>()?;

    let mut w = WeightingParams::identity(train.horizon(), cfg.mode)?;
    let mut theta = model_init.clone();
    let mut deltas = Vec::new();
    let mut timings = PhaseTimings::default();
    let mut eta = cfg.eta;
    let mut converged = false;
    for round in 0..cfg.outer_rounds {
        let before = w.clone();
        for pair in &pairs {
            if cfg.reset_theta {
                theta = model_init.clone();
            }
            let out = atomic_update(&theta, &w, pair, &cfg.atomic(eta))?;
            timings.add(&out.timings);
            theta = out.model;
            w = out.weighting;
        }
        let delta = frobenius_distance(&w, &before)?;
        debug!("round {round}: eta={eta:.3e} delta={delta:.3e}");
        deltas.push(delta);
        if delta < cfg.tol {
            converged = true;
            break;
        }
        eta *= cfg.eta_decay;
    }
    info!(
        "weighting learned in {} rounds (converged: {converged})",
        deltas.len()
    );
    Ok(LearnedWeighting {
        weighting: w,
        deltas,
        converged,
        timings,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: LinearForecaster,
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub best_epoch: usize,
    pub elapsed: Duration,
}

/// Trains on the quadratic form defined by `w` with mini-batch Adam and
/// early stopping.
pub fn train_final(
    train: &WindowSet,
    w: &WeightingParams,
    model_init: &LinearForecaster,
    cfg: &QdfConfig,
    valid: Option<&WindowSet>,
) -> Result<TrainedModel> {
    if w.horizon() != train.horizon() {
        return Err(QdfError::InvalidDimension(format!(
            "weighting horizon {} vs training horizon {}",
            w.horizon(),
            train.horizon()
        )));
    }
    let objective = Objective::quadratic(w.clone())?;
    train_with_objective(train, &objective, model_init, cfg, valid)
}

/// Same loop as [`train_final`] for an arbitrary objective, e.g. plain MSE.
pub fn train_with_objective(
    train: &WindowSet,
    objective: &Objective,
    model_init: &LinearForecaster,
    cfg: &QdfConfig,
    valid: Option<&WindowSet>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let start = Instant::now();
    let (fit, held_out) = match valid {
        Some(v) => (train.clone(), v.clone()),
        None => {
            let f = cfg.valid_fraction;
            let mut parts = chrono_split_windows(train, &[1.0 - f, f], true)?;
            let v = parts.pop().expect("two parts");
            (parts.pop().expect("two parts"), v)
        }
    };
    let (x, y) = fit.to_rows();
    let (xv, yv) = held_out.to_rows();
    let d = fit.variables();
    let mut rng = stream(cfg.seed, Stream::Batch);
    let mut order: Vec<usize> = (0..fit.len()).collect();

    let mut model = model_init.clone();
    let mut adam = Adam::new(model.history(), model.horizon(), cfg.final_lr);
    let valid_loss = |m: &LinearForecaster| {
        let r = &yv - &m.predict_rows(xv.view());
        objective.loss(r.view())
    };
    let mut best = (valid_loss(&model), model.clone(), 0);
    let mut stale = 0;
    let mut train_losses = Vec::new();
    let mut valid_losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<usize> = chunk
                .iter()
                .flat_map(|&wi| (wi * d)..(wi * d + d))
                .collect();
            let xb = x.select(ndarray::Axis(0), &rows);
            let yb = y.select(ndarray::Axis(0), &rows);
            let r = &yb - &model.predict_rows(xb.view());
            epoch_loss += objective.loss(r.view()) * rows.len() as f64;
            seen += rows.len();
            let upstream = objective.grad_residual(r.view()).mapv_into(|v| -v);
            let grads = model.grad_rows(xb.view(), upstream.view());
            adam.step(&mut model, &grads)?;
        }
        train_losses.push(epoch_loss / seen as f64);
        let vl = valid_loss(&model);
        if !vl.is_finite() {
            return Err(QdfError::Numeric(format!("validation loss diverged at epoch {epoch}")));
        }
        valid_losses.push(vl);
        if vl < best.0 {
            best = (vl, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                debug!("early stop at epoch {epoch}, best {}", best.2);
                break;
            }
        }
    }
    Ok(TrainedModel {
        model: best.1,
        train_losses,
        valid_losses,
        best_epoch: best.2,
        elapsed: start.elapsed(),
    })
}

/// Ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain direct forecasting: identity weighting, no learning phase.
    #[serde(rename = "df")]
    Df,
    /// Learned diagonal only.
    #[serde(rename = "qdf-diag")]
    QdfDiag,
    /// Learned off-diagonal only, unit diagonal.
    #[serde(rename = "qdf-offdiag")]
    QdfOffdiag,
    #[serde(rename = "qdf", alias = "qdf-full")]
    QdfFull,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Df,
        Variant::QdfDiag,
        Variant::QdfOffdiag,
        Variant::QdfFull,
    ];

    pub fn mode(self) -> Option<WeightingMode> {
        match self {
            Variant::Df => None,
            Variant::QdfDiag => Some(WeightingMode::DiagOnly),
            Variant::QdfOffdiag => Some(WeightingMode::OffDiagOnly),
            Variant::QdfFull => Some(WeightingMode::Full),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Df => "df",
            Variant::QdfDiag => "qdf-diag",
            Variant::QdfOffdiag => "qdf-offdiag",
            Variant::QdfFull => "qdf",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = QdfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "df" => Ok(Variant::Df),
            "qdf" | "qdf-full" => Ok(Variant::QdfFull),
            "qdf-diag" => Ok(Variant::QdfDiag),
            "qdf-offdiag" => Ok(Variant::QdfOffdiag),
            other => Err(QdfError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Gaussian NLL per (window, variable) under the learned weighting.
    pub nll: f64,
}

/// Phase durations in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingsMs {
    pub inner_fwd: f64,
    pub inner_bwd: f64,
    pub outer_fwd: f64,
    pub outer_bwd: f64,
    pub final_train: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMedians {
    pub inner_fwd: f64,
    pub inner_bwd: f64,
    pub outer_fwd: f64,
    pub outer_bwd: f64,
}

/// Step counts behind [`TimingsMs`], for per-step costs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepCounts {
    pub inner_steps: usize,
    pub outer_steps: usize,
    pub final_epochs: usize,
}

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub variant: Variant,
    pub seed: u64,
    pub config: serde_json::Value,
    pub metrics: Metrics,
    pub sigma_path: Option<String>,
    pub timings_ms: TimingsMs,
    /// Median single-step duration of each learning phase.
    pub step_median_ms: StepMedians,
    pub steps: StepCounts,
    pub deltas: Vec<f64>,
}

impl RunReport {
    /// Per-step cost of each learning phase, in milliseconds.
    pub fn per_step_ms(&self) -> [f64; 4] {
        let per = |ms: f64, n: usize| if n == 0 { 0.0 } else { ms / n as f64 };
        let t = &self.timings_ms;
        [
            per(t.inner_fwd, self.steps.inner_steps),
            per(t.inner_bwd, self.steps.inner_steps),
            per(t.outer_fwd, self.steps.outer_steps),
            per(t.outer_bwd, self.steps.outer_steps),
        ]
    }

    pub fn median_step_ms(&self) -> [f64; 4] {
        let m = &self.step_median_ms;
        [m.inner_fwd, m.inner_bwd, m.outer_fwd, m.outer_bwd]
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub report: RunReport,
    pub model: LinearForecaster,
    pub weighting: WeightingParams,
    /// Reads of the test windows that happened before evaluation began.
    pub test_reads_during_training: usize,
}

/// Evaluates `model` on `windows`: per-element MSE/MAE and NLL under `w`.
pub fn evaluate(
    model: &LinearForecaster,
    windows: &WindowSet,
    w: &WeightingParams,
) -> Result<Metrics> {
    let (x, y) = windows.to_rows();
    let r: Array2<f64> = &y - &model.predict_rows(x.view());
    let objective = Objective::quadratic(w.clone())?;
    Ok(Metrics {
        mse: mse_per_element(r.view()),
        mae: mae(r.view()),
        nll: objective.gaussian_nll(r.view()),
    })
}

/// Runs one ablation arm end to end. `valid` feeds early stopping; the
/// test windows are only read for the final metrics.
pub fn run_variant(
    train: &WindowSet,
    valid: Option<&WindowSet>,
    test: &WindowSet,
    variant: Variant,
    cfg: &QdfConfig,
) -> Result<VariantRun> {
    cfg.validate()?;
    let test_reads_at_start = test.reads();
    let mut init_rng = stream(cfg.seed, Stream::Init);
    let init = LinearForecaster::init_uniform(train.history(), train.horizon(), &mut init_rng);

    let (weighting, deltas, learn_timings) = match variant.mode() {
        None => (
            WeightingParams::identity(train.horizon(), WeightingMode::Full)?,
            Vec::new(),
            PhaseTimings::default(),
        ),
        Some(mode) => {
            let c = QdfConfig {
                mode,
                ..cfg.clone()
            };
            let learned = learn_weighting(train, &init, &c)?;
            (learned.weighting, learned.deltas, learned.timings)
        }
    };
    let trained = train_final(train, &weighting, &init, cfg, valid)?;
    let test_reads_during_training = test.reads() - test_reads_at_start;
    let metrics = evaluate(&trained.model, test, &weighting)?;
    if !(metrics.mse.is_finite() && metrics.mae.is_finite() && metrics.nll.is_finite()) {
        return Err(QdfError::Numeric("test metrics are not finite".into()));
    }

    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    let report = RunReport {
        schema: REPORT_SCHEMA,
        variant,
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        metrics,
        sigma_path: None,
        timings_ms: TimingsMs {
            inner_fwd: ms(learn_timings.inner_fwd),
            inner_bwd: ms(learn_timings.inner_bwd),
            outer_fwd: ms(learn_timings.outer_fwd),
            outer_bwd: ms(learn_timings.outer_bwd),
            final_train: ms(trained.elapsed),
        },
        step_median_ms: {
            let [a, b, c, d] = learn_timings.medians();
            StepMedians {
                inner_fwd: ms(a),
                inner_bwd: ms(b),
                outer_fwd: ms(c),
                outer_bwd: ms(d),
            }
        },
        steps: StepCounts {
            inner_steps: learn_timings.inner_steps,
            outer_steps: learn_timings.outer_steps,
            final_epochs: trained.valid_losses.len(),
        },
        deltas,
    };
    Ok(VariantRun {
        report,
        model: trained.model,
        weighting,
        test_reads_during_training,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_ar, make_windows, ArSpec, NoiseSchedule, SeriesFrame};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ar_windows(n: usize, h: usize, t: usize, seed: u64) -> WindowSet {
        let spec = ArSpec::new(vec![0.6], NoiseSchedule::Constant { std: 1.0 }, n, seed).unwrap();
        make_windows(&gen_ar(&spec).unwrap(), h, t).unwrap()
    }

    fn small_cfg() -> QdfConfig {
        QdfConfig {
            outer_rounds: 5,
            epochs: 20,
            seed: 3,
            ..QdfConfig::default()
        }
    }

    #[test]
    fn eta_zero_halts_after_one_round_at_identity() {
        let ws = ar_windows(400, 6, 3, 1);
        let init = LinearForecaster::zeros(6, 3);
        let cfg = QdfConfig {
            eta: 0.0,
            ..small_cfg()
        };
        let out = learn_weighting(&ws, &init, &cfg).unwrap();
        assert_eq!(out.deltas, vec![0.0]);
        assert_eq!(out.weighting, WeightingParams::identity(3, WeightingMode::Full).unwrap());
        assert!(out.converged);
    }

    #[test]
    fn single_block_single_round_is_one_atomic_update() {
        let ws = ar_windows(300, 5, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = LinearForecaster::init_uniform(5, 2, &mut rng);
        let cfg = QdfConfig {
            k_splits: 1,
            outer_rounds: 1,
            inner_steps: 1,
            ..small_cfg()
        };
        let out = learn_weighting(&ws, &init, &cfg).unwrap();
        assert_eq!(out.timings.outer_steps, 1);
        assert_eq!(out.timings.inner_steps, 1);

        let pair = SplitPair::chronological(&split_even(&ws, 1).unwrap()[0]).unwrap();
        let w0 = WeightingParams::identity(2, WeightingMode::Full).unwrap();
        let direct = atomic_update(&init, &w0, &pair, &cfg.atomic(cfg.eta)).unwrap();
        assert_eq!(direct.weighting, out.weighting);
    }

    #[test]
    fn too_few_windows_for_blocks() {
        let ws = ar_windows(12, 3, 2, 3);
        let init = LinearForecaster::zeros(3, 2);
        let cfg = QdfConfig {
            k_splits: 5,
            ..small_cfg()
        };
        assert!(matches!(
            learn_weighting(&ws, &init, &cfg),
            Err(QdfError::InvalidSplit(_))
        ));
    }

    #[test]
    fn loop_never_exceeds_outer_rounds() {
        let ws = ar_windows(600, 6, 4, 4);
        let init = LinearForecaster::zeros(6, 4);
        let cfg = QdfConfig {
            outer_rounds: 3,
            tol: 0.0,
            ..small_cfg()
        };
        let out = learn_weighting(&ws, &init, &cfg).unwrap();
        assert_eq!(out.deltas.len(), 3);
        assert!(!out.converged);
        assert!(out.deltas.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn identity_weighting_trains_bitwise_like_mse() {
        let ws = ar_windows(500, 8, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = LinearForecaster::init_uniform(8, 4, &mut rng);
        let cfg = small_cfg();
        let id = WeightingParams::identity(4, WeightingMode::Full).unwrap();
        let a = train_final(&ws, &id, &init, &cfg, None).unwrap();
        let b = train_with_objective(&ws, &Objective::Mse, &init, &cfg, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.valid_losses, b.valid_losses);
    }

    #[test]
    fn noiseless_linear_process_is_fit_under_any_weighting() {
        // y_{t} = 0.5·y_{t−1} − 0.2·y_{t−2} exactly, from random starts.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 600;
        let mut v = vec![0.0; n];
        for i in 0..n {
            v[i] = if i % 50 < 2 {
                rng.random_range(-1.0..1.0)
            } else {
                0.5 * v[i - 1] - 0.2 * v[i - 2]
            };
        }
        let frame =
            SeriesFrame::new(Array2::from_shape_vec((n, 1), v).unwrap(), vec!["v".into()], "t")
                .unwrap();
        let all = make_windows(&frame, 4, 3).unwrap();
        // Keep windows that do not cross a restart.
        let keep: Vec<usize> = (0..all.len())
            .filter(|&i| {
                let (s, e) = all.span(i);
                (s + 2..=e).all(|j| j % 50 >= 2)
            })
            .collect();
        let ws = all.subset(&keep);
        let raw = Array2::from_shape_fn((3, 3), |(i, j)| if i >= j { 0.3 } else { 0.0 });
        let w = WeightingParams::from_raw(raw, WeightingMode::Full).unwrap();
        let cfg = QdfConfig {
            final_lr: 1e-2,
            epochs: 3000,
            patience: 3000,
            batch_size: 16,
            ..small_cfg()
        };
        let trained = train_final(&ws, &w, &LinearForecaster::zeros(4, 3), &cfg, None).unwrap();
        let last = *trained.train_losses.last().unwrap();
        let (x, y) = ws.to_rows();
        let r = &y - &trained.model.predict_rows(x.view());
        let loss = Objective::quadratic(w).unwrap().loss(r.view());
        assert!(loss < 1e-6, "final loss {loss}, last epoch {last}");
    }

    #[test]
    fn df_equals_qdf_with_zero_eta() {
        let ws = ar_windows(900, 8, 4, 6);
        let parts = chrono_split_windows(&ws, &[0.7, 0.3], true).unwrap();
        let (train, test) = (&parts[0], &parts[1]);
        let cfg = small_cfg();
        let df = run_variant(train, None, test, Variant::Df, &cfg).unwrap();
        let zero = QdfConfig {
            eta: 0.0,
            ..cfg.clone()
        };
        let q = run_variant(train, None, test, Variant::QdfFull, &zero).unwrap();
        assert_eq!(df.model, q.model);
        assert_eq!(df.report.metrics, q.report.metrics);
    }

    #[test]
    fn test_windows_are_not_read_before_evaluation() {
        let ws = ar_windows(900, 8, 4, 7);
        let parts = chrono_split_windows(&ws, &[0.7, 0.3], true).unwrap();
        // Separate counters, so training reads cannot be mistaken for test reads.
        let (train, test) = (parts[0].detached(), parts[1].detached());
        let run = run_variant(&train, None, &test, Variant::QdfFull, &small_cfg()).unwrap();
        assert_eq!(run.test_reads_during_training, 0);
        assert!(train.reads() > 0);
        assert!(test.reads() > 0);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("xyz".parse::<Variant>().is_err());
    }
}
