//! Partial correlation and conditional variance of label steps given the
//! history, from OLS residuals.
//!
//! Each label step `Y_t` is regressed on `[1, X]` once; the partial
//! correlation of steps `t` and `t'` is the Pearson correlation of the two
//! residual vectors, and the conditional variance of step `t` is the
//! variance of its residuals.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, SeriesFrame, WindowSet};
use crate::error::{QdfError, Result};
use crate::linalg;
use crate::rng::{stream, Stream};

pub const RIDGE_FALLBACK: f64 = 1e-8;
const MIN_RESIDUAL_VAR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub rho: f64,
    /// The normal equations needed the ridge fallback.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub history: usize,
    pub horizon: usize,
    pub samples: usize,
    pub variable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialCorrReport {
    pub matrix: Array2<f64>,
    pub cond_var: Vec<f64>,
    pub meta: ReportMeta,
    pub degraded: bool,
    /// Pairs whose residual variance vanished; their entry is reported as 0.
    pub undefined_pairs: Vec<(usize, usize)>,
}

/// `[1, X flattened]` for every window, one row per window.
fn design(windows: &WindowSet) -> Array2<f64> {
    let n = windows.len();
    let p = windows.history() * windows.variables();
    let mut out = Array2::zeros((n, p + 1));
    for i in 0..n {
        let (x, _) = windows.window(i);
        out[[i, 0]] = 1.0;
        for (k, v) in x.iter().enumerate() {
            out[[i, k + 1]] = *v;
        }
    }
    out
}

fn labels(windows: &WindowSet, variable: usize) -> Array2<f64> {
    let n = windows.len();
    let mut out = Array2::zeros((n, windows.horizon()));
    for i in 0..n {
        let (_, y) = windows.window(i);
        out.row_mut(i).assign(&y.column(variable));
    }
    out
}

fn check_variable(windows: &WindowSet, variable: usize) -> Result<()> {
    if variable >= windows.variables() {
        return Err(QdfError::InvalidDimension(format!(
            "variable {variable} out of range for {} variables",
            windows.variables()
        )));
    }
    Ok(())
}

fn check_samples(n: usize, params: usize) -> Result<()> {
    if n < params + 2 {
        return Err(QdfError::InsufficientData(format!(
            "{n} samples for a regression with {params} coefficients"
        )));
    }
    Ok(())
}

fn residuals(design: &Array2<f64>, targets: &Array2<f64>) -> Result<(Array2<f64>, bool)> {
    let (beta, degraded) = linalg::least_squares(design.view(), targets.view(), RIDGE_FALLBACK)?;
    Ok((targets - &design.dot(&beta), degraded))
}

fn variance(r: ArrayView1<'_, f64>) -> f64 {
    let m = r.mean().unwrap_or(0.0);
    r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / r.len() as f64
}

fn pearson(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let (ma, mb) = (a.mean()?, b.mean()?);
    let n = a.len() as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa / n < MIN_RESIDUAL_VAR || sbb / n < MIN_RESIDUAL_VAR {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Partial correlation of label steps `t` and `t2` of `variable`, given
/// the full history of every variable.
pub fn partial_correlation(
    windows: &WindowSet,
    t: usize,
    t2: usize,
    variable: usize,
) -> Result<PairEstimate> {
    check_variable(windows, variable)?;
    let horizon = windows.horizon();
    if t == t2 || t >= horizon || t2 >= horizon {
        return Err(QdfError::InvalidDimension(format!(
            "steps ({t}, {t2}) must be distinct and below {horizon}"
        )));
    }
    let x = design(windows);
    check_samples(x.nrows(), x.ncols())?;
    let y = labels(windows, variable);
    let (ra, da) = residuals(&x, &y.slice(s![.., t..t + 1]).to_owned())?;
    let (rb, db) = residuals(&x, &y.slice(s![.., t2..t2 + 1]).to_owned())?;
    let rho = pearson(ra.column(0), rb.column(0)).ok_or_else(|| {
        QdfError::UndefinedCorrelation(format!("residuals of step {t} or {t2} have no variance"))
    })?;
    Ok(PairEstimate {
        rho,
        degraded: da || db,
    })
}

/// Full `T × T` partial-correlation matrix from one regression per step.
pub fn partial_corr_windows(windows: &WindowSet, variable: usize) -> Result<PartialCorrReport> {
    check_variable(windows, variable)?;
    let x = design(windows);
    check_samples(x.nrows(), x.ncols())?;
    let y = labels(windows, variable);
    let (r, degraded) = residuals(&x, &y)?;
    let t = windows.horizon();
    let mut matrix = Array2::eye(t);
    let mut undefined = Vec::new();
    for i in 0..t {
        for j in (i + 1)..t {
            match pearson(r.column(i), r.column(j)) {
                Some(rho) => {
                    matrix[[i, j]] = rho;
                    matrix[[j, i]] = rho;
                }
                None => undefined.push((i, j)),
            }
        }
    }
    let cond_var = r.axis_iter(Axis(1)).map(variance).collect();
    Ok(PartialCorrReport {
        matrix,
        cond_var,
        meta: ReportMeta {
            history: windows.history(),
            horizon: t,
            samples: windows.len(),
            variable,
        },
        degraded,
        undefined_pairs: undefined,
    })
}

/// Windows of `frame` with regression history `history` and horizon
/// `horizon`, subsampled (seeded, order-preserving) to at most `subsample`
/// windows, then reduced to a partial-correlation report.
pub fn partial_corr_matrix(
    frame: &SeriesFrame,
    history: usize,
    horizon: usize,
    subsample: usize,
    variable: usize,
    seed: u64,
) -> Result<PartialCorrReport> {
    let all = make_windows(frame, history, horizon)?;
    let windows = if subsample > 0 && all.len() > subsample {
        let mut rng = stream(seed, Stream::Data);
        let mut idx = sample(&mut rng, all.len(), subsample).into_vec();
        idx.sort_unstable();
        all.subset(&idx)
    } else {
        all
    };
    partial_corr_windows(&windows, variable)
}

/// Share of off-diagonal entries whose magnitude exceeds `threshold`.
pub fn fraction_above(report: &PartialCorrReport, threshold: f64) -> f64 {
    let t = report.matrix.nrows();
    if t < 2 {
        return 0.0;
    }
    let count = report
        .matrix
        .indexed_iter()
        .filter(|((i, j), v)| i != j && v.abs() > threshold)
        .count();
    count as f64 / (t * (t - 1)) as f64
}

/// Correlation matrix implied by a covariance matrix.
pub fn correlation_from_cov(cov: &Array2<f64>) -> Array2<f64> {
    let d: Array1<f64> = cov.diag().mapv(f64::sqrt);
    Array2::from_shape_fn(cov.raw_dim(), |(i, j)| cov[[i, j]] / (d[i] * d[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_ar, ArSpec, NoiseSchedule};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn report_with(matrix: Array2<f64>) -> PartialCorrReport {
        let t = matrix.nrows();
        PartialCorrReport {
            matrix,
            cond_var: vec![1.0; t],
            meta: ReportMeta {
                history: 1,
                horizon: t,
                samples: 10,
                variable: 0,
            },
            degraded: false,
            undefined_pairs: vec![],
        }
    }

    fn random_windows(seed: u64, n: usize, h: usize, t: usize) -> WindowSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array2::from_shape_fn((n + h + t - 1, 1), |_| rng.random_range(-1.0..1.0));
        let frame = SeriesFrame::new(v, vec!["v".into()], "t").unwrap();
        make_windows(&frame, h, t).unwrap()
    }

    #[test]
    fn fraction_above_examples() {
        assert_eq!(fraction_above(&report_with(Array2::eye(4)), 0.1), 0.0);
        let all = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.5 });
        assert_eq!(fraction_above(&report_with(all), 0.1), 1.0);
        let mixed = array![
            [1.0, 0.5, 0.05, 0.2],
            [0.5, 1.0, 0.0, -0.3],
            [0.05, 0.0, 1.0, 0.01],
            [0.2, -0.3, 0.01, 1.0]
        ];
        assert_eq!(fraction_above(&report_with(mixed), 0.1), 0.5);
    }

    #[test]
    fn equal_steps_rejected_and_diagonal_is_one() {
        let ws = random_windows(1, 50, 3, 3);
        assert!(matches!(
            partial_correlation(&ws, 1, 1, 0),
            Err(QdfError::InvalidDimension(_))
        ));
        let rep = partial_corr_windows(&ws, 0).unwrap();
        assert!(rep.matrix.diag().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn too_few_samples() {
        let ws = random_windows(2, 5, 4, 2);
        assert!(matches!(
            partial_correlation(&ws, 0, 1, 0),
            Err(QdfError::InsufficientData(_))
        ));
    }

    #[test]
    fn constant_residuals_are_undefined() {
        // Labels are an exact linear function of the history.
        let v = Array2::from_shape_fn((60, 1), |(i, _)| i as f64);
        let frame = SeriesFrame::new(v, vec!["v".into()], "t").unwrap();
        let ws = make_windows(&frame, 2, 2).unwrap();
        let err = partial_correlation(&ws, 0, 1, 0).unwrap_err();
        assert!(matches!(err, QdfError::UndefinedCorrelation(_)), "{err:?}");
    }

    #[test]
    fn rank_deficient_history_uses_ridge() {
        // Every window sees the same constant history column.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Array2::from_shape_fn((80, 2), |(_, j)| {
            if j == 0 {
                1.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let frame = SeriesFrame::new(v, vec!["c".into(), "r".into()], "t").unwrap();
        let ws = make_windows(&frame, 2, 2).unwrap();
        let est = partial_correlation(&ws, 0, 1, 1).unwrap();
        assert!(est.degraded);
        assert!(est.rho.abs() <= 1.0);
    }

    #[test]
    fn independent_labels_give_small_coefficient() {
        // Y_t = a·mean(X) + independent noise.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, h, t) = (5000, 4, 3);
        let xs = Array2::from_shape_fn((n, h), |_| rng.random_range(-1.0..1.0));
        let mut frame_rows = Vec::new();
        for i in 0..n {
            let m = xs.row(i).mean().unwrap();
            let mut row: Vec<f64> = xs.row(i).to_vec();
            for _ in 0..t {
                row.push(0.8 * m + rng.random_range(-1.0..1.0));
            }
            frame_rows.push(row);
        }
        // One non-overlapping window per row block.
        let flat: Vec<f64> = frame_rows.into_iter().flatten().collect();
        let v = Array2::from_shape_vec((n * (h + t), 1), flat).unwrap();
        let frame = SeriesFrame::new(v, vec!["v".into()], "t").unwrap();
        let ws = crate::data::make_windows_strided(&frame, h, t, h + t, 0).unwrap();
        assert_eq!(ws.len(), n);
        let est = partial_correlation(&ws, 0, 2, 0).unwrap();
        assert!(est.rho.abs() < 0.05, "rho {}", est.rho);
    }

    #[test]
    fn ar1_adjacent_steps() {
        let spec = ArSpec::new(vec![0.5], NoiseSchedule::Constant { std: 1.0 }, 5000 + 7, 21)
            .unwrap();
        let frame = gen_ar(&spec).unwrap();
        let rep = partial_corr_matrix(&frame, 4, 4, 5000, 0, 0).unwrap();
        assert_eq!(rep.meta.samples, 5000);
        let expected = 0.5 / 1.25f64.sqrt();
        assert!((rep.matrix[[0, 1]] - expected).abs() < 0.05, "{}", rep.matrix[[0, 1]]);
    }

    #[test]
    fn ar08_superdiagonal_positive_and_decaying() {
        let spec = ArSpec::new(vec![0.8], NoiseSchedule::Constant { std: 1.0 }, 5100, 5).unwrap();
        let frame = gen_ar(&spec).unwrap();
        let rep = partial_corr_matrix(&frame, 8, 6, 5000, 0, 1).unwrap();
        let row: Vec<f64> = (1..6).map(|j| rep.matrix[[0, j]]).collect();
        assert!(row.iter().all(|&v| v > 0.0), "{row:?}");
        assert!(row.windows(2).all(|p| p[1] < p[0]), "{row:?}");
    }

    #[test]
    fn subsample_clamps_to_available() {
        let ws_frame = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let v = Array2::from_shape_fn((120, 1), |_| rng.random_range(-1.0..1.0));
            SeriesFrame::new(v, vec!["v".into()], "t").unwrap()
        };
        let rep = partial_corr_matrix(&ws_frame, 3, 3, 10_000, 0, 0).unwrap();
        assert_eq!(rep.meta.samples, 120 - 6 + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shared_residuals_equal_pairwise_regressions(
            seed in 0u64..1000, n in 20usize..200, h in 1usize..4, t in 2usize..7
        ) {
            let ws = random_windows(seed, n, h, t);
            let rep = partial_corr_windows(&ws, 0).unwrap();
            for i in 0..t {
                for j in (i + 1)..t {
                    let pair = partial_correlation(&ws, i, j, 0).unwrap();
                    prop_assert!((pair.rho - rep.matrix[[i, j]]).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn report_is_symmetric_and_bounded(seed in 0u64..1000, n in 20usize..150) {
            let ws = random_windows(seed, n, 2, 4);
            let rep = partial_corr_windows(&ws, 0).unwrap();
            for i in 0..4 {
                prop_assert_eq!(rep.matrix[[i, i]], 1.0);
                prop_assert!(rep.cond_var[i] >= 0.0);
                for j in 0..4 {
                    prop_assert_eq!(rep.matrix[[i, j]], rep.matrix[[j, i]]);
                    prop_assert!(rep.matrix[[i, j]].abs() <= 1.0);
                }
            }
        }
    }
}
