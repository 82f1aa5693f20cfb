//! Series ingestion, standardization, sliding windows, chronological
//! splits, and a seeded AR generator with its exact conditional covariance.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QdfError, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Time-major table of `N` observations of `D` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    pub values: Array2<f64>,
    pub names: Vec<String>,
    pub source: String,
    /// Global index of row 0, kept across slicing so window start indices
    /// stay comparable between splits.
    pub offset: usize,
}

impl SeriesFrame {
    pub fn new(values: Array2<f64>, names: Vec<String>, source: impl Into<String>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(QdfError::InvalidDimension(format!(
                "{} column names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(QdfError::Numeric("series values must be finite".into()));
        }
        Ok(Self {
            values,
            names,
            source: source.into(),
            offset: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn variables(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `start..end`, keeping global indexing.
    pub fn slice(&self, start: usize, end: usize) -> SeriesFrame {
        SeriesFrame {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            names: self.names.clone(),
            source: self.source.clone(),
            offset: self.offset + start,
        }
    }

    /// Keeps only the listed columns.
    pub fn select(&self, columns: &[usize]) -> Result<SeriesFrame> {
        if let Some(&c) = columns.iter().find(|&&c| c >= self.variables()) {
            return Err(QdfError::InvalidDimension(format!(
                "column {c} out of range for {} variables",
                self.variables()
            )));
        }
        Ok(SeriesFrame {
            values: self.values.select(Axis(1), columns),
            names: columns.iter().map(|&c| self.names[c].clone()).collect(),
            source: self.source.clone(),
            offset: self.offset,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    /// Skip the first column (a timestamp in the usual benchmark files).
    pub skip_first_column: bool,
}

/// Reads a comma-separated file with a header row.
pub fn load_csv(path: &Path, options: CsvOptions) -> Result<SeriesFrame> {
    let file = File::open(path).map_err(|e| QdfError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let skip = usize::from(options.skip_first_column);
    let names: Vec<String> = reader
        .headers()?
        .iter()
        .skip(skip)
        .map(|h| h.trim().to_string())
        .collect();
    if names.is_empty() {
        return Err(QdfError::EmptyInput(format!("{} has no data columns", path.display())));
    }
    let d = names.len();
    let mut flat = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // header is row 1
        let row = i + 2;
        if record.len() != d + skip {
            return Err(QdfError::Parse {
                row,
                column: record.len(),
                message: format!("expected {} fields, found {}", d + skip, record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate().skip(skip) {
            let v: f64 = cell.trim().parse().map_err(|_| QdfError::Parse {
                row,
                column: j + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(QdfError::Parse {
                    row,
                    column: j + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            flat.push(v);
        }
        rows += 1;
    }
    let values = Array2::from_shape_vec((rows, d), flat)
        .map_err(|e| QdfError::InvalidDimension(e.to_string()))?;
    SeriesFrame::new(values, names, path.display().to_string())
}

pub fn write_frame_csv(path: &Path, frame: &SeriesFrame) -> Result<()> {
    let file = File::create(path).map_err(|e| QdfError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(&frame.names)?;
    for row in frame.values.outer_iter() {
        w.write_record(row.iter().map(|v| format_f64(*v)))?;
    }
    w.flush().map_err(|e| QdfError::io(path, e))?;
    Ok(())
}

/// Decimal text with 17 significant digits; round-trips exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Plain headerless CSV, row-major, 17 significant digits.
pub fn write_matrix_csv(path: &Path, m: ArrayView2<'_, f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| QdfError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in m.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
        writeln!(out, "{}", line.join(",")).map_err(|e| QdfError::io(path, e))?;
    }
    out.flush().map_err(|e| QdfError::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| QdfError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut flat = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(QdfError::Parse {
                row: i + 1,
                column: record.len(),
                message: "ragged matrix row".into(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            flat.push(cell.trim().parse().map_err(|_| QdfError::Parse {
                row: i + 1,
                column: j + 1,
                message: format!("not a number: {cell:?}"),
            })?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), flat)
        .map_err(|e| QdfError::InvalidDimension(e.to_string()))
}

/// Per-column affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        self.check(frame)?;
        let mut out = frame.clone();
        for (j, mut col) in out.values.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        Ok(out)
    }

    pub fn invert(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        self.check(frame)?;
        let mut out = frame.clone();
        for (j, mut col) in out.values.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| v * self.std[j] + self.mean[j]);
        }
        Ok(out)
    }

    fn check(&self, frame: &SeriesFrame) -> Result<()> {
        if self.mean.len() != frame.variables() {
            return Err(QdfError::InvalidDimension(format!(
                "statistics for {} columns, frame has {}",
                self.mean.len(),
                frame.variables()
            )));
        }
        Ok(())
    }
}

/// Standardizes every column with mean/std computed on rows
/// `stats_from.0..stats_from.1` only. Columns whose std falls under
/// [`STD_FLOOR`] use the floor and are listed in the returned warnings.
pub fn standardize(
    frame: &SeriesFrame,
    stats_from: (usize, usize),
) -> Result<(SeriesFrame, Standardization, Vec<String>)> {
    let (a, b) = stats_from;
    if a >= b || b > frame.len() {
        return Err(QdfError::InvalidSplit(format!(
            "statistics range {a}..{b} invalid for {} rows",
            frame.len()
        )));
    }
    let region = frame.values.slice(s![a..b, ..]);
    let n = (b - a) as f64;
    let mut mean = Vec::with_capacity(frame.variables());
    let mut std = Vec::with_capacity(frame.variables());
    let mut warnings = Vec::new();
    for (j, col) in region.axis_iter(Axis(1)).enumerate() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let mut sd = var.sqrt();
        if !(sd >= STD_FLOOR) {
            warnings.push(format!(
                "column {} ({}) is constant over the statistics range; std floored",
                j, frame.names[j]
            ));
            sd = STD_FLOOR;
        }
        mean.push(m);
        std.push(sd);
    }
    let stats = Standardization { mean, std };
    let out = stats.apply(frame)?;
    Ok((out, stats, warnings))
}

/// Paired history/label windows. `x` is `n × H × D`, `y` is `n × T × D`;
/// `starts[i]` is the global index of the first history step of window `i`.
#[derive(Debug, Clone)]
pub struct WindowSet {
    history: usize,
    horizon: usize,
    x: Array3<f64>,
    y: Array3<f64>,
    starts: Vec<usize>,
    reads: Arc<AtomicUsize>,
}

impl PartialEq for WindowSet {
    fn eq(&self, other: &Self) -> bool {
        self.history == other.history
            && self.horizon == other.horizon
            && self.starts == other.starts
            && self.x == other.x
            && self.y == other.y
    }
}

impl WindowSet {
    pub fn history(&self) -> usize {
        self.history
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn variables(&self) -> usize {
        self.x.len_of(Axis(2))
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// Inclusive range of source indices touched by window `i`.
    pub fn span(&self, i: usize) -> (usize, usize) {
        let s = self.starts[i];
        (s, s + self.history + self.horizon - 1)
    }

    /// Number of times the window contents have been read. Shared with
    /// every subset carved out of this set.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    fn touch(&self) {
        self.reads.fetch_add(1, Ordering::Relaxed);
    }

    /// Window `i` as `(X: H × D, Y: T × D)`.
    pub fn window(&self, i: usize) -> (Array2<f64>, Array2<f64>) {
        self.touch();
        (
            self.x.index_axis(Axis(0), i).to_owned(),
            self.y.index_axis(Axis(0), i).to_owned(),
        )
    }

    /// Row-major samples, one row per (window, variable):
    /// `(X: M × H, Y: M × T)` with `M = n·D`.
    pub fn to_rows(&self) -> (Array2<f64>, Array2<f64>) {
        self.rows_for(&(0..self.len()).collect::<Vec<_>>())
    }

    /// As [`to_rows`](Self::to_rows) for a subset of windows, in the given order.
    pub fn rows_for(&self, windows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        self.touch();
        let d = self.variables();
        let m = windows.len() * d;
        let mut xr = Array2::zeros((m, self.history));
        let mut yr = Array2::zeros((m, self.horizon));
        for (k, &w) in windows.iter().enumerate() {
            for v in 0..d {
                let row = k * d + v;
                xr.row_mut(row).assign(&self.x.slice(s![w, .., v]));
                yr.row_mut(row).assign(&self.y.slice(s![w, .., v]));
            }
        }
        (xr, yr)
    }

    /// Windows `idx`, sharing the read counter with `self`.
    pub fn subset(&self, idx: &[usize]) -> WindowSet {
        WindowSet {
            history: self.history,
            horizon: self.horizon,
            x: self.x.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            starts: idx.iter().map(|&i| self.starts[i]).collect(),
            reads: Arc::clone(&self.reads),
        }
    }

    /// Same windows with labels replaced, one `T × D` matrix per window.
    pub fn with_labels(&self, labels: Vec<Array2<f64>>) -> WindowSet {
        assert_eq!(labels.len(), self.len(), "one label matrix per window");
        let mut y = self.y.clone();
        for (i, lab) in labels.iter().enumerate() {
            y.index_axis_mut(Axis(0), i).assign(lab);
        }
        WindowSet {
            y,
            reads: Arc::clone(&self.reads),
            ..self.clone()
        }
    }

    /// Copy with its own read counter.
    pub fn detached(&self) -> WindowSet {
        WindowSet {
            reads: Arc::new(AtomicUsize::new(0)),
            ..self.clone()
        }
    }

    /// Keeps only variable `v`.
    pub fn variable(&self, v: usize) -> Result<WindowSet> {
        if v >= self.variables() {
            return Err(QdfError::InvalidDimension(format!(
                "variable {v} out of range for {} variables",
                self.variables()
            )));
        }
        Ok(WindowSet {
            history: self.history,
            horizon: self.horizon,
            x: self.x.slice(s![.., .., v..v + 1]).to_owned(),
            y: self.y.slice(s![.., .., v..v + 1]).to_owned(),
            starts: self.starts.clone(),
            reads: Arc::clone(&self.reads),
        })
    }

    /// True when no source index is shared between the two sets.
    pub fn disjoint_from(&self, other: &WindowSet) -> bool {
        let range = |w: &WindowSet| {
            (0..w.len())
                .map(|i| w.span(i))
                .fold((usize::MAX, 0), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)))
        };
        if self.is_empty() || other.is_empty() {
            return true;
        }
        let (a0, a1) = range(self);
        let (b0, b1) = range(other);
        if a1 < b0 || b1 < a0 {
            return true;
        }
        // Overlapping hulls: fall back to a pairwise check.
        (0..self.len()).all(|i| {
            let (s0, s1) = self.span(i);
            (0..other.len()).all(|j| {
                let (t0, t1) = other.span(j);
                s1 < t0 || t1 < s0
            })
        })
    }
}

/// All stride-1 windows: `N − H − T + 1` of them.
pub fn make_windows(frame: &SeriesFrame, history: usize, horizon: usize) -> Result<WindowSet> {
    make_windows_strided(frame, history, horizon, 1, 0)
}

/// Windows whose first history step `s` (frame-local) satisfies
/// `s ≡ phase (mod stride)`.
pub fn make_windows_strided(
    frame: &SeriesFrame,
    history: usize,
    horizon: usize,
    stride: usize,
    phase: usize,
) -> Result<WindowSet> {
    if history == 0 || horizon == 0 || stride == 0 {
        return Err(QdfError::InvalidDimension(
            "history, horizon and stride must be positive".into(),
        ));
    }
    let n = frame.len();
    if n < history + horizon {
        return Err(QdfError::InsufficientData(format!(
            "{n} rows cannot hold a window of {history} + {horizon} steps"
        )));
    }
    let d = frame.variables();
    let local: Vec<usize> = (0..=n - history - horizon)
        .filter(|s| s % stride == phase % stride)
        .collect();
    let count = local.len();
    let mut x = Array3::zeros((count, history, d));
    let mut y = Array3::zeros((count, horizon, d));
    for (k, &s0) in local.iter().enumerate() {
        x.index_axis_mut(Axis(0), k)
            .assign(&frame.values.slice(s![s0..s0 + history, ..]));
        y.index_axis_mut(Axis(0), k)
            .assign(&frame.values.slice(s![s0 + history..s0 + history + horizon, ..]));
    }
    Ok(WindowSet {
        history,
        horizon,
        x,
        y,
        starts: local.iter().map(|s| s + frame.offset).collect(),
        reads: Arc::new(AtomicUsize::new(0)),
    })
}

fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(QdfError::InvalidSplit("fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(QdfError::InvalidSplit(format!("fractions sum to {total}, not 1")));
    }
    Ok(())
}

/// Cumulative boundaries `0 = b₀ ≤ … ≤ b_k = n` from rounded fractions.
fn boundaries(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut acc = 0.0;
    let mut out = vec![0];
    for (i, f) in fractions.iter().enumerate() {
        acc += f;
        let b = if i + 1 == fractions.len() {
            n
        } else {
            ((acc * n as f64).round() as usize).min(n)
        };
        out.push(b);
    }
    out
}

/// Contiguous row blocks of a frame in order.
pub fn chrono_split_frame(frame: &SeriesFrame, fractions: &[f64]) -> Result<Vec<SeriesFrame>> {
    validate_fractions(fractions)?;
    let b = boundaries(frame.len(), fractions);
    let parts: Vec<SeriesFrame> = b.windows(2).map(|w| frame.slice(w[0], w[1])).collect();
    if let Some(i) = parts.iter().position(|p| p.is_empty()) {
        return Err(QdfError::InvalidSplit(format!("part {i} received no rows")));
    }
    Ok(parts)
}

/// Contiguous window blocks in order, sized by `fractions` of the window
/// count. With `purge`, each later block drops leading windows that share
/// source indices with the block before it, so blocks are time-disjoint.
pub fn chrono_split_windows(
    windows: &WindowSet,
    fractions: &[f64],
    purge: bool,
) -> Result<Vec<WindowSet>> {
    validate_fractions(fractions)?;
    let b = boundaries(windows.len(), fractions);
    let mut parts = Vec::with_capacity(fractions.len());
    let mut prev_end: Option<usize> = None;
    for (k, w) in b.windows(2).enumerate() {
        let mut idx: Vec<usize> = (w[0]..w[1]).collect();
        if purge {
            if let Some(end) = prev_end {
                idx.retain(|&i| windows.starts[i] > end);
            }
        }
        if idx.is_empty() {
            return Err(QdfError::InvalidSplit(format!(
                "part {k} of {} received no windows",
                fractions.len()
            )));
        }
        prev_end = idx.iter().map(|&i| windows.span(i).1).max();
        parts.push(windows.subset(&idx));
    }
    Ok(parts)
}

/// `K` equal chronological, time-disjoint blocks.
pub fn split_even(windows: &WindowSet, k: usize) -> Result<Vec<WindowSet>> {
    if k == 0 {
        return Err(QdfError::InvalidSplit("need at least one block".into()));
    }
    chrono_split_windows(windows, &vec![1.0 / k as f64; k], true)
}

/// Innovation scale over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    Constant { std: f64 },
    /// Periodic with period `history + horizon`: `base` over the first
    /// `history` steps of each period, then a linear ramp from `start` to
    /// `end` across the remaining `horizon` steps. Windows whose history
    /// begins at a period boundary see the ramp exactly on their labels.
    Ramp {
        base: f64,
        start: f64,
        end: f64,
        history: usize,
        horizon: usize,
    },
}

impl NoiseSchedule {
    /// Innovation std at post-burn-in time `t` (may be negative).
    pub fn std_at(&self, t: i64) -> f64 {
        match *self {
            NoiseSchedule::Constant { std } => std,
            NoiseSchedule::Ramp {
                base,
                history,
                horizon,
                ..
            } => {
                let period = (history + horizon) as i64;
                let p = t.rem_euclid(period) as usize;
                if p < history {
                    base
                } else {
                    self.label_std(p - history).unwrap_or(base)
                }
            }
        }
    }

    /// Innovation std at label step `k` (0-based) of a period-aligned window.
    pub fn label_std(&self, k: usize) -> Option<f64> {
        match *self {
            NoiseSchedule::Constant { std } => Some(std),
            NoiseSchedule::Ramp {
                start,
                end,
                horizon,
                ..
            } => {
                if k >= horizon {
                    return None;
                }
                if horizon == 1 {
                    return Some(start);
                }
                Some(start + (end - start) * k as f64 / (horizon - 1) as f64)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSchedule::Constant { std } => std > 0.0 && std.is_finite(),
            NoiseSchedule::Ramp {
                base,
                start,
                end,
                horizon,
                ..
            } => [base, start, end].iter().all(|v| *v > 0.0 && v.is_finite()) && horizon > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(QdfError::Spec("noise scales must be positive and finite".into()))
        }
    }
}

/// Synthetic AR(p) process `x_t = Σ φ_k x_{t−k} + σ_t ε_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArSpec {
    pub coeffs: Vec<f64>,
    pub noise: NoiseSchedule,
    pub length: usize,
    pub seed: u64,
    /// Independent realizations, one per column.
    #[serde(default = "one")]
    pub variables: usize,
}

fn one() -> usize {
    1
}

impl ArSpec {
    pub fn new(coeffs: Vec<f64>, noise: NoiseSchedule, length: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            coeffs,
            noise,
            length,
            seed,
            variables: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_variables(mut self, variables: usize) -> Self {
        self.variables = variables;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.variables == 0 {
            return Err(QdfError::Spec("need at least one variable".into()));
        }
        if !is_stationary(&self.coeffs) {
            return Err(QdfError::Spec(format!(
                "AR coefficients {:?} are not stationary",
                self.coeffs
            )));
        }
        Ok(())
    }

    /// MA(∞) weights `ψ₀ … ψ_{n−1}`.
    pub fn ma_weights(&self, n: usize) -> Vec<f64> {
        let mut psi = vec![0.0; n];
        if n > 0 {
            psi[0] = 1.0;
        }
        for j in 1..n {
            psi[j] = self
                .coeffs
                .iter()
                .enumerate()
                .take(j)
                .map(|(k, phi)| phi * psi[j - k - 1])
                .sum();
        }
        psi
    }
}

/// Stationarity via the Durbin–Levinson step-down recursion: every partial
/// autocorrelation must lie strictly inside (−1, 1).
pub fn is_stationary(coeffs: &[f64]) -> bool {
    if coeffs.iter().any(|c| !c.is_finite()) {
        return false;
    }
    let mut a = coeffs.to_vec();
    while let Some(&k) = a.last() {
        if k.abs() >= 1.0 {
            return false;
        }
        let p = a.len();
        let denom = 1.0 - k * k;
        a = (0..p - 1)
            .map(|j| (a[j] + k * a[p - 2 - j]) / denom)
            .collect();
    }
    true
}

/// Seeded realization of `spec`; the first `10·p` samples are discarded.
pub fn gen_ar(spec: &ArSpec) -> Result<SeriesFrame> {
    spec.validate()?;
    let p = spec.coeffs.len();
    let burn = 10 * p;
    let total = burn + spec.length;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Array2::zeros((spec.length, spec.variables));
    for v in 0..spec.variables {
        let mut x = vec![0.0; total];
        for i in 0..total {
            let t = i as i64 - burn as i64;
            let eps: f64 = StandardNormal.sample(&mut rng);
            let ar: f64 = (1..=p.min(i)).map(|k| spec.coeffs[k - 1] * x[i - k]).sum();
            x[i] = ar + spec.noise.std_at(t) * eps;
        }
        for i in 0..spec.length {
            values[[i, v]] = x[burn + i];
        }
    }
    let names = (0..spec.variables).map(|v| format!("x{v}")).collect();
    SeriesFrame::new(values, names, format!("ar(seed={})", spec.seed))
}

/// Covariance of the next `horizon` values given the entire past, for a
/// window aligned with the noise schedule:
/// `C[i][j] = Σ_{k ≤ min(i,j)} ψ_{i−k} ψ_{j−k} σ_k²`.
pub fn ar_conditional_cov(spec: &ArSpec, horizon: usize) -> Result<Array2<f64>> {
    spec.validate()?;
    if horizon == 0 {
        return Err(QdfError::InvalidDimension("horizon must be at least 1".into()));
    }
    let psi = spec.ma_weights(horizon);
    let var: Vec<f64> = (0..horizon)
        .map(|k| {
            spec.noise
                .label_std(k)
                .map(|s| s * s)
                .ok_or_else(|| QdfError::Spec(format!("noise schedule shorter than step {k}")))
        })
        .collect::<Result<_>>()?;
    Ok(Array2::from_shape_fn((horizon, horizon), |(i, j)| {
        (0..=i.min(j)).map(|k| psi[i - k] * psi[j - k] * var[k]).sum()
    }))
}
