//! Synthetic benchmarks and the file-producing commands behind the CLI:
//! `synth`, `train`, `bench`, `diagnose`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    ar_conditional_cov, chrono_split_frame, chrono_split_windows, format_f64, gen_ar, load_csv,
    make_windows, make_windows_strided, standardize, write_frame_csv, write_matrix_csv, ArSpec,
    CsvOptions, NoiseSchedule, SeriesFrame, Standardization, WindowSet,
};
use crate::diagnostics::{fraction_above, partial_corr_matrix, PartialCorrReport};
use crate::error::{QdfError, Result};
use crate::model::{CheckpointHeader, LinearForecaster};
use crate::rng::{derived_seed, stream, Stream};
use crate::weighting::WeightingParams;
use crate::workflow::{evaluate, run_variant, train_final, QdfConfig, RunReport, Variant};

/// Synthetic benchmark families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchKind {
    /// Autocorrelated labels with a variance ramp across the horizon.
    CorrHetero,
    /// Independent labels with a variance ramp.
    Hetero,
    /// Autocorrelated labels, constant variance.
    Corr,
    /// Independent, equal-variance labels.
    White,
}

impl BenchKind {
    pub const ALL: [BenchKind; 4] = [
        BenchKind::CorrHetero,
        BenchKind::Hetero,
        BenchKind::Corr,
        BenchKind::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchKind::CorrHetero => "corr-hetero",
            BenchKind::Hetero => "hetero",
            BenchKind::Corr => "corr",
            BenchKind::White => "white",
        }
    }
}

impl FromStr for BenchKind {
    type Err = QdfError;

    fn from_str(s: &str) -> Result<Self> {
        BenchKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| QdfError::Config(format!("unknown benchmark '{s}'")))
    }
}

/// A seeded AR benchmark whose windows are aligned with the noise period,
/// so every label step has a known innovation scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBench {
    pub kind: BenchKind,
    pub history: usize,
    pub horizon: usize,
    pub windows: usize,
    pub phi: f64,
    /// Innovation variance at the last label step; the first is 1.
    pub var_end: f64,
}

impl SyntheticBench {
    pub fn new(kind: BenchKind) -> Self {
        Self {
            kind,
            history: 16,
            horizon: 8,
            windows: 600,
            phi: 0.8,
            var_end: 3.0,
        }
    }

    pub fn spec(&self, seed: u64) -> Result<ArSpec> {
        let (correlated, ramped) = match self.kind {
            BenchKind::CorrHetero => (true, true),
            BenchKind::Hetero => (false, true),
            BenchKind::Corr => (true, false),
            BenchKind::White => (false, false),
        };
        let coeffs = if correlated { vec![self.phi] } else { vec![] };
        let noise = if ramped {
            NoiseSchedule::Ramp {
                base: 1.0,
                start: 1.0,
                end: self.var_end.sqrt(),
                history: self.history,
                horizon: self.horizon,
            }
        } else {
            NoiseSchedule::Constant { std: 1.0 }
        };
        let length = self.windows * (self.history + self.horizon);
        ArSpec::new(coeffs, noise, length, derived_seed(seed, Stream::Data))
    }

    /// Generates, standardizes on the training rows, and splits 70/10/20.
    pub fn build(&self, seed: u64) -> Result<BenchData> {
        let spec = self.spec(seed)?;
        let raw = gen_ar(&spec)?;
        let period = self.history + self.horizon;
        let train_rows = ((self.windows as f64 * 0.7).round() as usize) * period;
        let (frame, stats, _) = standardize(&raw, (0, train_rows))?;
        let all = make_windows_strided(&frame, self.history, self.horizon, period, 0)?;
        let mut parts = chrono_split_windows(&all, &[0.7, 0.1, 0.2], true)?.into_iter();
        let (train, valid, test) = (
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        );
        let scale = stats.std[0] * stats.std[0];
        let oracle = ar_conditional_cov(&spec, self.horizon)? / scale;
        Ok(BenchData {
            train,
            valid,
            test,
            oracle,
            stats,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchData {
    pub train: WindowSet,
    pub valid: WindowSet,
    pub test: WindowSet,
    /// Conditional covariance of the labels in standardized units.
    pub oracle: Array2<f64>,
    pub stats: Standardization,
}

/// Test NLL under the oracle covariance of a model trained with the oracle
/// weighting and of one trained with plain MSE, from the same init.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub nll_oracle: f64,
    pub nll_mse: f64,
    pub mse_oracle: f64,
    pub mse_mse: f64,
}

pub fn oracle_comparison(data: &BenchData, cfg: &QdfConfig) -> Result<OracleComparison> {
    let t = data.train.horizon();
    let oracle = WeightingParams::from_sigma(data.oracle.view())?;
    let identity = WeightingParams::identity(t, oracle.mode())?;
    let mut rng = stream(cfg.seed, Stream::Init);
    let init = LinearForecaster::init_uniform(data.train.history(), t, &mut rng);
    let with_oracle = train_final(&data.train, &oracle, &init, cfg, Some(&data.valid))?;
    let with_mse = train_final(&data.train, &identity, &init, cfg, Some(&data.valid))?;
    let a = evaluate(&with_oracle.model, &data.test, &oracle)?;
    let b = evaluate(&with_mse.model, &data.test, &oracle)?;
    Ok(OracleComparison {
        nll_oracle: a.nll,
        nll_mse: b.nll,
        mse_oracle: a.mse,
        mse_mse: b.mse,
    })
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq)]
pub struct SynthArgs {
    pub phi: Vec<f64>,
    pub noise: f64,
    /// Ramp the innovation std from `noise` to this value across the
    /// horizon of period-aligned windows.
    pub ramp_to: Option<f64>,
    pub history: usize,
    pub horizon: usize,
    pub n: usize,
    pub variables: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSidecar {
    pub spec: ArSpec,
    pub history: usize,
    pub horizon: usize,
    /// Row-major `horizon × horizon` matrix.
    pub conditional_cov: Vec<Vec<f64>>,
}

/// Path of the oracle JSON written next to a synthetic CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".oracle.json");
    csv.with_file_name(name)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<OracleSidecar> {
    let noise = match args.ramp_to {
        Some(end) => NoiseSchedule::Ramp {
            base: args.noise,
            start: args.noise,
            end,
            history: args.history,
            horizon: args.horizon,
        },
        None => NoiseSchedule::Constant { std: args.noise },
    };
    let spec = ArSpec::new(args.phi.clone(), noise, args.n, args.seed)?.with_variables(args.variables);
    spec.validate()?;
    let frame = gen_ar(&spec)?;
    let cov = ar_conditional_cov(&spec, args.horizon)?;
    write_frame_csv(&args.out, &frame)?;
    let sidecar = OracleSidecar {
        spec,
        history: args.history,
        horizon: args.horizon,
        conditional_cov: cov.outer_iter().map(|r| r.to_vec()).collect(),
    };
    write_json(&sidecar_path(&args.out), &sidecar)?;
    Ok(sidecar)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub skip_first_column: bool,
    /// Explicit validation CSV; otherwise the split is 70/10/20.
    pub valid: Option<PathBuf>,
    pub history: usize,
    pub horizon: usize,
    pub variant: Variant,
    pub config: QdfConfig,
    pub dump_sigma: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunReport> {
    let options = CsvOptions {
        skip_first_column: args.skip_first_column,
    };
    let frame = load_csv(&args.data, options)?;
    let fractions: &[f64] = if args.valid.is_some() {
        &[0.8, 0.2]
    } else {
        &[0.7, 0.1, 0.2]
    };
    let train_rows = chrono_split_frame(&frame, fractions)?[0].len();
    let (std_frame, stats, warnings) = standardize(&frame, (0, train_rows))?;
    for w in &warnings {
        warn!("{w}");
    }
    let parts = chrono_split_frame(&std_frame, fractions)?;
    let windows = |f: &SeriesFrame| make_windows(f, args.history, args.horizon);
    let train = windows(&parts[0])?;
    let (valid, test) = match &args.valid {
        Some(path) => {
            let v = stats.apply(&load_csv(path, options)?)?;
            if v.variables() != frame.variables() {
                return Err(QdfError::InvalidDimension(format!(
                    "validation file has {} columns, training data {}",
                    v.variables(),
                    frame.variables()
                )));
            }
            (windows(&v)?, windows(&parts[1])?)
        }
        None => (windows(&parts[1])?, windows(&parts[2])?),
    };
    info!(
        "{} train / {} valid / {} test windows",
        train.len(),
        valid.len(),
        test.len()
    );
    let run = run_variant(&train, Some(&valid), &test, args.variant, &args.config)?;
    let mut report = run.report;
    if let Some(path) = &args.dump_sigma {
        run.weighting.dump_sigma(path)?;
        report.sigma_path = Some(path.display().to_string());
    }
    if let Some(dir) = &args.checkpoint {
        let header = CheckpointHeader {
            history: args.history,
            horizon: args.horizon,
            variables: frame.variables(),
            standardization: stats,
        };
        run.model.save_checkpoint(dir, &header)?;
    }
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, PartialEq)]
pub struct BenchArgs {
    pub bench: SyntheticBench,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub config: QdfConfig,
    pub parallel: bool,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub nll: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub failed: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub bench: SyntheticBench,
    pub rows: Vec<BenchRow>,
    pub summary: Vec<VariantSummary>,
    /// At least one run failed; its row carries the error.
    pub partial: bool,
}

impl BenchSummary {
    pub fn mean_mse(&self, variant: Variant) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.variant == variant)
            .map(|s| s.mse_mean)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn bench_one(bench: &SyntheticBench, variant: Variant, seed: u64, cfg: &QdfConfig) -> BenchRow {
    let cfg = QdfConfig {
        seed,
        ..cfg.clone()
    };
    let outcome = bench
        .build(seed)
        .and_then(|d| run_variant(&d.train, Some(&d.valid), &d.test, variant, &cfg));
    match outcome {
        Ok(run) => BenchRow {
            variant,
            seed,
            mse: run.report.metrics.mse,
            mae: run.report.metrics.mae,
            nll: run.report.metrics.nll,
            error: None,
        },
        Err(e) => BenchRow {
            variant,
            seed,
            mse: f64::NAN,
            mae: f64::NAN,
            nll: f64::NAN,
            error: Some(e.to_string()),
        },
    }
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchSummary> {
    args.config.validate()?;
    if args.variants.is_empty() || args.seeds.is_empty() {
        return Err(QdfError::Config("need at least one variant and one seed".into()));
    }
    let jobs: Vec<(Variant, u64)> = args
        .variants
        .iter()
        .flat_map(|&v| args.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run = |&(v, s): &(Variant, u64)| bench_one(&args.bench, v, s, &args.config);
    let rows: Vec<BenchRow> = if args.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };
    let summary = args
        .variants
        .iter()
        .map(|&variant| {
            let ok: Vec<&BenchRow> = rows
                .iter()
                .filter(|r| r.variant == variant && r.error.is_none())
                .collect();
            let mse: Vec<f64> = ok.iter().map(|r| r.mse).collect();
            let mae: Vec<f64> = ok.iter().map(|r| r.mae).collect();
            let (mse_mean, mse_std) = mean_std(&mse);
            let (mae_mean, mae_std) = mean_std(&mae);
            VariantSummary {
                variant,
                runs: ok.len(),
                failed: args.seeds.len() - ok.len(),
                mse_mean,
                mse_std,
                mae_mean,
                mae_std,
            }
        })
        .collect();
    let out = BenchSummary {
        bench: args.bench.clone(),
        partial: rows.iter().any(|r| r.error.is_some()),
        rows,
        summary,
    };
    if let Some(dir) = &args.out_dir {
        write_bench(dir, &out)?;
    }
    Ok(out)
}

fn write_bench(dir: &Path, out: &BenchSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| QdfError::io(dir, e))?;
    let rows_path = dir.join("runs.csv");
    let mut w = csv::Writer::from_path(&rows_path).map_err(QdfError::from)?;
    w.write_record(["variant", "seed", "mse", "mae", "nll", "error"])?;
    for r in &out.rows {
        w.write_record([
            r.variant.name().to_string(),
            r.seed.to_string(),
            format_f64(r.mse),
            format_f64(r.mae),
            format_f64(r.nll),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| QdfError::io(&rows_path, e))?;

    let summary_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path).map_err(QdfError::from)?;
    w.write_record(["variant", "runs", "failed", "mse_mean", "mse_std", "mae_mean", "mae_std"])?;
    for s in &out.summary {
        w.write_record([
            s.variant.name().to_string(),
            s.runs.to_string(),
            s.failed.to_string(),
            format_f64(s.mse_mean),
            format_f64(s.mse_std),
            format_f64(s.mae_mean),
            format_f64(s.mae_std),
        ])?;
    }
    w.flush().map_err(|e| QdfError::io(&summary_path, e))?;
    write_json(&dir.join("summary.json"), out)
}

// ------------------------------------------------------------- diagnose

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseArgs {
    pub data: PathBuf,
    pub skip_first_column: bool,
    pub reg_history: usize,
    pub horizon: usize,
    pub subsample: usize,
    pub variable: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Output prefix: writes `<prefix>.csv` and `<prefix>.json`.
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub threshold: f64,
    pub fraction_above: f64,
    pub cond_var: Vec<f64>,
    pub meta: crate::diagnostics::ReportMeta,
    pub degraded: bool,
    pub undefined_pairs: Vec<(usize, usize)>,
    pub matrix_path: String,
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<(PartialCorrReport, DiagnoseSummary)> {
    let frame = load_csv(
        &args.data,
        CsvOptions {
            skip_first_column: args.skip_first_column,
        },
    )?;
    let (frame, _, _) = standardize(&frame, (0, frame.len()))?;
    let report = partial_corr_matrix(
        &frame,
        args.reg_history,
        args.horizon,
        args.subsample,
        args.variable,
        args.seed,
    )?;
    let matrix_path = args.out.with_extension("csv");
    write_matrix_csv(&matrix_path, report.matrix.view())?;
    let summary = DiagnoseSummary {
        threshold: args.threshold,
        fraction_above: fraction_above(&report, args.threshold),
        cond_var: report.cond_var.clone(),
        meta: report.meta.clone(),
        degraded: report.degraded,
        undefined_pairs: report.undefined_pairs.clone(),
        matrix_path: matrix_path.display().to_string(),
    };
    write_json(&args.out.with_extension("json"), &summary)?;
    Ok((report, summary))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| QdfError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| QdfError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_splits_are_aligned_and_disjoint() {
        let bench = SyntheticBench {
            windows: 50,
            ..SyntheticBench::new(BenchKind::CorrHetero)
        };
        let d = bench.build(1).unwrap();
        let period = bench.history + bench.horizon;
        for ws in [&d.train, &d.valid, &d.test] {
            assert!(ws.starts().iter().all(|s| s % period == 0));
        }
        assert!(d.train.disjoint_from(&d.valid) && d.valid.disjoint_from(&d.test));
        assert_eq!(d.train.len() + d.valid.len() + d.test.len(), 50);
        assert_eq!(d.oracle.dim(), (8, 8));
    }

    #[test]
    fn bench_data_is_seeded() {
        let bench = SyntheticBench {
            windows: 20,
            ..SyntheticBench::new(BenchKind::Hetero)
        };
        let a = bench.build(3).unwrap();
        let b = bench.build(3).unwrap();
        let c = bench.build(4).unwrap();
        assert_eq!(a.train.to_rows(), b.train.to_rows());
        assert_ne!(a.train.to_rows(), c.train.to_rows());
    }

    #[test]
    fn white_oracle_is_scaled_identity() {
        let d = SyntheticBench {
            windows: 200,
            ..SyntheticBench::new(BenchKind::White)
        }
        .build(0)
        .unwrap();
        let c = d.oracle[[0, 0]];
        assert!((c - 1.0).abs() < 0.2);
        for ((i, j), v) in d.oracle.indexed_iter() {
            assert_eq!(*v, if i == j { c } else { 0.0 });
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in BenchKind::ALL {
            assert_eq!(k.name().parse::<BenchKind>().unwrap(), k);
        }
        assert!("nope".parse::<BenchKind>().is_err());
    }

    #[test]
    fn sidecar_sits_next_to_csv() {
        assert_eq!(
            sidecar_path(Path::new("/tmp/a/series.csv")),
            PathBuf::from("/tmp/a/series.oracle.json")
        );
    }
}
