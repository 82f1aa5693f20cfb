use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use qdf_core::error::ErrorKind;
use qdf_core::harness::{
    cmd_bench, cmd_diagnose, cmd_synth, cmd_train, BenchArgs, BenchKind, DiagnoseArgs,
    SynthArgs, SyntheticBench, TrainArgs,
};
use qdf_core::workflow::{QdfConfig, Variant};
use qdf_core::QdfError;

#[derive(Parser, Debug)]
#[command(name = "qdf", version, about = "Learned quadratic-form objectives for multi-step forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded AR series plus its oracle conditional covariance.
    Synth(SynthCmd),
    /// Learn the weighting and train one variant on a CSV file.
    Train(TrainCmd),
    /// Run variants × seeds on a synthetic benchmark.
    Bench(BenchCmd),
    /// Partial-correlation matrix of label steps given the history.
    Diagnose(DiagnoseCmd),
}

#[derive(Args, Debug)]
struct SynthCmd {
    /// AR coefficients, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0.5")]
    phi: Vec<f64>,
    /// Innovation standard deviation.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Ramp the innovation std to this value across each label horizon.
    #[arg(long)]
    ramp_to: Option<f64>,
    #[arg(long, default_value_t = 16)]
    history: usize,
    #[arg(long, default_value_t = 8)]
    horizon: usize,
    #[arg(long, default_value_t = 20000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    variables: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synth.csv")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrainingFlags {
    #[arg(long, default_value_t = 3)]
    k_splits: usize,
    #[arg(long, default_value_t = 1)]
    inner_steps: usize,
    #[arg(long, default_value_t = 50)]
    outer_rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    /// Factor applied to eta after every outer round.
    #[arg(long, default_value_t = 1.0)]
    eta_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    inner_lr: f64,
    /// Final-training learning rate (Adam).
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Restore the initial model before every atomic update.
    #[arg(long)]
    reset_theta: bool,
    /// Skip the trace(Σ⁻¹) = T rescaling after each update.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainingFlags {
    fn config(&self) -> QdfConfig {
        QdfConfig {
            k_splits: self.k_splits,
            outer_rounds: self.outer_rounds,
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            eta: self.eta,
            eta_decay: self.eta_decay,
            tol: self.tol,
            normalize: !self.no_normalize,
            reset_theta: self.reset_theta,
            final_lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch,
            patience: self.patience,
            seed: self.seed,
            ..QdfConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    /// Ignore the first CSV column (e.g. a date stamp).
    #[arg(long)]
    skip_date: bool,
    /// Validation CSV for early stopping; otherwise the data is split 70/10/20.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long, default_value_t = 96)]
    history: usize,
    #[arg(long, default_value_t = 96)]
    horizon: usize,
    /// df, qdf, qdf-diag or qdf-offdiag.
    #[arg(long, default_value = "qdf")]
    variant: String,
    #[command(flatten)]
    training: TrainingFlags,
    /// Write the learned Σ as CSV.
    #[arg(long)]
    dump_sigma: Option<PathBuf>,
    /// Write the run report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the trained model to this directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchCmd {
    /// corr-hetero, hetero, corr or white.
    #[arg(long, default_value = "corr-hetero")]
    benchmark: String,
    #[arg(long, default_value_t = 600)]
    windows: usize,
    #[arg(long, default_value_t = 16)]
    history: usize,
    #[arg(long, default_value_t = 8)]
    horizon: usize,
    #[arg(long, default_value_t = 0.8)]
    phi: f64,
    /// Innovation variance at the last label step (the first is 1).
    #[arg(long, default_value_t = 3.0)]
    var_end: f64,
    #[arg(long, value_delimiter = ',', default_value = "df,qdf-diag,qdf-offdiag,qdf")]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[command(flatten)]
    training: TrainingFlags,
    /// Run independent (variant, seed) pairs on a thread pool.
    #[arg(long)]
    parallel: bool,
    /// Directory for runs.csv, summary.csv and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    skip_date: bool,
    #[arg(long, default_value_t = 8)]
    reg_history: usize,
    #[arg(long, default_value_t = 96)]
    horizon: usize,
    #[arg(long, default_value_t = 5000)]
    subsample: usize,
    #[arg(long, default_value_t = 0)]
    variable: usize,
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix for the matrix CSV and summary JSON.
    #[arg(long, default_value = "partial_corr")]
    out: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
    }
}

fn fail(kind: ErrorKind, code: &str, message: String) -> ExitCode {
    let body = json!({ "error": { "kind": kind_name(kind), "code": code, "message": message } });
    eprintln!("{body}");
    ExitCode::from(exit_code(kind))
}

fn print_json(value: serde_json::Value) -> Result<(), QdfError> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn run(command: Command) -> Result<(), QdfError> {
    match command {
        Command::Synth(c) => {
            let sidecar = cmd_synth(&SynthArgs {
                phi: c.phi,
                noise: c.noise,
                ramp_to: c.ramp_to,
                history: c.history,
                horizon: c.horizon,
                n: c.n,
                variables: c.variables,
                seed: c.seed,
                out: c.out.clone(),
            })?;
            eprintln!(
                "wrote {} rows to {}",
                sidecar.spec.length,
                c.out.display()
            );
        }
        Command::Train(c) => {
            let report = cmd_train(&TrainArgs {
                data: c.data,
                skip_first_column: c.skip_date,
                valid: c.valid,
                history: c.history,
                horizon: c.horizon,
                variant: c.variant.parse()?,
                config: c.training.config(),
                dump_sigma: c.dump_sigma,
                report: c.report,
                checkpoint: c.checkpoint,
            })?;
            print_json(serde_json::to_value(&report)?)?;
        }
        Command::Bench(c) => {
            let kind: BenchKind = c.benchmark.parse()?;
            let variants = c
                .variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<Result<Vec<_>, _>>()?;
            let bench = SyntheticBench {
                history: c.history,
                horizon: c.horizon,
                windows: c.windows,
                phi: c.phi,
                var_end: c.var_end,
                ..SyntheticBench::new(kind)
            };
            let out = cmd_bench(&BenchArgs {
                bench,
                variants,
                seeds: c.seeds,
                config: c.training.config(),
                parallel: c.parallel,
                out_dir: c.out,
            })?;
            println!("{:<12} {:>4} {:>21} {:>21}", "variant", "runs", "mse", "mae");
            for s in &out.summary {
                println!(
                    "{:<12} {:>4} {:>10.6} ± {:<8.6} {:>10.6} ± {:<8.6}",
                    s.variant.name(),
                    s.runs,
                    s.mse_mean,
                    s.mse_std,
                    s.mae_mean,
                    s.mae_std
                );
            }
            for r in out.rows.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "run {} seed {} failed: {}",
                    r.variant.name(),
                    r.seed,
                    r.error.as_deref().unwrap_or_default()
                );
            }
        }
        Command::Diagnose(c) => {
            let (_, summary) = cmd_diagnose(&DiagnoseArgs {
                data: c.data,
                skip_first_column: c.skip_date,
                reg_history: c.reg_history,
                horizon: c.horizon,
                subsample: c.subsample,
                variable: c.variable,
                threshold: c.threshold,
                seed: c.seed,
                out: c.out,
            })?;
            print_json(serde_json::to_value(&summary)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(ErrorKind::Usage, "usage", e.to_string()),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.code(), e.to_string()),
    }
}
