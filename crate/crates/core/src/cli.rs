//! The `biasgeom` command line: `gradcheck`, `geometry`, `train` and `sweep`.
//!
//! Every subcommand reads an optional INI config (see [`crate::config`]),
//! applies flag overrides, and writes CSV files whose first line is a
//! versioned schema comment. Exit codes: 0 success, 2 configuration or input
//! error, 3 unsupported request, 4 numerical failure, 1 any other I/O failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ArchConfig, ExperimentConfig, LambdaSpec, Overrides};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{activation_mask, geometry_report, write_report_csv, ReportTag};
use crate::init::InitConfig;
use crate::network::{ArchSpec, Network};
use crate::train::{gradcheck, train_model_with, GradcheckOptions, TrainRecord};

pub const CURVE_SCHEMA: &str = "# biasgeom learning-curve v1";
pub const CURVE_GEOMETRY_SCHEMA: &str = "# biasgeom learning-curve-geometry v1";
pub const TRAIN_SUMMARY_SCHEMA: &str = "# biasgeom train-summary v1";
pub const SWEEP_RUNS_SCHEMA: &str = "# biasgeom sweep-runs v1";
pub const SWEEP_TABLE_SCHEMA: &str = "# biasgeom sweep-table v1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_UNSUPPORTED: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "biasgeom",
    version,
    about = "Bias-initialization geometry experiments for MLPs and binary networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare backprop gradients with central differences.
    Gradcheck(CommonArgs),
    /// Audit first-layer hyperplanes at initialization for every λ and seed.
    Geometry(CommonArgs),
    /// Train once per seed; write learning curves, checkpoints and a summary.
    Train(CommonArgs),
    /// Train htanh and binary networks over the λ grid plus a ReLU baseline.
    Sweep(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
struct CommonArgs {
    /// INI experiment config; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed (repeatable); replaces the configured seed list.
    #[arg(long = "seed", value_name = "N")]
    seeds: Vec<u64>,
    /// Bias-init λ (repeatable, or `auto` for max‖x‖+1); replaces the λ grid.
    #[arg(long = "lambda", value_name = "X")]
    lambdas: Vec<LambdaSpec>,
    /// Output directory [default: config, then $BIASGEOM_OUT, then ./runs].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Architecture preset: relu, htanh or binary.
    #[arg(long, value_name = "NAME")]
    arch: Option<String>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            seeds: self.seeds.clone(),
            lambdas: self.lambdas.clone(),
            out: self.out.clone(),
            epochs: self.epochs,
            arch: self.arch.clone(),
        })?;
        Ok(cfg)
    }
}

/// Maps an error onto the exit-code contract.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Usage(_)
        | Error::Idx(_)
        | Error::Shape { .. }
        | Error::Checkpoint { .. } => EXIT_CONFIG,
        Error::Unsupported(_) => EXIT_UNSUPPORTED,
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        Error::Csv(_) | Error::Io(_) => EXIT_IO,
    }
}

/// Parses `args` (including the program name), runs the subcommand, and
/// returns the process exit code. Reports go to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Gradcheck(a) => a.load().and_then(|cfg| {
            let passed = cmd_gradcheck(&cfg, out)?;
            Ok(if passed { EXIT_OK } else { EXIT_NUMERICAL })
        }),
        Command::Geometry(a) => a
            .load()
            .and_then(|cfg| cmd_geometry(&cfg, out).map(|_| EXIT_OK)),
        Command::Train(a) => a.load().and_then(|cfg| {
            let lambda = match a.lambdas.as_slice() {
                [] => LambdaSpec::Value(cfg.init.bias_lambda),
                [one] => *one,
                _ => return Err(Error::config("train takes at most one --lambda")),
            };
            cmd_train(&cfg, lambda, out).map(|_| EXIT_OK)
        }),
        Command::Sweep(a) => a
            .load()
            .and_then(|cfg| cmd_sweep(&cfg, out).map(|_| EXIT_OK)),
    };
    match result {
        Ok(code) => code,
        Err(Error::Unsupported(msg)) => {
            let _ = writeln!(out, "UNSUPPORTED {msg}");
            EXIT_UNSUPPORTED
        }
        Err(e) => {
            eprintln!("biasgeom: {e}");
            exit_code(&e)
        }
    }
}

fn build_arch(arch: &ArchConfig, train: &Dataset) -> Result<ArchSpec> {
    arch.build(train.features(), train.n_classes)
}

fn lambda_label(lambda: f64) -> String {
    format!("{lambda}")
}

/// Prints `PASS|FAIL max_rel_err=…`; returns whether the error is under the threshold.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<bool> {
    let (train, _) = cfg.data.load()?;
    let arch = build_arch(&cfg.arch, &train)?;
    let report = gradcheck(
        &arch,
        &cfg.init,
        &train,
        &GradcheckOptions {
            probes: cfg.gradcheck.probes,
            batch_size: cfg.gradcheck.batch_size,
            seed: cfg.seeds[0],
        },
    )?;
    let passed = report.max_rel_err < cfg.gradcheck.threshold;
    writeln!(
        out,
        "{} max_rel_err={:e} threshold={:e} probes={} resamples={} worst={}",
        if passed { "PASS" } else { "FAIL" },
        report.max_rel_err,
        cfg.gradcheck.threshold,
        report.probes,
        report.resamples,
        report.worst_param
    )?;
    Ok(passed)
}

/// One geometry report set per (λ, seed), named `geometry_l{λ}_s{seed}_*.csv`.
/// Returns the file prefixes written.
pub fn cmd_geometry(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let (train, _) = cfg.data.load()?;
    let arch = build_arch(&cfg.arch, &train)?;
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for spec in &cfg.lambda_grid {
        let lambda = spec.resolve(&train);
        for &seed in &cfg.seeds {
            let init = InitConfig {
                bias_lambda: lambda,
                seed,
                ..cfg.init.clone()
            };
            let net = Network::new(&arch, &init)?;
            let (w, b, kind) = net.block_hyperplanes(0, &train.x)?;
            let mask = activation_mask(&w, &b, &train.x, kind)?;
            let report = geometry_report(&mask, &train.x)?;
            let prefix = format!("geometry_l{}_s{seed}", lambda_label(lambda));
            write_report_csv(
                &report,
                ReportTag {
                    lambda,
                    layer: 0,
                    step: 0,
                },
                &dir,
                &prefix,
            )?;
            writeln!(
                out,
                "lambda={lambda} seed={seed} correlation={:.4} mean_jaccard={:.4} mean_count={:.3} mean_plane_fraction={:.4}",
                report.norm_count_correlation,
                report.mean_pairwise_jaccard,
                report.mean_count(),
                report.mean_plane_fraction()
            )?;
            written.push(dir.join(prefix));
        }
    }
    Ok(written)
}

/// Incremental writer for one run's learning curve and its geometry digests.
/// Rows are flushed as they arrive so a diverged run keeps its partial curve.
struct CurveWriter {
    curve: csv::Writer<BufWriter<File>>,
    geometry: csv::Writer<BufWriter<File>>,
    lambda: f64,
    seed: u64,
}

fn schema_writer(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "{schema}")?;
    Ok(csv::Writer::from_writer(file))
}

impl CurveWriter {
    fn create(dir: &Path, stem: &str, lambda: f64, seed: u64) -> Result<Self> {
        let mut curve = schema_writer(&dir.join(format!("{stem}.csv")), CURVE_SCHEMA)?;
        curve.write_record(["epoch", "train_loss", "val_error_rate", "lambda", "seed"])?;
        let mut geometry = schema_writer(
            &dir.join(format!("{stem}_geometry.csv")),
            CURVE_GEOMETRY_SCHEMA,
        )?;
        geometry.write_record([
            "epoch",
            "layer",
            "correlation",
            "mean_jaccard",
            "mean_count",
            "mean_plane_fraction",
        ])?;
        curve.flush()?;
        geometry.flush()?;
        Ok(Self {
            curve,
            geometry,
            lambda,
            seed,
        })
    }

    fn record(&mut self, r: &TrainRecord) -> Result<()> {
        self.curve.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_error_rate.to_string(),
            self.lambda.to_string(),
            self.seed.to_string(),
        ])?;
        self.curve.flush()?;
        for g in &r.geometry {
            self.geometry.write_record([
                r.epoch.to_string(),
                g.layer.to_string(),
                g.correlation.to_string(),
                g.mean_jaccard.to_string(),
                g.mean_count.to_string(),
                g.mean_plane_fraction.to_string(),
            ])?;
        }
        self.geometry.flush()?;
        Ok(())
    }
}

/// Trains one configuration, streaming its curve to `{dir}/{stem}.csv`.
/// Returns the final validation error and the trained network.
#[allow(clippy::too_many_arguments)]
fn train_run(
    arch: &ArchSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &ExperimentConfig,
    lambda: f64,
    seed: u64,
    dir: &Path,
    stem: &str,
) -> Result<(f64, Network)> {
    let init = InitConfig {
        bias_lambda: lambda,
        seed,
        ..cfg.init.clone()
    };
    let mut writer = CurveWriter::create(dir, stem, lambda, seed)?;
    let outcome = train_model_with(arch, train, val, &init, &cfg.optim, &cfg.audit, seed, |r| {
        writer.record(r)
    })?;
    let last = outcome
        .records
        .last()
        .map(|r| r.val_error_rate)
        .unwrap_or(f64::NAN);
    Ok((last, outcome.network))
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stats { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub lambda: f64,
    /// `(seed, final validation error)` in seed order.
    pub finals: Vec<(u64, f64)>,
    pub stats: Stats,
}

/// Writes `train_s{seed}.csv`, `train_s{seed}_geometry.csv`,
/// `train_s{seed}.bnit` per seed, then `train_summary.csv`.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    lambda: LambdaSpec,
    out: &mut dyn Write,
) -> Result<TrainSummary> {
    let (train, val) = cfg.data.load()?;
    let arch = build_arch(&cfg.arch, &train)?;
    let lambda = lambda.resolve(&train);
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir)?;
    let mut finals = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let stem = format!("train_s{seed}");
        let (err, net) = train_run(&arch, &train, &val, cfg, lambda, seed, &dir, &stem)?;
        net.save(&dir.join(format!("{stem}.bnit")))?;
        writeln!(
            out,
            "seed={seed} lambda={lambda} final_val_error_rate={err:.4}"
        )?;
        finals.push((seed, err));
    }
    let errors: Vec<f64> = finals.iter().map(|&(_, e)| e).collect();
    let stats = Stats::of(&errors);
    let mut w = schema_writer(&dir.join("train_summary.csv"), TRAIN_SUMMARY_SCHEMA)?;
    w.write_record(["seed", "final_val_error_rate"])?;
    for (seed, err) in &finals {
        w.write_record([seed.to_string(), err.to_string()])?;
    }
    w.write_record(["mean".to_string(), stats.mean.to_string()])?;
    w.write_record(["std".to_string(), stats.std.to_string()])?;
    w.flush()?;
    writeln!(
        out,
        "mean={:.4} std={:.4} over {} seeds",
        stats.mean,
        stats.std,
        errors.len()
    )?;
    Ok(TrainSummary {
        lambda,
        finals,
        stats,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    /// `relu`, `htanh` or `binary`.
    pub config: &'static str,
    pub lambda: f64,
    pub seed: u64,
    pub final_val_error_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub htanh: Stats,
    pub binary: Stats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    /// ReLU with zero bias.
    pub baseline: Stats,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<SweepRun>,
}

impl SweepTable {
    /// Final errors of `config` at `lambda`, in seed order.
    pub fn errors(&self, config: &str, lambda: f64) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.config == config && r.lambda == lambda)
            .map(|r| r.final_val_error_rate)
            .collect()
    }
}

/// Trains the ReLU baseline (λ = 0) and, for every λ in the grid, the htanh
/// and binary presets of the configured architecture, once per seed. Weight
/// draws depend only on the seed, so runs differ across λ only in the bias.
///
/// Curves go to `sweep/{config}_l{λ}_s{seed}.csv`; the per-run finals to
/// `sweep_runs.csv`; the λ × {mean, std} table to `sweep_table.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<SweepTable> {
    if cfg.lambda_grid.is_empty() {
        return Err(Error::config("sweep needs a non-empty lambda grid"));
    }
    let (train, val) = cfg.data.load()?;
    let dir = cfg.resolved_output_dir();
    let run_dir = dir.join("sweep");
    fs::create_dir_all(&run_dir)?;
    let lambdas: Vec<f64> = cfg.lambda_grid.iter().map(|l| l.resolve(&train)).collect();

    let mut plan: Vec<(&'static str, f64)> = vec![("relu", 0.0)];
    for &l in &lambdas {
        plan.push(("htanh", l));
        plan.push(("binary", l));
    }

    let mut runs = Vec::new();
    for (config, lambda) in plan {
        let arch = build_arch(&cfg.arch.with_preset(config)?, &train)?;
        for &seed in &cfg.seeds {
            let stem = format!("{config}_l{}_s{seed}", lambda_label(lambda));
            let (err, _) = train_run(&arch, &train, &val, cfg, lambda, seed, &run_dir, &stem)?;
            writeln!(
                out,
                "{config:<6} lambda={lambda} seed={seed} final_val_error_rate={err:.4}"
            )?;
            runs.push(SweepRun {
                config,
                lambda,
                seed,
                final_val_error_rate: err,
            });
        }
    }

    let mut w = schema_writer(&dir.join("sweep_runs.csv"), SWEEP_RUNS_SCHEMA)?;
    w.write_record(["config", "lambda", "seed", "final_val_error_rate"])?;
    for r in &runs {
        w.write_record([
            r.config.to_string(),
            r.lambda.to_string(),
            r.seed.to_string(),
            r.final_val_error_rate.to_string(),
        ])?;
    }
    w.flush()?;

    let collect = |config: &str, lambda: f64| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.config == config && r.lambda == lambda)
            .map(|r| r.final_val_error_rate)
            .collect()
    };
    let baseline = Stats::of(&collect("relu", 0.0));
    let rows: Vec<SweepRow> = lambdas
        .iter()
        .map(|&lambda| SweepRow {
            lambda,
            htanh: Stats::of(&collect("htanh", lambda)),
            binary: Stats::of(&collect("binary", lambda)),
        })
        .collect();

    let mut w = schema_writer(&dir.join("sweep_table.csv"), SWEEP_TABLE_SCHEMA)?;
    w.write_record([
        "row",
        "lambda",
        "relu_mean",
        "relu_std",
        "htanh_mean",
        "htanh_std",
        "binary_mean",
        "binary_std",
    ])?;
    w.write_record([
        "relu_baseline".to_string(),
        "0".to_string(),
        baseline.mean.to_string(),
        baseline.std.to_string(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
    ])?;
    writeln!(
        out,
        "{:<16} {:>8} {:>17} {:>17}",
        "row", "lambda", "htanh mean±std", "binary mean±std"
    )?;
    writeln!(
        out,
        "{:<16} {:>8} {:>17} {:>17}",
        "relu_baseline",
        0,
        format!("{:.4}±{:.4}", baseline.mean, baseline.std),
        ""
    )?;
    for row in &rows {
        w.write_record([
            "bias_init".to_string(),
            row.lambda.to_string(),
            String::new(),
            String::new(),
            row.htanh.mean.to_string(),
            row.htanh.std.to_string(),
            row.binary.mean.to_string(),
            row.binary.std.to_string(),
        ])?;
        writeln!(
            out,
            "{:<16} {:>8} {:>17} {:>17}",
            "bias_init",
            row.lambda,
            format!("{:.4}±{:.4}", row.htanh.mean, row.htanh.std),
            format!("{:.4}±{:.4}", row.binary.mean, row.binary.std)
        )?;
    }
    w.flush()?;
    Ok(SweepTable {
        baseline,
        rows,
        runs,
    })
}
