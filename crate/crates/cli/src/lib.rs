//! Command-line front end: `estimate`, `benchmark`, `minimize` and `timing`.
//!
//! Every subcommand writes its results under the output directory (flag
//! `--out`, else the `MIBOUNDS_OUT` variable, else the working directory) and
//! embeds the effective configuration at the top of each file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mibounds::bench::{
    config_echo, emit_minimize, emit_quality, emit_timing, emit_trace, quality_stats_pooled,
    run_grid, time_estimators, CellStatus, EstimateTrace, Format, QualityRow, DEFAULT_BATCH_SIZES,
    DEFAULT_WINDOW_FRACTION, MIN_TIMING_REPS,
};
use mibounds::estimators::{EstimatorId, MarginalPairing, ModelFamily};
use mibounds::trainer::{initial_channel, minimize_mi, run_schedule};
use mibounds::{Error, MinimizeConfig, Task, TrainConfig};
use serde::Serialize;

pub const OUT_ENV: &str = "MIBOUNDS_OUT";

pub const EXIT_OK: i32 = 0;
/// IO and other non-numeric runtime failures.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mibounds",
    version,
    about = "Mutual information bounds: estimation, benchmarks, minimization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one estimator through a schedule of MI levels.
    #[command(args_override_self = true)]
    Estimate(EstimateArgs),
    /// Bias/variance/MSE grid over estimators, tasks and levels.
    #[command(args_override_self = true)]
    Benchmark(BenchmarkArgs),
    /// Minimize the MI of a linear-Gaussian channel through an estimator.
    #[command(args_override_self = true)]
    Minimize(MinimizeArgs),
    /// Wall-clock cost per training step across batch sizes.
    #[command(args_override_self = true)]
    Timing(TimingArgs),
}

/// Options shared by every subcommand. Unset values fall back to the
/// defaults of the subcommand's configuration.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = ".")]
    pub out: PathBuf,
    /// csv or json.
    #[arg(long, default_value = "csv")]
    pub format: Format,
    /// File of `key=value` lines using the long flag names; flags given on
    /// the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub iters_per_level: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub hidden_units: Option<usize>,
    /// Likelihood steps on q per iteration.
    #[arg(long)]
    pub approx_steps_per_iter: Option<usize>,
    /// Dimension of x and y.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Negative pairing for NWJ and MINE: allpairs or shuffle.
    #[arg(long)]
    pub pairing: Option<MarginalPairing>,
    /// Moving-average gradient correction for MINE.
    #[arg(long)]
    pub mine_ema: bool,
}

impl CommonArgs {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.iters_per_level {
            cfg.iters_per_level = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.hidden_units {
            cfg.hidden_units = v;
        }
        if let Some(v) = self.approx_steps_per_iter {
            cfg.approx_steps_per_iter = v;
        }
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(v) = self.pairing {
            cfg.pairing = v;
        }
        cfg.mine_ema |= self.mine_ema;
        cfg
    }

    fn path(&self, stem: &str) -> PathBuf {
        self.out.join(format!("{stem}.{}", self.format.extension()))
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub estimator: EstimatorId,
    #[arg(long, default_value = "gaussian")]
    pub task: Task,
    /// Comma-separated MI levels in nats.
    #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10")]
    pub levels: Vec<f64>,
    /// Fraction of each level used for the statistics.
    #[arg(long, default_value_t = DEFAULT_WINDOW_FRACTION)]
    pub window: f64,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "vclub,vclub-s,vl1out,vvub,nwj,mine,infonce"
    )]
    pub estimators: Vec<EstimatorId>,
    #[arg(long, value_delimiter = ',', default_value = "gaussian,cubic")]
    pub tasks: Vec<Task>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10")]
    pub levels: Vec<f64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Seeds pooled per cell, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW_FRACTION)]
    pub window: f64,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct MinimizeArgs {
    #[arg(long, default_value = "vclub-s")]
    pub estimator: EstimatorId,
    /// True MI of the channel at the start, in nats.
    #[arg(long, default_value_t = 2.0)]
    pub init_mi: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_iters: usize,
    /// Exact MI is recorded every this many iterations.
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub channel_lr: f64,
    /// Use the full pairwise bound instead of one sampled negative
    /// (vclub-s becomes vclub).
    #[arg(long)]
    pub no_sampling: bool,
    /// Skip the channel update (ablation).
    #[arg(long)]
    pub freeze_channel: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "vclub,vclub-s,vl1out,vvub,nwj,mine,infonce"
    )]
    pub estimators: Vec<EstimatorId>,
    /// Strictly increasing batch sizes.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BATCH_SIZES)]
    pub batches: Vec<usize>,
    #[arg(long, default_value_t = MIN_TIMING_REPS)]
    pub reps: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            e if e.is_numeric() => EXIT_NUMERIC,
            Error::Io { .. } | Error::Format { .. } => EXIT_FAILURE,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match merge_config_file(args) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return f.code;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Minimize(a) => cmd_minimize(a),
        Command::Timing(a) => cmd_timing(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Splices the entries of `--config FILE` in front of the subcommand's own
/// arguments, so that explicit flags override them. An `out` entry yields
/// to the environment variable.
fn merge_config_file(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, Failure> {
    let Some(sub) = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 1)
    else {
        return Ok(args);
    };
    let mut path = None;
    let mut it = args[sub + 1..].iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = it.next().cloned();
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.into());
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    let env_out = std::env::var_os(OUT_ENV).is_some();
    let mut injected: Vec<OsString> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Failure::usage(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                n + 1
            ))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" || (key == "out" && env_out) {
            continue;
        }
        match value {
            "true" => injected.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                injected.push(format!("--{key}").into());
                injected.push(value.into());
            }
        }
    }
    let mut merged = args[..=sub].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&args[sub + 1..]);
    Ok(merged)
}

fn ensure_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

fn check_levels(levels: &[f64]) -> Outcome {
    if levels.is_empty() {
        return Err(Failure::usage("--levels needs at least one value"));
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimateEcho<'a> {
    command: &'static str,
    estimator: EstimatorId,
    task: Task,
    levels: &'a [f64],
    window: f64,
    #[serde(flatten)]
    train: &'a TrainConfig,
}

fn print_rows(rows: &[QualityRow]) {
    println!(
        "{:<9} {:<9} {:>6} {:>9} {:>9} {:>9} {:>9}  status",
        "estimator", "task", "level", "mean", "bias", "variance", "mse"
    );
    for r in rows {
        println!(
            "{:<9} {:<9} {:>6.2} {:>9.4} {:>9.4} {:>9.4} {:>9.4}  {}",
            r.estimator.as_str(),
            r.task.as_str(),
            r.level,
            r.mean(),
            r.bias,
            r.variance,
            r.mse,
            r.status.as_str()
        );
    }
}

pub fn cmd_estimate(a: &EstimateArgs) -> Outcome {
    check_levels(&a.levels)?;
    let cfg = a.common.apply(TrainConfig::default());
    let echo = config_echo(&EstimateEcho {
        command: "estimate",
        estimator: a.estimator,
        task: a.task,
        levels: &a.levels,
        window: a.window,
        train: &cfg,
    });
    let trace = run_schedule(a.estimator, a.task, &a.levels, &cfg).map_err(|e| match e {
        Error::Unsupported(m) => Failure::usage(format!(
            "{m}; estimators available on every task: {}",
            task_ids()
        )),
        other => other.into(),
    })?;
    ensure_dir(&a.common.out)?;
    emit_trace(
        std::slice::from_ref(&trace),
        &echo,
        a.common.format,
        &a.common.path("trace"),
    )?;
    if let Some(message) = &trace.failure {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: message.clone(),
        });
    }
    let rows = quality_stats_pooled(std::slice::from_ref(&trace), &a.levels, a.window)?;
    emit_quality(
        &rows,
        &echo,
        a.common.format,
        &a.common.path("quality"),
        false,
    )?;
    print_rows(&rows);
    Ok(())
}

fn task_ids() -> String {
    EstimatorId::ALL
        .iter()
        .filter(|e| e.family() != ModelFamily::Known)
        .map(|e| e.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Serialize)]
struct BenchmarkEcho<'a> {
    command: &'static str,
    estimators: &'a [EstimatorId],
    tasks: &'a [Task],
    levels: &'a [f64],
    seeds: usize,
    window: f64,
    #[serde(flatten)]
    train: &'a TrainConfig,
}

fn failed_rows(id: EstimatorId, task: Task, levels: &[f64]) -> Vec<QualityRow> {
    levels
        .iter()
        .map(|&level| QualityRow {
            estimator: id,
            task,
            level,
            bias: f64::NAN,
            variance: f64::NAN,
            mse: f64::NAN,
            status: CellStatus::Failed,
            samples: 0,
        })
        .collect()
}

pub fn cmd_benchmark(a: &BenchmarkArgs) -> Outcome {
    check_levels(&a.levels)?;
    if a.estimators.is_empty() || a.tasks.is_empty() {
        return Err(Failure::usage("--estimators and --tasks must be non-empty"));
    }
    if a.seeds == 0 || a.jobs == 0 {
        return Err(Failure::usage("--seeds and --jobs must be positive"));
    }
    if !(a.window > 0.0 && a.window <= 1.0) {
        return Err(Failure::usage("--window must lie in (0, 1]"));
    }
    let cfg = a.common.apply(TrainConfig::default());
    cfg.validate()?;
    let echo = config_echo(&BenchmarkEcho {
        command: "benchmark",
        estimators: &a.estimators,
        tasks: &a.tasks,
        levels: &a.levels,
        seeds: a.seeds,
        window: a.window,
        train: &cfg,
    });
    let cells: Vec<(EstimatorId, Task)> = a
        .estimators
        .iter()
        .flat_map(|&id| a.tasks.iter().map(move |&t| (id, t)))
        .collect();
    // One grid per seed; traces of the same cell are pooled afterwards.
    let mut per_cell: Vec<Vec<std::result::Result<EstimateTrace, Error>>> =
        cells.iter().map(|_| Vec::new()).collect();
    for s in 0..a.seeds as u64 {
        let seeded = TrainConfig {
            seed: cfg.seed + s,
            ..cfg.clone()
        };
        for (k, r) in run_grid(&cells, &a.levels, &seeded, a.jobs)
            .into_iter()
            .enumerate()
        {
            per_cell[k].push(r);
        }
    }
    let mut rows = Vec::new();
    for (&(id, task), results) in cells.iter().zip(per_cell) {
        let traces: std::result::Result<Vec<_>, _> = results.into_iter().collect();
        match traces {
            Ok(traces) => {
                if let Some(t) = traces.iter().find(|t| t.failure.is_some()) {
                    eprintln!(
                        "warning: {id}/{task}: {}",
                        t.failure.as_deref().unwrap_or("")
                    );
                }
                rows.extend(quality_stats_pooled(&traces, &a.levels, a.window)?);
            }
            Err(e) => {
                eprintln!("warning: {id}/{task}: {e}");
                rows.extend(failed_rows(id, task, &a.levels));
            }
        }
    }
    ensure_dir(&a.common.out)?;
    emit_quality(
        &rows,
        &echo,
        a.common.format,
        &a.common.path("quality"),
        true,
    )?;
    print_rows(&rows);
    Ok(())
}

#[derive(Serialize)]
struct MinimizeEcho<'a> {
    command: &'static str,
    sampling: bool,
    #[serde(flatten)]
    cfg: &'a MinimizeConfig,
}

pub fn cmd_minimize(a: &MinimizeArgs) -> Outcome {
    let estimator = match (a.no_sampling, a.estimator) {
        (false, id) => id,
        (true, EstimatorId::VClub | EstimatorId::VClubS) => EstimatorId::VClub,
        (true, other) => {
            return Err(Failure::usage(format!(
                "--no-sampling applies to vclub and vclub-s, not {other}"
            )))
        }
    };
    let defaults = MinimizeConfig::default();
    let cfg = MinimizeConfig {
        train: a.common.apply(defaults.train.clone()),
        estimator,
        target_mi_start: a.init_mi,
        max_iters: a.max_iters,
        mi_eval_every: a.eval_every,
        channel_learning_rate: a.channel_lr,
        freeze_channel: a.freeze_channel,
        record_events: false,
    };
    cfg.validate()?;
    let echo = config_echo(&MinimizeEcho {
        command: "minimize",
        sampling: estimator == EstimatorId::VClubS,
        cfg: &cfg,
    });
    let trace = minimize_mi(initial_channel(&cfg)?, &cfg)?;
    ensure_dir(&a.common.out)?;
    emit_minimize(&trace, &echo, a.common.format, &a.common.path("minimize"))?;
    if let Some(iter) = trace.diverged_at {
        eprintln!("warning: true MI rose by more than 1 nat within 500 iterations (at {iter})");
    }
    println!(
        "{estimator}: true MI {:.4} -> {:.4} after {} iterations",
        trace.initial_true_mi,
        trace.final_true_mi(),
        cfg.max_iters
    );
    Ok(())
}

#[derive(Serialize)]
struct TimingEcho<'a> {
    command: &'static str,
    estimators: &'a [EstimatorId],
    batches: &'a [usize],
    reps: usize,
    #[serde(flatten)]
    train: &'a TrainConfig,
}

pub fn cmd_timing(a: &TimingArgs) -> Outcome {
    if a.estimators.is_empty() {
        return Err(Failure::usage("--estimators must be non-empty"));
    }
    let cfg = a.common.apply(TrainConfig::default());
    let report = time_estimators(&a.estimators, &a.batches, a.reps, &cfg)?;
    let echo = config_echo(&TimingEcho {
        command: "timing",
        estimators: &a.estimators,
        batches: &a.batches,
        reps: a.reps,
        train: &cfg,
    });
    ensure_dir(&a.common.out)?;
    emit_timing(&report, &echo, a.common.format, &a.common.path("timing"))?;
    for &id in &a.estimators {
        let per: Vec<String> = report
            .rows_for(id)
            .iter()
            .map(|r| format!("{}:{:.3}ms", r.batch_size, r.mean_seconds * 1e3))
            .collect();
        match report.loglog_slope(id) {
            Some(s) => println!("{:<8} slope {s:.3}  {}", id.as_str(), per.join(" ")),
            None => println!("{:<8} {}", id.as_str(), per.join(" ")),
        }
    }
    Ok(())
}
