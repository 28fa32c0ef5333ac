//! Estimation-quality and timing harnesses, smoothing, and CSV/JSON output.
//!
//! CSV files start with `# key=value` lines echoing the effective
//! configuration, followed by a header row. JSON files are objects with a
//! `config` echo and a `rows` array.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::distributions::{rho_for_mi, stream_rng};
use crate::error::{Error, Result};
use crate::estimators::{Batch, EstimatorId};
use crate::trainer::{
    run_schedule, task_source, EstimatorTrainer, MinimizeTrace, Task, TrainConfig,
};

/// Fraction of each level used for bias and variance.
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.2;
/// Moving-average bandwidth for plotted traces.
pub const DEFAULT_BANDWIDTH: usize = 200;
pub const DEFAULT_BATCH_SIZES: [usize; 5] = [32, 64, 128, 256, 512];
/// Untimed steps at the start of every timing block.
pub const WARMUP_STEPS: usize = 5;
/// Timed steps per block; cells take turns block by block.
pub const TIMING_BLOCK: usize = 10;
pub const MIN_TIMING_REPS: usize = 30;

pub const QUALITY_COLUMNS: [&str; 6] = ["estimator", "task", "level", "bias", "variance", "mse"];
pub const TIMING_COLUMNS: [&str; 4] = ["estimator", "batch_size", "mean_seconds", "reps"];
pub const TRACE_COLUMNS: [&str; 5] = ["estimator", "task", "iter", "level", "estimate"];
pub const MINIMIZE_COLUMNS: [&str; 3] = ["iter", "estimate", "true_mi"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// True MI of the level the record belongs to.
    pub level: f64,
    pub estimate: f64,
}

/// Per-iteration estimates of one estimator over an MI schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateTrace {
    pub estimator: EstimatorId,
    pub task: Task,
    pub iters_per_level: usize,
    pub records: Vec<TraceRecord>,
    /// Set when training stopped early.
    pub failure: Option<String>,
    pub failed_at: Option<usize>,
}

impl EstimateTrace {
    pub fn new(estimator: EstimatorId, task: Task, iters_per_level: usize) -> Self {
        Self {
            estimator,
            task,
            iters_per_level,
            records: Vec::new(),
            failure: None,
            failed_at: None,
        }
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.estimate).collect()
    }

    /// Records of level `k` (possibly fewer than `iters_per_level` after a failure).
    pub fn level_records(&self, k: usize) -> &[TraceRecord] {
        let lo = (k * self.iters_per_level).min(self.records.len());
        let hi = ((k + 1) * self.iters_per_level).min(self.records.len());
        &self.records[lo..hi]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Diverged,
    Failed,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
            CellStatus::Failed => "failed",
        }
    }
}

impl FromStr for CellStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(CellStatus::Ok),
            "diverged" => Ok(CellStatus::Diverged),
            "failed" => Ok(CellStatus::Failed),
            other => Err(Error::contract(format!("unknown status `{other}`"))),
        }
    }
}

/// Bias, variance and MSE of one (estimator, task, level) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub estimator: EstimatorId,
    pub task: Task,
    pub level: f64,
    #[serde(with = "nan_as_null")]
    pub bias: f64,
    #[serde(with = "nan_as_null")]
    pub variance: f64,
    #[serde(with = "nan_as_null")]
    pub mse: f64,
    pub status: CellStatus,
    /// Estimates in the window; not emitted.
    #[serde(skip)]
    pub samples: usize,
}

impl QualityRow {
    pub fn mean(&self) -> f64 {
        self.level + self.bias
    }

    /// Standard error of the window mean.
    pub fn std_error(&self) -> f64 {
        (self.variance / self.samples as f64).sqrt()
    }
}

fn window_len(n: usize, window_fraction: f64) -> usize {
    ((n as f64) * window_fraction).round() as usize
}

/// Bias, variance and MSE over the last `window_fraction` of every level.
///
/// Several traces (one per seed) of the same estimator and task are pooled.
/// Levels that a diverged trace never completed are reported with NaN
/// statistics and the `diverged` status.
pub fn quality_stats_pooled(
    traces: &[EstimateTrace],
    levels: &[f64],
    window_fraction: f64,
) -> Result<Vec<QualityRow>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::contract("no traces to summarize"))?;
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(Error::contract(format!(
            "window fraction must lie in (0, 1], got {window_fraction}"
        )));
    }
    if traces.iter().any(|t| {
        t.estimator != first.estimator
            || t.task != first.task
            || t.iters_per_level != first.iters_per_level
    }) {
        return Err(Error::contract(
            "pooled traces must share estimator, task and schedule",
        ));
    }
    if traces.iter().all(|t| t.records.is_empty()) && traces.iter().all(|t| t.failure.is_none()) {
        return Err(Error::contract("trace is empty"));
    }
    let w = window_len(first.iters_per_level, window_fraction);
    if w == 0 {
        return Err(Error::contract("statistics window is empty"));
    }

    let mut rows = Vec::with_capacity(levels.len());
    for (k, &level) in levels.iter().enumerate() {
        let complete = traces
            .iter()
            .all(|t| t.level_records(k).len() == t.iters_per_level);
        if !complete {
            let status = if traces.iter().any(|t| t.failure.is_some()) {
                CellStatus::Diverged
            } else {
                CellStatus::Failed
            };
            rows.push(QualityRow {
                estimator: first.estimator,
                task: first.task,
                level,
                bias: f64::NAN,
                variance: f64::NAN,
                mse: f64::NAN,
                status,
                samples: 0,
            });
            continue;
        }
        let window: Vec<f64> = traces
            .iter()
            .flat_map(|t| {
                let recs = t.level_records(k);
                recs[recs.len() - w..].iter().map(|r| r.estimate)
            })
            .collect();
        let (mean, variance) = mean_and_variance(&window);
        let bias = mean - level;
        rows.push(QualityRow {
            estimator: first.estimator,
            task: first.task,
            level,
            bias,
            variance,
            mse: bias * bias + variance,
            status: CellStatus::Ok,
            samples: window.len(),
        });
    }
    Ok(rows)
}

/// [`quality_stats_pooled`] for a single trace, whose levels are read off
/// its records.
pub fn quality_stats(trace: &EstimateTrace, window_fraction: f64) -> Result<Vec<QualityRow>> {
    let mut levels = Vec::new();
    for chunk in trace.records.chunks(trace.iters_per_level.max(1)) {
        levels.push(chunk[0].level);
    }
    quality_stats_pooled(std::slice::from_ref(trace), &levels, window_fraction)
}

/// Mean and unbiased sample variance (zero for a single value).
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Centered moving average; point `t` averages `[t − b/2, t + b − 1 − b/2]`,
/// truncated at both ends.
pub fn smooth(series: &[f64], bandwidth: usize) -> Result<Vec<f64>> {
    if bandwidth == 0 {
        return Err(Error::contract("bandwidth must be >= 1"));
    }
    let n = series.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in series {
        prefix.push(prefix.last().unwrap() + v);
    }
    let back = bandwidth / 2;
    let ahead = bandwidth - 1 - back;
    Ok((0..n)
        .map(|t| {
            let lo = t.saturating_sub(back);
            let hi = (t + ahead).min(n - 1);
            if bandwidth == 1 {
                series[t]
            } else {
                (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
            }
        })
        .collect())
}

/// Runs every `(estimator, task)` cell on `jobs` threads. Results come back
/// in cell order regardless of scheduling.
pub fn run_grid(
    cells: &[(EstimatorId, Task)],
    levels: &[f64],
    cfg: &TrainConfig,
    jobs: usize,
) -> Vec<Result<EstimateTrace>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<EstimateTrace>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let (id, task) = cells[i];
                let out = run_schedule(id, task, levels, cfg);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every cell runs"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub estimator: EstimatorId,
    pub batch_size: usize,
    pub mean_seconds: f64,
    pub reps: usize,
    #[serde(skip)]
    pub min_seconds: f64,
    #[serde(skip)]
    pub max_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn rows_for(&self, id: EstimatorId) -> Vec<&TimingRow> {
        self.rows.iter().filter(|r| r.estimator == id).collect()
    }

    /// Least-squares slope of `ln t` against `ln N` for one estimator.
    pub fn loglog_slope(&self, id: EstimatorId) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows_for(id)
            .iter()
            .map(|r| ((r.batch_size as f64).ln(), r.mean_seconds.ln()))
            .collect();
        loglog_fit(&pts)
    }

    /// `t(largest batch) / t(smallest batch)` for one estimator.
    pub fn ratio(&self, id: EstimatorId) -> Option<f64> {
        let rows = self.rows_for(id);
        let lo = rows.iter().min_by_key(|r| r.batch_size)?;
        let hi = rows.iter().max_by_key(|r| r.batch_size)?;
        Some(hi.mean_seconds / lo.mean_seconds)
    }
}

fn loglog_fit(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

/// Wall-clock cost of one training step (model update plus estimate) per
/// estimator and batch size, on the Gaussian task at MI 2. Batches are drawn
/// before the clock starts.
///
/// Cells take turns in blocks of [`TIMING_BLOCK`] timed steps, each preceded
/// by [`WARMUP_STEPS`] untimed ones, so a burst of background load is spread
/// over all cells while every timed step still runs on a warm cache.
pub fn time_estimators(
    ids: &[EstimatorId],
    batch_sizes: &[usize],
    reps: usize,
    cfg: &TrainConfig,
) -> Result<TimingReport> {
    if reps < MIN_TIMING_REPS {
        return Err(Error::contract(format!(
            "timing needs at least {MIN_TIMING_REPS} repetitions, got {reps}"
        )));
    }
    if batch_sizes.is_empty() || batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(
            "batch sizes must be non-empty and strictly increasing",
        ));
    }
    cfg.validate()?;
    let src = task_source(Task::Gaussian, cfg.dim, rho_for_mi(2.0, cfg.dim)?, cfg.seed)?;
    struct Cell {
        id: EstimatorId,
        n: usize,
        batches: Vec<Batch>,
        trainer: EstimatorTrainer,
        times: Vec<f64>,
    }
    let mut cells = Vec::new();
    for &id in ids {
        for &n in batch_sizes {
            let mut rng = stream_rng(cfg.seed, 0x5000 + n as u64);
            let blocks = reps.div_ceil(TIMING_BLOCK);
            let batches: Vec<Batch> = (0..blocks * WARMUP_STEPS + reps)
                .map(|_| src.sample_joint(n, &mut rng))
                .collect::<Result<_>>()?;
            cells.push(Cell {
                id,
                n,
                batches,
                trainer: EstimatorTrainer::new(id, cfg.dim, cfg.dim, cfg),
                times: Vec::with_capacity(reps),
            });
        }
    }
    let mut next = vec![0; cells.len()];
    for block in (0..reps).step_by(TIMING_BLOCK) {
        let timed = TIMING_BLOCK.min(reps - block);
        for (cell, k) in cells.iter_mut().zip(&mut next) {
            for step in 0..WARMUP_STEPS + timed {
                let start = Instant::now();
                cell.trainer.fit_step(&cell.batches[*k], Some(&src))?;
                let dt = start.elapsed().as_secs_f64();
                *k += 1;
                if step >= WARMUP_STEPS {
                    cell.times.push(dt);
                }
            }
        }
    }
    let mut report = TimingReport::default();
    for cell in cells {
        let times = cell.times;
        report.rows.push(TimingRow {
            estimator: cell.id,
            batch_size: cell.n,
            mean_seconds: times.iter().sum::<f64>() / times.len() as f64,
            reps,
            min_seconds: times.iter().cloned().fold(f64::INFINITY, f64::min),
            max_seconds: times.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::contract(format!(
                "unknown format `{other}`; valid: csv, json"
            ))),
        }
    }
}

/// Effective configuration written at the top of every output file.
pub type ConfigEcho = Map<String, Value>;

/// Serializes `cfg` into a config echo.
pub fn config_echo<T: Serialize>(cfg: &T) -> ConfigEcho {
    match serde_json::to_value(cfg) {
        Ok(Value::Object(m)) => m,
        Ok(other) => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
        Err(_) => Map::new(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Array(items) => {
            let joined: Vec<String> = items
                .iter()
                .map(|i| match i {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            out.push((prefix.to_string(), joined.join(",")));
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn write_csv(
    path: &Path,
    config: &ConfigEcho,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut flat = Vec::new();
    flatten("", &Value::Object(config.clone()), &mut flat);
    for (k, v) in flat {
        writeln!(out, "# {k}={v}").map_err(io_err(path))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(&r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, config: &ConfigEcho, rows: &T) -> Result<()> {
    let doc = serde_json::json!({ "config": config, "rows": rows });
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, &doc).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    writeln!(out).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

/// Writes quality rows. With `with_status` a trailing `status` column is
/// added after the six standard ones (CSV only; JSON always carries it).
pub fn emit_quality(
    rows: &[QualityRow],
    config: &ConfigEcho,
    format: Format,
    path: &Path,
    with_status: bool,
) -> Result<()> {
    match format {
        Format::Csv => {
            let mut header: Vec<&str> = QUALITY_COLUMNS.to_vec();
            if with_status {
                header.push("status");
            }
            write_csv(
                path,
                config,
                &header,
                rows.iter().map(|r| {
                    let mut rec = vec![
                        r.estimator.to_string(),
                        r.task.to_string(),
                        fmt_f64(r.level),
                        fmt_f64(r.bias),
                        fmt_f64(r.variance),
                        fmt_f64(r.mse),
                    ];
                    if with_status {
                        rec.push(r.status.as_str().to_string());
                    }
                    rec
                }),
            )
        }
        Format::Json => write_json(path, config, &rows),
    }
}

pub fn emit_timing(
    report: &TimingReport,
    config: &ConfigEcho,
    format: Format,
    path: &Path,
) -> Result<()> {
    match format {
        Format::Csv => write_csv(
            path,
            config,
            &TIMING_COLUMNS,
            report.rows.iter().map(|r| {
                vec![
                    r.estimator.to_string(),
                    r.batch_size.to_string(),
                    fmt_f64(r.mean_seconds),
                    r.reps.to_string(),
                ]
            }),
        ),
        Format::Json => write_json(path, config, &report.rows),
    }
}

pub fn emit_trace(
    traces: &[EstimateTrace],
    config: &ConfigEcho,
    format: Format,
    path: &Path,
) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        estimator: EstimatorId,
        task: Task,
        iter: usize,
        level: f64,
        #[serde(with = "nan_as_null")]
        estimate: f64,
    }
    let rows: Vec<Row> = traces
        .iter()
        .flat_map(|t| {
            t.records.iter().map(move |r| Row {
                estimator: t.estimator,
                task: t.task,
                iter: r.iter,
                level: r.level,
                estimate: r.estimate,
            })
        })
        .collect();
    match format {
        Format::Csv => write_csv(
            path,
            config,
            &TRACE_COLUMNS,
            rows.iter().map(|r| {
                vec![
                    r.estimator.to_string(),
                    r.task.to_string(),
                    r.iter.to_string(),
                    fmt_f64(r.level),
                    fmt_f64(r.estimate),
                ]
            }),
        ),
        Format::Json => write_json(path, config, &rows),
    }
}

/// `iter,estimate,true_mi`; `true_mi` is empty (CSV) or null (JSON) on
/// iterations where it was not evaluated.
pub fn emit_minimize(
    trace: &MinimizeTrace,
    config: &ConfigEcho,
    format: Format,
    path: &Path,
) -> Result<()> {
    match format {
        Format::Csv => write_csv(
            path,
            config,
            &MINIMIZE_COLUMNS,
            trace.records.iter().map(|r| {
                vec![
                    r.iter.to_string(),
                    fmt_f64(r.estimate),
                    r.true_mi.map(fmt_f64).unwrap_or_default(),
                ]
            }),
        ),
        Format::Json => write_json(path, config, &trace.records),
    }
}

fn read_csv_file(path: &Path) -> Result<(ConfigEcho, Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut config = Map::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
            config.insert(k.to_string(), Value::String(v.to_string()));
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(
            rec.map_err(csv_err(path))?
                .iter()
                .map(String::from)
                .collect(),
        );
    }
    Ok((config, header, rows))
}

fn parse<T: FromStr>(path: &Path, field: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        message: format!("cannot parse {field} from `{s}`"),
    })
}

fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(ConfigEcho, T)> {
    #[derive(Deserialize)]
    struct Doc<T> {
        config: ConfigEcho,
        rows: T,
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let doc: Doc<T> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((doc.config, doc.rows))
}

/// Reads back a file written by [`emit_quality`]. CSV config values come
/// back as strings.
pub fn read_quality(path: &Path, format: Format) -> Result<(ConfigEcho, Vec<QualityRow>)> {
    match format {
        Format::Json => read_json_file(path),
        Format::Csv => {
            let (config, header, rows) = read_csv_file(path)?;
            if header.len() < 6 || header[..6] != QUALITY_COLUMNS {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("unexpected header {header:?}"),
                });
            }
            let with_status = header.get(6).map(String::as_str) == Some("status");
            let rows = rows
                .iter()
                .map(|r| {
                    Ok(QualityRow {
                        estimator: parse(path, "estimator", &r[0])?,
                        task: parse(path, "task", &r[1])?,
                        level: parse(path, "level", &r[2])?,
                        bias: parse(path, "bias", &r[3])?,
                        variance: parse(path, "variance", &r[4])?,
                        mse: parse(path, "mse", &r[5])?,
                        status: if with_status {
                            parse(path, "status", &r[6])?
                        } else {
                            CellStatus::Ok
                        },
                        samples: 0,
                    })
                })
                .collect::<Result<_>>()?;
            Ok((config, rows))
        }
    }
}

pub fn read_timing(path: &Path, format: Format) -> Result<(ConfigEcho, TimingReport)> {
    match format {
        Format::Json => {
            let (c, rows) = read_json_file::<Vec<TimingRow>>(path)?;
            Ok((c, TimingReport { rows }))
        }
        Format::Csv => {
            let (config, header, rows) = read_csv_file(path)?;
            if header != TIMING_COLUMNS {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("unexpected header {header:?}"),
                });
            }
            let rows = rows
                .iter()
                .map(|r| {
                    Ok(TimingRow {
                        estimator: parse(path, "estimator", &r[0])?,
                        batch_size: parse(path, "batch_size", &r[1])?,
                        mean_seconds: parse(path, "mean_seconds", &r[2])?,
                        reps: parse(path, "reps", &r[3])?,
                        min_seconds: f64::NAN,
                        max_seconds: f64::NAN,
                    })
                })
                .collect::<Result<_>>()?;
            Ok((config, TimingReport { rows }))
        }
    }
}

/// JSON has no NaN; it is written as `null` and read back as NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn trace_from(
        levels: &[f64],
        per_level: usize,
        f: impl Fn(usize, f64) -> f64,
    ) -> EstimateTrace {
        let mut t = EstimateTrace::new(EstimatorId::VClub, Task::Gaussian, per_level);
        for (k, &level) in levels.iter().enumerate() {
            for i in 0..per_level {
                let iter = k * per_level + i;
                t.records.push(TraceRecord {
                    iter,
                    level,
                    estimate: f(iter, level),
                });
            }
        }
        t
    }

    #[test]
    fn constant_trace_at_truth_has_zero_error() {
        let t = trace_from(&[2.0, 4.0], 100, |_, l| l);
        for row in quality_stats(&t, 0.2).unwrap() {
            assert_eq!((row.bias, row.variance, row.mse), (0.0, 0.0, 0.0));
            assert_eq!(row.samples, 20);
        }
    }

    #[test]
    fn alternating_trace_has_unit_variance() {
        let t = trace_from(
            &[3.0],
            1000,
            |i, l| if i % 2 == 0 { l + 1.0 } else { l - 1.0 },
        );
        let row = &quality_stats(&t, 0.2).unwrap()[0];
        assert!(row.bias.abs() < 1e-12);
        // 200 values of ±1: sample variance 200/199.
        assert_relative_eq!(row.variance, 200.0 / 199.0, max_relative = 1e-12);
        assert_eq!(row.mse, row.bias * row.bias + row.variance);
    }

    #[test]
    fn window_covers_only_the_tail_of_each_level() {
        // Early estimates are wild, the last 20% sits at truth + 0.5.
        let t = trace_from(&[2.0], 50, |i, l| if i < 40 { 100.0 } else { l + 0.5 });
        let row = &quality_stats(&t, 0.2).unwrap()[0];
        assert_relative_eq!(row.bias, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn empty_trace_and_bad_window_are_rejected() {
        let t = EstimateTrace::new(EstimatorId::Nwj, Task::Gaussian, 10);
        assert!(quality_stats(&t, 0.2).is_err());
        let t = trace_from(&[1.0], 10, |_, l| l);
        assert!(quality_stats(&t, 0.0).is_err());
        assert!(quality_stats(&t, 1.5).is_err());
    }

    #[test]
    fn unfinished_levels_are_marked_diverged() {
        let mut t = trace_from(&[2.0, 4.0], 10, |_, l| l);
        t.records.truncate(13);
        t.failure = Some("boom".into());
        t.failed_at = Some(13);
        let rows = quality_stats_pooled(&[t], &[2.0, 4.0, 6.0], 0.2).unwrap();
        assert_eq!(rows[0].status, CellStatus::Ok);
        assert_eq!(rows[1].status, CellStatus::Diverged);
        assert_eq!(rows[2].status, CellStatus::Diverged);
        assert!(rows[1].bias.is_nan());
    }

    #[test]
    fn smoothing_identity_constant_and_step() {
        let xs = [3.0, -1.0, 4.0, 1.0, 5.0];
        assert_eq!(smooth(&xs, 1).unwrap(), xs.to_vec());
        assert_eq!(smooth(&[2.5; 7], 5).unwrap(), vec![2.5; 7]);

        let step = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let s = smooth(&step, 4).unwrap();
        assert_eq!(&s[2..7], &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(smooth(&step, 0).is_err());
    }

    #[test]
    fn smoothing_truncates_windows_at_the_edges() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let s = smooth(&xs, 3).unwrap();
        // Windows: [0,1], [0,2], [1,3], [2,3].
        assert_eq!(s, vec![1.5, 2.0, 3.0, 3.5]);
    }

    #[test]
    fn loglog_slope_recovers_power_laws() {
        let rows = |p: f64| TimingReport {
            rows: DEFAULT_BATCH_SIZES
                .iter()
                .map(|&n| TimingRow {
                    estimator: EstimatorId::VClub,
                    batch_size: n,
                    mean_seconds: 1e-6 * (n as f64).powf(p),
                    reps: 30,
                    min_seconds: 0.0,
                    max_seconds: 0.0,
                })
                .collect(),
        };
        assert_relative_eq!(
            rows(2.0).loglog_slope(EstimatorId::VClub).unwrap(),
            2.0,
            max_relative = 1e-10
        );
        assert_relative_eq!(
            rows(1.0).ratio(EstimatorId::VClub).unwrap(),
            16.0,
            max_relative = 1e-10
        );
        assert!(rows(1.0).loglog_slope(EstimatorId::Nwj).is_none());
    }

    #[test]
    fn timing_contract() {
        let cfg = TrainConfig {
            dim: 2,
            ..TrainConfig::default()
        };
        assert!(time_estimators(&[EstimatorId::VClub], &[32, 64], 29, &cfg).is_err());
        assert!(time_estimators(&[EstimatorId::VClub], &[64, 32], 30, &cfg).is_err());
        let r = time_estimators(&[EstimatorId::VClubS], &[8, 16], 30, &cfg).unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert!(row.min_seconds <= row.mean_seconds && row.mean_seconds <= row.max_seconds);
            assert_eq!(row.reps, 30);
        }
    }
}
