//! Cartesian parameter sweeps, their persisted results, and optimality maps.
//!
//! A sweep runs every combination of backend, transport, publishing
//! interval, payload size and subscriber count, one configuration at a time.
//! Each finished configuration is appended to `rows.jsonl` immediately, so an
//! interrupted sweep resumes where it stopped.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendDescriptor, BackendRegistry, Transport, Tuning};
use crate::metrics::RunMetrics;
use crate::runner::{ExperimentConfig, Runner, RunnerError, RunnerOptions};
use crate::units::ByteSize;

pub const ROW_SCHEMA: u32 = 1;
pub const ROWS_FILE: &str = "rows.jsonl";
pub const CSV_FILE: &str = "rows.csv";
pub const META_FILE: &str = "meta.json";
pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep parameter `{0}` has no values")]
    EmptySet(&'static str),
    #[error("sweep parameter `{0}` lists `{1}` twice")]
    DuplicateValue(&'static str, String),
    #[error("invalid sweep spec: {0}")]
    Invalid(String),
    #[error("cannot read sweep spec: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("corrupt results file {path}: {detail}")]
    CorruptResults { path: PathBuf, detail: String },
    #[error("grid for {transport} at T={interval_us} µs lacks {backend} at P={payload_size}, S={subscribers}")]
    IncompleteGrid {
        transport: Transport,
        interval_us: u64,
        backend: String,
        payload_size: usize,
        subscribers: usize,
    },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub command: Vec<String>,
    pub transports: Vec<Transport>,
}

/// Declarative sweep: one list of values per swept parameter plus fixed
/// fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub backends: Vec<String>,
    pub transports: Vec<Transport>,
    pub intervals_us: Vec<u64>,
    pub payload_sizes: Vec<ByteSize>,
    pub subscribers: Vec<usize>,
    pub count: u64,
    pub delay_ms: u64,
    pub repetitions: u32,
    #[serde(default)]
    pub pinning: Vec<usize>,
    #[serde(default)]
    pub tuning: Tuning,
    /// Out-of-tree backends reachable through the adapter protocol.
    #[serde(default)]
    pub adapters: BTreeMap<String, AdapterSpec>,
}

fn check_set<T: PartialEq + std::fmt::Debug>(name: &'static str, values: &[T]) -> Result<(), SweepError> {
    if values.is_empty() {
        return Err(SweepError::EmptySet(name));
    }
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(SweepError::DuplicateValue(name, format!("{v:?}")));
        }
    }
    Ok(())
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self, SweepError> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SweepError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        check_set("backends", &self.backends)?;
        check_set("transports", &self.transports)?;
        check_set("intervals_us", &self.intervals_us)?;
        check_set("payload_sizes", &self.payload_sizes)?;
        check_set("subscribers", &self.subscribers)?;
        for config in self.enumerate() {
            config.validate().map_err(|e| SweepError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Total number of configurations.
    pub fn len(&self) -> usize {
        self.backends.len()
            * self.transports.len()
            * self.intervals_us.len()
            * self.payload_sizes.len()
            * self.subscribers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every configuration, in lexicographic order over the declared sets
    /// (backend, transport, interval, payload size, subscribers).
    pub fn enumerate(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::with_capacity(self.len());
        for backend in &self.backends {
            for &transport in &self.transports {
                for &interval_us in &self.intervals_us {
                    for size in &self.payload_sizes {
                        for &subscribers in &self.subscribers {
                            out.push(ExperimentConfig {
                                backend: backend.clone(),
                                transport,
                                endpoint: None,
                                subscribers,
                                count: self.count,
                                interval_us,
                                payload_size: size.bytes(),
                                delay_ms: self.delay_ms,
                                repetitions: self.repetitions,
                                pinning: self.pinning.clone(),
                                tuning: self.tuning,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Directory name derived from the spec contents, so re-running the same
    /// spec resumes into the same place.
    pub fn id(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json)[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn register_adapters(&self, registry: &mut BackendRegistry) {
        for (name, adapter) in &self.adapters {
            registry.register_adapter(BackendDescriptor::adapter(
                name.clone(),
                adapter.command.clone(),
                adapter.transports.iter().copied(),
            ));
        }
    }
}

/// Identity of one configuration within a sweep.
pub fn row_key(config: &ExperimentConfig) -> String {
    format!(
        "{}/{}/T{}/P{}/S{}",
        config.backend, config.transport, config.interval_us, config.payload_size, config.subscribers
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    /// Some repetitions failed; metrics average the rest.
    Partial,
    Failed,
}

impl RowStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Partial => "partial",
            RowStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schema: u32,
    pub key: String,
    pub config: ExperimentConfig,
    pub status: RowStatus,
    pub metrics: Option<RunMetrics>,
    pub runs_ok: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Raw per-run data, relative to the sweep directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub schema: u32,
    pub sweep_id: String,
    pub suite_version: String,
    pub host: String,
    pub clock_source: String,
    pub sample_interval_ms: Option<u64>,
    pub throughput_unit: String,
    pub payload_unit: String,
    pub spec: SweepSpec,
}

impl SweepMeta {
    pub fn new(spec: &SweepSpec, sample_interval_ms: Option<u64>) -> Self {
        Self {
            schema: ROW_SCHEMA,
            sweep_id: spec.id(),
            suite_version: env!("CARGO_PKG_VERSION").to_string(),
            host: hostname(),
            clock_source: "payload timestamps: CLOCK_REALTIME; spans: CLOCK_MONOTONIC".into(),
            sample_interval_ms,
            throughput_unit: "MB/s (1 MB = 10^6 bytes)".into(),
            payload_unit: "bytes (1 KB = 1024 bytes)".into(),
            spec: spec.clone(),
        }
    }
}

fn hostname() -> String {
    fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "unknown".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub meta: SweepMeta,
    /// In enumeration order.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Load a sweep directory written by [`run_sweep`].
    pub fn load(dir: &Path) -> Result<Self, SweepError> {
        let meta_path = dir.join(META_FILE);
        let meta: SweepMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| {
            SweepError::CorruptResults {
                path: meta_path,
                detail: e.to_string(),
            }
        })?;
        let rows = read_rows(&dir.join(ROWS_FILE))?.0;
        Ok(Self { meta, rows })
    }

    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| r.status != RowStatus::Ok)
    }

    pub fn all_failed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.status == RowStatus::Failed)
    }

    /// Rows as CSV, one line per configuration.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "backend", "transport", "interval_us", "payload_size", "subscribers", "status", "runs_ok",
            "lat_min_us", "lat_avg_us", "lat_p90_us", "lat_p99_us", "lat_max_us", "throughput_mbps",
            "jitter_us", "received", "sent", "cpu_median", "mem_median", "archive",
        ])
        .expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for row in &self.rows {
            let c = &row.config;
            let mut record = vec![
                c.backend.clone(),
                c.transport.to_string(),
                c.interval_us.to_string(),
                c.payload_size.to_string(),
                c.subscribers.to_string(),
                row.status.as_str().to_string(),
                row.runs_ok.to_string(),
            ];
            let m = row.metrics.as_ref();
            let field = |f: fn(&RunMetrics) -> Option<f64>| opt(m.and_then(f));
            record.extend([
                field(|m| Some(m.latency.min)),
                field(|m| Some(m.latency.avg)),
                field(|m| Some(m.latency.p90)),
                field(|m| Some(m.latency.p99)),
                field(|m| Some(m.latency.max)),
                field(|m| Some(m.throughput_mbps)),
                field(|m| m.jitter_us),
                field(|m| Some(m.received)),
                field(|m| Some(m.sent)),
                field(|m| m.cpu_median),
                field(|m| m.mem_median),
                row.archive.clone().unwrap_or_default(),
            ]);
            w.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

/// Rows in `path`, plus whether a torn trailing line was dropped.
fn read_rows(path: &Path) -> Result<(Vec<SweepRow>, bool), SweepError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), false)),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut rows = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<SweepRow>(line) {
            Ok(row) => rows.push(row),
            // A crash mid-append leaves at most one torn final line.
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => return Ok((rows, true)),
            Err(e) => {
                return Err(SweepError::CorruptResults {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok((rows, false))
}

fn write_rows(path: &Path, rows: &[SweepRow]) -> io::Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("row serializes"));
        text.push('\n');
    }
    fs::write(path, text)
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Re-run configurations that already have a row.
    pub force: bool,
    /// Stop after this many newly executed rows (the sweep is resumable).
    pub max_new_rows: Option<usize>,
}

/// Execute a sweep into `dir`, resuming from any rows already there.
///
/// Per-configuration failures become `failed` rows; the sweep continues.
pub fn run_sweep(
    spec: &SweepSpec,
    registry: &BackendRegistry,
    options: &RunnerOptions,
    dir: &Path,
    sweep: &SweepOptions,
) -> Result<SweepResult, SweepError> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let runner = Runner::new(
        registry.clone(),
        RunnerOptions {
            archive_dir: Some(dir.join(RUNS_DIR)),
            ..options.clone()
        },
    );
    let meta = SweepMeta::new(spec, options.sample_interval.map(|d| d.as_millis() as u64));
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta).expect("meta serializes"))?;

    let rows_path = dir.join(ROWS_FILE);
    let (mut existing, torn) = if sweep.force { (Vec::new(), false) } else { read_rows(&rows_path)? };
    let wanted: HashSet<String> = spec.enumerate().iter().map(row_key).collect();
    existing.retain(|r| wanted.contains(&r.key));
    if torn || sweep.force {
        write_rows(&rows_path, &existing)?;
    }
    let done: HashSet<String> = existing.iter().map(|r| r.key.clone()).collect();

    let mut file = OpenOptions::new().create(true).append(true).open(&rows_path)?;
    let mut new_rows = 0;
    for config in spec.enumerate() {
        let key = row_key(&config);
        if done.contains(&key) {
            continue;
        }
        if sweep.max_new_rows.is_some_and(|max| new_rows >= max) {
            break;
        }
        log::info!("running {key}");
        let row = execute_row(&runner, key, config);
        append_row(&mut file, &row)?;
        existing.push(row);
        new_rows += 1;
        let partial = SweepResult {
            meta: meta.clone(),
            rows: ordered(spec, &existing),
        };
        fs::write(dir.join(CSV_FILE), partial.to_csv())?;
    }
    let result = SweepResult {
        meta,
        rows: ordered(spec, &existing),
    };
    fs::write(dir.join(CSV_FILE), result.to_csv())?;
    Ok(result)
}

fn append_row(file: &mut File, row: &SweepRow) -> io::Result<()> {
    let mut line = serde_json::to_string(row).expect("row serializes");
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.sync_data()
}

fn ordered(spec: &SweepSpec, rows: &[SweepRow]) -> Vec<SweepRow> {
    let by_key: BTreeMap<&str, &SweepRow> = rows.iter().map(|r| (r.key.as_str(), r)).collect();
    spec.enumerate()
        .iter()
        .filter_map(|c| by_key.get(row_key(c).as_str()).map(|r| (*r).clone()))
        .collect()
}

fn execute_row(runner: &Runner, key: String, config: ExperimentConfig) -> SweepRow {
    match runner.execute(&config) {
        Ok(outcome) => SweepRow {
            schema: ROW_SCHEMA,
            key,
            status: if outcome.partial { RowStatus::Partial } else { RowStatus::Ok },
            metrics: Some(outcome.metrics),
            runs_ok: outcome.runs.len() as u32,
            error: outcome.failures.first().map(|f| f.error.clone()),
            archive: outcome.archive.map(|a| format!("{RUNS_DIR}/{a}")),
            config,
        },
        Err(e) => {
            log::warn!("{key} failed: {e}");
            let error = match e {
                RunnerError::AllRunsFailed(..) | RunnerError::Config(_) => e.to_string(),
                other => other.to_string(),
            };
            SweepRow {
                schema: ROW_SCHEMA,
                key,
                config,
                status: RowStatus::Failed,
                metrics: None,
                runs_ok: 0,
                error: Some(error),
                archive: None,
            }
        }
    }
}

/// Metric an optimality map ranks backends by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LatencyAvg,
    LatencyP90,
    LatencyP99,
    Throughput,
    Jitter,
    Cpu,
    Memory,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::LatencyAvg,
        Metric::LatencyP90,
        Metric::LatencyP99,
        Metric::Throughput,
        Metric::Jitter,
        Metric::Cpu,
        Metric::Memory,
    ];

    pub fn value(self, m: &RunMetrics) -> Option<f64> {
        match self {
            Metric::LatencyAvg => Some(m.latency.avg),
            Metric::LatencyP90 => Some(m.latency.p90),
            Metric::LatencyP99 => Some(m.latency.p99),
            Metric::Throughput => Some(m.throughput_mbps),
            Metric::Jitter => m.jitter_us,
            Metric::Cpu => m.cpu_median,
            Metric::Memory => m.mem_median,
        }
    }

    /// Throughput is maximized, everything else minimized.
    pub fn direction(self) -> Direction {
        match self {
            Metric::Throughput => Direction::Maximize,
            _ => Direction::Minimize,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::LatencyAvg => "latency_avg",
            Metric::LatencyP90 => "latency_p90",
            Metric::LatencyP99 => "latency_p99",
            Metric::Throughput => "throughput",
            Metric::Jitter => "jitter",
            Metric::Cpu => "cpu",
            Metric::Memory => "memory",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Metric::LatencyAvg | Metric::LatencyP90 | Metric::LatencyP99 | Metric::Jitter => "µs",
            Metric::Throughput => "MB/s",
            Metric::Cpu | Metric::Memory => "%",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityCell {
    pub payload_size: usize,
    pub subscribers: usize,
    pub winner: String,
    pub value: f64,
    /// More than one backend attains the best value.
    pub tie: bool,
}

/// Winning backend per (payload size × subscriber count) cell for one
/// transport and publishing interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityMap {
    pub metric: Metric,
    pub direction: Direction,
    pub transport: Transport,
    pub interval_us: u64,
    /// Backends ranked, in declared order.
    pub backends: Vec<String>,
    pub payload_sizes: Vec<usize>,
    pub subscribers: Vec<usize>,
    /// Row-major: payload size outer, subscribers inner.
    pub cells: Vec<OptimalityCell>,
}

impl OptimalityMap {
    pub fn cell(&self, payload_size: usize, subscribers: usize) -> Option<&OptimalityCell> {
        self.cells
            .iter()
            .find(|c| c.payload_size == payload_size && c.subscribers == subscribers)
    }
}

/// Best backend per grid cell, one map per (transport, interval).
///
/// A backend takes part in a transport's map when it has at least one
/// non-failed row for it; every such backend must then cover every cell.
pub fn optimality(
    result: &SweepResult,
    metric: Metric,
    direction: Option<Direction>,
) -> Result<Vec<OptimalityMap>, SweepError> {
    let direction = direction.unwrap_or(metric.direction());
    let spec = &result.meta.spec;
    let mut values: BTreeMap<(&str, Transport, u64, usize, usize), f64> = BTreeMap::new();
    for row in &result.rows {
        if row.status == RowStatus::Failed {
            continue;
        }
        if let Some(v) = row.metrics.as_ref().and_then(|m| metric.value(m)) {
            let c = &row.config;
            values.insert((c.backend.as_str(), c.transport, c.interval_us, c.payload_size, c.subscribers), v);
        }
    }
    let sizes: Vec<usize> = spec.payload_sizes.iter().map(|s| s.bytes()).collect();
    let mut maps = Vec::new();
    for &transport in &spec.transports {
        for &interval_us in &spec.intervals_us {
            let backends: Vec<&String> = spec
                .backends
                .iter()
                .filter(|b| values.keys().any(|k| k.0 == b.as_str() && k.1 == transport && k.2 == interval_us))
                .collect();
            if backends.is_empty() {
                continue;
            }
            let mut cells = Vec::with_capacity(sizes.len() * spec.subscribers.len());
            for &payload_size in &sizes {
                for &subscribers in &spec.subscribers {
                    let mut best: Option<(&String, f64)> = None;
                    let mut tie = false;
                    for backend in &backends {
                        let key = (backend.as_str(), transport, interval_us, payload_size, subscribers);
                        let v = *values.get(&key).ok_or_else(|| SweepError::IncompleteGrid {
                            transport,
                            interval_us,
                            backend: backend.to_string(),
                            payload_size,
                            subscribers,
                        })?;
                        match best {
                            None => best = Some((backend, v)),
                            Some((_, b)) if v == b => tie = true,
                            Some((_, b)) => {
                                let better = match direction {
                                    Direction::Minimize => v < b,
                                    Direction::Maximize => v > b,
                                };
                                if better {
                                    best = Some((backend, v));
                                    tie = false;
                                }
                            }
                        }
                    }
                    let (winner, value) = best.expect("at least one backend");
                    cells.push(OptimalityCell {
                        payload_size,
                        subscribers,
                        winner: winner.clone(),
                        value,
                        tie,
                    });
                }
            }
            maps.push(OptimalityMap {
                metric,
                direction,
                transport,
                interval_us,
                backends: backends.into_iter().cloned().collect(),
                payload_sizes: sizes.clone(),
                subscribers: spec.subscribers.clone(),
                cells,
            });
        }
    }
    Ok(maps)
}
