//! Execute one experiment configuration `R` times.
//!
//! A single run binds the publisher, starts `S` subscribers, waits for the
//! publisher delay, then publishes `C` timestamped payloads on an absolute
//! schedule of one every `T` microseconds (`T = 0` publishes back to back).
//! Subscribers stop after `C` messages, after a silence timeout, or when the
//! publisher closes the stream.
//!
//! Metrics are computed per subscriber, averaged over the subscribers of a
//! run, then averaged over runs.
//!
//! Two process topologies exist. With threads, publisher and subscribers
//! share the harness process (mandatory for the in-process transport). With
//! processes, each role is a separate program speaking the adapter protocol;
//! that is how out-of-tree shims always run, and how in-tree backends run on
//! stream transports when [`RunnerOptions::role_command`] is set.

use std::collections::BTreeMap;
use std::io::Read;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapter::{AdapterError, PublisherReport, Role, RoleArgs, SubscriberReport};
use crate::affinity::{self, CorePlan};
use crate::backend::{
    Backend, BackendDescriptor, BackendEntry, BackendError, BackendRegistry, Endpoint, PublisherHandle, QueueStats,
    Reception, SubscriberHandle, Transport, Tuning,
};
use crate::clock::Clock;
use crate::codec::{self, CodecError, MIN_PAYLOAD_SIZE};
use crate::metrics::{self, LatencySeries, MetricsError, RunMetrics, ThroughputInput};
use crate::sampler::{self, ResourceSummary, ResourceTimeline, SamplerError};

/// Default silence after which a subscriber gives up waiting.
pub const DEFAULT_SILENCE_TIMEOUT: Duration = Duration::from_millis(5000);

/// How long a publisher waits for all subscribers to attach after its delay.
pub const SUBSCRIBER_WAIT: Duration = Duration::from_secs(5);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("at least one subscriber is required")]
    NoSubscribers,
    #[error("at least one message must be sent")]
    NoMessages,
    #[error("payload size {0} is below the {MIN_PAYLOAD_SIZE}-byte minimum")]
    PayloadTooSmall(usize),
    #[error("at least one repetition is required")]
    NoRepetitions,
    #[error("{0}")]
    Pinning(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("negative latency ({latency_ns} ns): sender and receiver clocks disagree")]
    NegativeLatency { latency_ns: i128 },
    #[error("subscriber {subscriber} received no messages")]
    TotalLoss { subscriber: usize },
    #[error("{role} process failed: {detail}")]
    RoleProcess { role: Role, detail: String },
    #[error("execution unit panicked: {0}")]
    Panicked(String),
    #[error("all {0} runs failed; first error: {1}")]
    AllRunsFailed(usize, String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// One point in parameter space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub backend: String,
    pub transport: Transport,
    /// Explicit address; chosen per run when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub subscribers: usize,
    pub count: u64,
    pub interval_us: u64,
    pub payload_size: usize,
    pub delay_ms: u64,
    pub repetitions: u32,
    /// Cores for the publisher then each subscriber; empty disables pinning.
    #[serde(default)]
    pub pinning: Vec<usize>,
    #[serde(default)]
    pub tuning: Tuning,
}

/// Publishing-interval presets for the three baseline analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Paced at 1000 µs so queueing does not mix into latency.
    Latency,
    /// Unpaced.
    Throughput,
    /// Unpaced, the most resource-intensive case.
    Cpu,
}

impl Profile {
    pub fn interval_us(self) -> u64 {
        match self {
            Profile::Latency => 1000,
            Profile::Throughput | Profile::Cpu => 0,
        }
    }
}

impl ExperimentConfig {
    /// Baseline: 32 KB payloads, one subscriber, 5000 messages, 1000 ms
    /// publisher delay, 4 repetitions, interval from the profile.
    pub fn baseline(backend: impl Into<String>, transport: Transport, profile: Profile) -> Self {
        Self {
            backend: backend.into(),
            transport,
            endpoint: None,
            subscribers: 1,
            count: 5000,
            interval_us: profile.interval_us(),
            payload_size: 32 * 1024,
            delay_ms: 1000,
            repetitions: 4,
            pinning: Vec::new(),
            tuning: Tuning::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.subscribers == 0 {
            return Err(ConfigError::NoSubscribers);
        }
        if self.count == 0 {
            return Err(ConfigError::NoMessages);
        }
        if self.payload_size < MIN_PAYLOAD_SIZE {
            return Err(ConfigError::PayloadTooSmall(self.payload_size));
        }
        if self.repetitions == 0 {
            return Err(ConfigError::NoRepetitions);
        }
        CorePlan::new(&self.pinning, self.subscribers).map_err(ConfigError::Pinning)?;
        if let Some(address) = &self.endpoint {
            Endpoint::new(self.transport, address.clone()).map_err(|e| ConfigError::Unsupported(e.to_string()))?;
        }
        Ok(())
    }

    /// Stable short identifier of this configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunnerOptions {
    /// `None` disables CPU/memory sampling.
    pub sample_interval: Option<Duration>,
    pub silence_timeout: Duration,
    /// Root for per-configuration archives; nothing is written when `None`.
    pub archive_dir: Option<PathBuf>,
    /// Directory for socket files.
    pub run_dir: PathBuf,
    /// Program (and leading arguments) that runs one role of an in-tree
    /// backend. When set, in-tree backends on stream transports run as one
    /// process per role.
    pub role_command: Option<Vec<String>>,
    /// Re-run a failed repetition once before counting it as failed.
    pub retry_failed: bool,
}

impl Default for RunnerOptions {
    fn default() -> Self {
        Self {
            sample_interval: Some(sampler::DEFAULT_INTERVAL),
            silence_timeout: DEFAULT_SILENCE_TIMEOUT,
            archive_dir: None,
            run_dir: std::env::temp_dir(),
            role_command: None,
            retry_failed: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacingReport {
    pub interval_us: u64,
    /// `(C - 1) * T`: span between first and last send on a perfect schedule.
    pub target_span_ns: u64,
    pub achieved_span_ns: u64,
    /// Mean lateness per inter-send gap, in nanoseconds.
    pub mean_overshoot_ns: f64,
    pub achieved_rate_hz: Option<f64>,
}

impl PacingReport {
    pub fn from_report(report: &PublisherReport, interval_us: u64) -> Self {
        let gaps = report.sent.saturating_sub(1);
        let target = gaps * interval_us * 1000;
        let achieved = report.last_send_ns.saturating_sub(report.first_send_ns);
        Self {
            interval_us,
            target_span_ns: target,
            achieved_span_ns: achieved,
            mean_overshoot_ns: if gaps > 0 {
                (achieved as f64 - target as f64) / gaps as f64
            } else {
                0.0
            },
            achieved_rate_hz: (achieved > 0).then(|| gaps as f64 / (achieved as f64 / 1e9)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Threads,
    Processes,
}

/// Raw data collected by one subscriber.
#[derive(Debug, Clone, PartialEq)]
pub struct SubscriberOutcome {
    pub series: LatencySeries,
    pub last_recv_ns: Option<u64>,
}

impl SubscriberOutcome {
    pub fn received(&self) -> u64 {
        self.series.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: u32,
    pub attempt: u32,
    pub topology: Topology,
    pub per_subscriber: Vec<RunMetrics>,
    pub publisher: PublisherReport,
    pub pacing: PacingReport,
    /// Publisher-side queue accounting (in-tree, threaded runs only).
    pub queues: Vec<QueueStats>,
    pub metrics: RunMetrics,
    #[serde(skip)]
    pub series: Vec<LatencySeries>,
    #[serde(skip)]
    pub timeline: Option<ResourceTimeline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run_index: u32,
    pub attempt: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub descriptor: BackendDescriptor,
    pub metrics: RunMetrics,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    /// Some repetition failed even after its retry.
    pub partial: bool,
    pub sample_interval_ms: Option<u64>,
    /// Archive directory relative to the archive root, when one was written.
    pub archive: Option<String>,
}

/// Publish `count` payloads of `size` bytes on an absolute schedule.
///
/// Waits for `delay` first, and additionally for `await_subscribers`
/// subscribers to attach (bounded by [`SUBSCRIBER_WAIT`]).
pub fn run_publisher(
    handle: &mut dyn PublisherHandle,
    clock: &dyn Clock,
    count: u64,
    size: usize,
    interval_us: u64,
    delay: Duration,
    await_subscribers: usize,
) -> Result<PublisherReport, RunnerError> {
    let start = clock.mono_ns();
    clock.sleep_until(start + delay.as_nanos() as u64);
    let wait_deadline = Instant::now() + SUBSCRIBER_WAIT;
    while handle.subscriber_count() < await_subscribers && Instant::now() < wait_deadline {
        std::thread::sleep(Duration::from_millis(1));
    }
    if handle.subscriber_count() < await_subscribers {
        log::warn!(
            "publishing with {} of {await_subscribers} subscribers attached",
            handle.subscriber_count()
        );
    }

    let period_ns = interval_us * 1000;
    let mut buf = Vec::with_capacity(size);
    let mut first_send = 0;
    let mut last_send = 0;
    let base = clock.mono_ns();
    for i in 0..count {
        if period_ns > 0 {
            clock.sleep_until(base + i * period_ns);
        }
        codec::encode_into(clock.wall_ns(), size, &mut buf)?;
        let now = clock.mono_ns();
        if i == 0 {
            first_send = now;
        }
        handle.send(&buf)?;
        last_send = now;
    }
    Ok(PublisherReport::new(first_send, last_send, count))
}

/// Receive until `count` messages arrived, the publisher closed, or nothing
/// arrived for the silence timeout (`first_timeout` applies before the first
/// message).
pub fn run_subscriber(
    handle: &mut dyn SubscriberHandle,
    count: u64,
    size: usize,
    first_timeout: Duration,
    silence_timeout: Duration,
) -> Result<SubscriberOutcome, RunnerError> {
    let mut latencies = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut last_recv_ns = None;
    while (latencies.len() as u64) < count {
        let timeout = if latencies.is_empty() { first_timeout } else { silence_timeout };
        match handle.receive(timeout)? {
            Reception::Message(delivery) => {
                let sent = codec::decode(&delivery.bytes, size)?;
                let latency_ns = delivery.wall_ns as i128 - sent as i128;
                if latency_ns < 0 {
                    return Err(RunnerError::NegativeLatency { latency_ns });
                }
                latencies.push(latency_ns as f64 / 1000.0);
                last_recv_ns = Some(delivery.mono_ns);
            }
            Reception::TimedOut | Reception::Closed => break,
        }
    }
    Ok(SubscriberOutcome {
        series: LatencySeries::new(latencies)?,
        last_recv_ns,
    })
}

/// Metrics of one subscriber within one run.
pub fn subscriber_metrics(
    subscriber: usize,
    outcome: &SubscriberOutcome,
    publisher: &PublisherReport,
    size: usize,
    resources: Option<ResourceSummary>,
) -> Result<RunMetrics, RunnerError> {
    let latency = match metrics::latency_stats(&outcome.series) {
        Ok(stats) => stats,
        Err(MetricsError::EmptySeries) => return Err(RunnerError::TotalLoss { subscriber }),
        Err(e) => return Err(e.into()),
    };
    let throughput = metrics::throughput(&ThroughputInput {
        received: outcome.received(),
        payload_size: size,
        first_send_ns: publisher.first_send_ns,
        last_recv_ns: outcome.last_recv_ns.unwrap_or(0),
    })?;
    Ok(RunMetrics {
        latency,
        throughput_mbps: throughput,
        jitter_us: metrics::jitter(&outcome.series).ok(),
        received: outcome.received() as f64,
        sent: publisher.sent as f64,
        cpu_median: resources.map(|r| r.cpu_median),
        mem_median: resources.map(|r| r.mem_median),
    })
}

/// Serve one role of the adapter protocol with an in-tree backend and return
/// the JSON report to print.
pub fn run_role(
    backend: &dyn Backend,
    args: &RoleArgs,
    tuning: &Tuning,
    silence_timeout: Duration,
) -> Result<String, RunnerError> {
    let endpoint = Endpoint::new(args.transport, args.endpoint.clone())?;
    backend.descriptor().check_transport(args.transport)?;
    let clock = backend.clock();
    let delay = Duration::from_millis(args.delay_ms);
    let json = match args.role {
        Role::Pub => {
            let mut handle = backend.bind(&endpoint, tuning)?;
            let report = run_publisher(handle.as_mut(), clock.as_ref(), args.count, args.size, args.interval_us, delay, 0)?;
            handle.close()?;
            serde_json::to_string(&report).expect("report serializes")
        }
        Role::Sub => {
            let mut handle = backend.connect(&endpoint, tuning)?;
            let first = delay + SUBSCRIBER_WAIT + silence_timeout;
            let outcome = run_subscriber(handle.as_mut(), args.count, args.size, first, silence_timeout)?;
            let report = SubscriberReport::new(outcome.series.into(), outcome.last_recv_ns.unwrap_or(0));
            serde_json::to_string(&report).expect("report serializes")
        }
    };
    Ok(json)
}

struct RawRun {
    topology: Topology,
    publisher: PublisherReport,
    subscribers: Vec<SubscriberOutcome>,
    queues: Vec<QueueStats>,
    timeline: Option<ResourceTimeline>,
}

fn next_run_id() -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    format!("{}-{}", std::process::id(), COUNTER.fetch_add(1, Ordering::Relaxed))
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

pub struct Runner {
    registry: BackendRegistry,
    options: RunnerOptions,
}

impl Runner {
    pub fn new(registry: BackendRegistry, options: RunnerOptions) -> Self {
        Self { registry, options }
    }

    pub fn registry(&self) -> &BackendRegistry {
        &self.registry
    }

    pub fn options(&self) -> &RunnerOptions {
        &self.options
    }

    /// Validate `config` against this runner's backends.
    pub fn check(&self, config: &ExperimentConfig) -> Result<&BackendEntry, ConfigError> {
        config.validate()?;
        let entry = self
            .registry
            .get(&config.backend)
            .ok_or_else(|| ConfigError::UnknownBackend(config.backend.clone()))?;
        entry
            .descriptor()
            .check_transport(config.transport)
            .map_err(|e| ConfigError::Unsupported(e.to_string()))?;
        Ok(entry)
    }

    pub fn execute(&self, config: &ExperimentConfig) -> Result<ExperimentOutcome, RunnerError> {
        let entry = self.check(config)?.clone();
        let attempts = if self.options.retry_failed { 2 } else { 1 };
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        for run_index in 0..config.repetitions {
            for attempt in 0..attempts {
                match self.run_once(&entry, config).and_then(|raw| self.record(run_index, attempt, config, raw)) {
                    Ok(record) => {
                        runs.push(record);
                        break;
                    }
                    Err(e) => {
                        log::warn!("run {run_index} attempt {attempt} of {} failed: {e}", config.backend);
                        failures.push(RunFailure {
                            run_index,
                            attempt,
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
        if runs.is_empty() {
            let first = failures.first().map(|f| f.error.clone()).unwrap_or_default();
            return Err(RunnerError::AllRunsFailed(config.repetitions as usize, first));
        }
        let per_run: Vec<RunMetrics> = runs.iter().map(|r| r.metrics).collect();
        let metrics = metrics::average_runs(&per_run)?;
        let partial = runs.len() < config.repetitions as usize;
        let mut outcome = ExperimentOutcome {
            config: config.clone(),
            descriptor: entry.descriptor().clone(),
            metrics,
            runs,
            failures,
            partial,
            sample_interval_ms: self.options.sample_interval.map(|d| d.as_millis() as u64),
            archive: None,
        };
        if let Some(root) = &self.options.archive_dir {
            outcome.archive = Some(write_archive(root, &outcome)?);
        }
        Ok(outcome)
    }

    fn record(&self, run_index: u32, attempt: u32, config: &ExperimentConfig, raw: RawRun) -> Result<RunRecord, RunnerError> {
        let resources = match &raw.timeline {
            Some(t) => sampler::aggregate(t).ok(),
            None => None,
        };
        let per_subscriber = raw
            .subscribers
            .iter()
            .enumerate()
            .map(|(i, s)| subscriber_metrics(i, s, &raw.publisher, config.payload_size, resources))
            .collect::<Result<Vec<_>, _>>()?;
        let metrics = metrics::average_subscribers(&per_subscriber)?;
        Ok(RunRecord {
            run_index,
            attempt,
            topology: raw.topology,
            pacing: PacingReport::from_report(&raw.publisher, config.interval_us),
            publisher: raw.publisher,
            queues: raw.queues,
            metrics,
            per_subscriber,
            series: raw.subscribers.into_iter().map(|s| s.series).collect(),
            timeline: raw.timeline,
        })
    }

    fn run_once(&self, entry: &BackendEntry, config: &ExperimentConfig) -> Result<RawRun, RunnerError> {
        let run_id = next_run_id();
        match entry {
            BackendEntry::InTree(backend) => match (&self.options.role_command, config.transport) {
                (Some(cmd), Transport::InterProcess | Transport::Tcp) => {
                    let mut command = cmd.clone();
                    command.extend([
                        "--backend".to_string(),
                        config.backend.clone(),
                        "--queue-capacity".into(),
                        config.tuning.queue_capacity.to_string(),
                        "--socket-buffer".into(),
                        config.tuning.socket_buffer_bytes.to_string(),
                    ]);
                    self.run_processes(&command, config, &run_id)
                }
                _ => self.run_threads(Arc::clone(backend), config, &run_id),
            },
            BackendEntry::Adapter(descriptor) => {
                let command = descriptor.adapter_command.clone().unwrap_or_default();
                if command.is_empty() {
                    return Err(ConfigError::Unsupported(format!("adapter `{}` has no command", descriptor.name)).into());
                }
                self.run_processes(&command, config, &run_id)
            }
        }
    }

    fn endpoint_for(&self, config: &ExperimentConfig, run_id: &str, fixed_port: bool) -> Result<Endpoint, RunnerError> {
        if let Some(address) = &config.endpoint {
            return Ok(Endpoint::new(config.transport, address.clone())?);
        }
        let endpoint = match config.transport {
            Transport::InProcess => Endpoint::inproc(format!("{}-{run_id}", config.backend))?,
            Transport::InterProcess => {
                let path = self.options.run_dir.join(format!("{}-{run_id}.sock", config.backend));
                Endpoint::ipc(path.to_string_lossy().into_owned())?
            }
            Transport::Tcp if fixed_port => {
                // Subscribers in other processes need the port up front.
                let port = TcpListener::bind("127.0.0.1:0")?.local_addr()?.port();
                Endpoint::tcp(format!("127.0.0.1:{port}"))?
            }
            Transport::Tcp => Endpoint::tcp("127.0.0.1:0")?,
        };
        Ok(endpoint)
    }

    fn run_threads(&self, backend: Arc<dyn Backend>, config: &ExperimentConfig, run_id: &str) -> Result<RawRun, RunnerError> {
        let plan = CorePlan::new(&config.pinning, config.subscribers).map_err(ConfigError::Pinning)?;
        let clock = backend.clock();
        let endpoint = self.endpoint_for(config, run_id, false)?;
        let mut publisher = backend.bind(&endpoint, &config.tuning)?;
        let bound = publisher.endpoint().clone();

        let sampler = match self.options.sample_interval {
            Some(interval) => match sampler::sample_loop(&[std::process::id()], interval) {
                Ok(handle) => Some(handle),
                Err(e) => {
                    log::warn!("resource sampling disabled: {e}");
                    None
                }
            },
            None => None,
        };

        let delay = Duration::from_millis(config.delay_ms);
        let first_timeout = delay + SUBSCRIBER_WAIT + self.options.silence_timeout;
        let silence = self.options.silence_timeout;
        let subscribers: Vec<JoinHandle<Result<SubscriberOutcome, RunnerError>>> = (0..config.subscribers)
            .map(|i| {
                let backend = Arc::clone(&backend);
                let endpoint = bound.clone();
                let tuning = config.tuning;
                let core = plan.subscribers[i];
                let (count, size) = (config.count, config.payload_size);
                std::thread::Builder::new()
                    .name(format!("subscriber-{i}"))
                    .spawn(move || {
                        affinity::pin_or_warn(core, "subscriber");
                        let mut handle = backend.connect(&endpoint, &tuning)?;
                        run_subscriber(handle.as_mut(), count, size, first_timeout, silence)
                    })
                    .expect("spawn subscriber thread")
            })
            .collect();

        let pub_core = plan.publisher;
        let (count, size, interval, s) = (config.count, config.payload_size, config.interval_us, config.subscribers);
        let pub_clock = Arc::clone(&clock);
        let publisher_thread = std::thread::Builder::new()
            .name("publisher".into())
            .spawn(move || -> Result<(PublisherReport, Vec<QueueStats>), RunnerError> {
                affinity::pin_or_warn(pub_core, "publisher");
                let sent = run_publisher(publisher.as_mut(), pub_clock.as_ref(), count, size, interval, delay, s);
                let queues = publisher.close();
                let report = sent?;
                Ok((report, queues?))
            })
            .expect("spawn publisher thread");

        let published = publisher_thread.join().map_err(|p| RunnerError::Panicked(panic_message(p)));
        let mut outcomes = Vec::with_capacity(subscribers.len());
        let mut first_error = None;
        for handle in subscribers {
            match handle.join() {
                Ok(Ok(o)) => outcomes.push(o),
                Ok(Err(e)) => {
                    first_error.get_or_insert(e);
                }
                Err(p) => {
                    first_error.get_or_insert(RunnerError::Panicked(panic_message(p)));
                }
            }
        }
        let timeline = sampler.map(|s| s.stop());
        let (publisher, queues) = published??;
        if let Some(e) = first_error {
            return Err(e);
        }
        Ok(RawRun {
            topology: Topology::Threads,
            publisher,
            subscribers: outcomes,
            queues,
            timeline,
        })
    }

    fn run_processes(&self, command: &[String], config: &ExperimentConfig, run_id: &str) -> Result<RawRun, RunnerError> {
        let plan = CorePlan::new(&config.pinning, config.subscribers).map_err(ConfigError::Pinning)?;
        let endpoint = self.endpoint_for(config, run_id, true)?;
        let role_args = |role| RoleArgs {
            role,
            endpoint: endpoint.address.clone(),
            transport: config.transport,
            count: config.count,
            size: config.payload_size,
            interval_us: config.interval_us,
            delay_ms: config.delay_ms,
        };
        let spawn = |role: Role, core: Option<usize>| -> Result<RoleProcess, RunnerError> {
            let mut cmd = Command::new(&command[0]);
            cmd.args(&command[1..])
                .args(role_args(role).to_args())
                .stdin(Stdio::null())
                .stdout(Stdio::piped())
                .stderr(Stdio::piped());
            if let Some(core) = core {
                affinity::pin_child(&mut cmd, core);
            }
            let child = cmd.spawn().map_err(|e| RunnerError::RoleProcess {
                role,
                detail: format!("cannot launch `{}`: {e}", command[0]),
            })?;
            Ok(RoleProcess::new(role, child))
        };

        let mut children = Vec::with_capacity(config.subscribers + 1);
        for i in 0..config.subscribers {
            match spawn(Role::Sub, plan.subscribers[i]) {
                Ok(c) => children.push(c),
                Err(e) => {
                    children.iter_mut().for_each(RoleProcess::kill);
                    return Err(e);
                }
            }
        }
        match spawn(Role::Pub, plan.publisher) {
            Ok(c) => children.push(c),
            Err(e) => {
                children.iter_mut().for_each(RoleProcess::kill);
                return Err(e);
            }
        }
        let pids: Vec<u32> = children.iter().map(|c| c.child.id()).collect();
        let sampler = match self.options.sample_interval {
            Some(interval) => sampler::sample_loop(&pids, interval)
                .map_err(|e| log::warn!("resource sampling disabled: {e}"))
                .ok(),
            None => None,
        };

        let budget = Duration::from_millis(config.delay_ms)
            + SUBSCRIBER_WAIT * 2
            + self.options.silence_timeout * 2
            + Duration::from_micros(config.interval_us.saturating_mul(config.count).saturating_mul(2))
            + Duration::from_secs(30);
        let deadline = Instant::now() + budget;
        let mut outputs = Vec::with_capacity(children.len());
        let mut failure = None;
        for child in &mut children {
            match child.finish(deadline) {
                Ok(out) => outputs.push(out),
                Err(e) => {
                    failure.get_or_insert(e);
                    outputs.push(String::new());
                }
            }
        }
        let timeline = sampler.map(|s| s.stop());
        if let Some(e) = failure {
            children.iter_mut().for_each(RoleProcess::kill);
            return Err(e);
        }
        let publisher = PublisherReport::parse(outputs.last().expect("publisher output"))?;
        let subscribers = outputs[..config.subscribers]
            .iter()
            .map(|json| {
                let report = SubscriberReport::parse(json)?;
                Ok(SubscriberOutcome {
                    series: LatencySeries::new(report.latencies_us)?,
                    last_recv_ns: (report.received > 0).then_some(report.last_recv_ns),
                })
            })
            .collect::<Result<Vec<_>, RunnerError>>()?;
        Ok(RawRun {
            topology: Topology::Processes,
            publisher,
            subscribers,
            queues: Vec::new(),
            timeline,
        })
    }
}

struct RoleProcess {
    role: Role,
    child: Child,
    stdout: Option<JoinHandle<String>>,
    stderr: Option<JoinHandle<String>>,
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> Option<JoinHandle<String>> {
    pipe.map(|mut p| {
        std::thread::spawn(move || {
            let mut out = String::new();
            let _ = p.read_to_string(&mut out);
            out
        })
    })
}

impl RoleProcess {
    fn new(role: Role, mut child: Child) -> Self {
        let stdout = drain(child.stdout.take());
        let stderr = drain(child.stderr.take());
        Self {
            role,
            child,
            stdout,
            stderr,
        }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn finish(&mut self, deadline: Instant) -> Result<String, RunnerError> {
        let status = loop {
            if let Some(status) = self.child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                self.kill();
                return Err(RunnerError::RoleProcess {
                    role: self.role,
                    detail: "timed out".into(),
                });
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let stdout = self.stdout.take().map(|h| h.join().unwrap_or_default()).unwrap_or_default();
        let stderr = self.stderr.take().map(|h| h.join().unwrap_or_default()).unwrap_or_default();
        if !status.success() {
            return Err(RunnerError::RoleProcess {
                role: self.role,
                detail: format!("{status}: {}", stderr.trim()),
            });
        }
        Ok(stdout)
    }
}

/// Write raw per-run data under `<root>/<config-hash>/` and return the
/// directory name relative to `root`.
fn write_archive(root: &Path, outcome: &ExperimentOutcome) -> Result<String, RunnerError> {
    let name = outcome.config.hash();
    let dir = root.join(&name);
    std::fs::create_dir_all(&dir)?;
    let snapshot = serde_json::json!({
        "config": outcome.config,
        "backend": outcome.descriptor,
        "sample_interval_ms": outcome.sample_interval_ms,
    });
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&snapshot).expect("json"))?;
    for run in &outcome.runs {
        let run_dir = dir.join(format!("run-{}", run.run_index));
        std::fs::create_dir_all(&run_dir)?;
        std::fs::write(run_dir.join("publisher.json"), serde_json::to_string_pretty(&run.publisher).expect("json"))?;
        let summary: BTreeMap<&str, serde_json::Value> = [
            ("pacing", serde_json::to_value(run.pacing).expect("json")),
            ("queues", serde_json::to_value(&run.queues).expect("json")),
            ("per_subscriber", serde_json::to_value(&run.per_subscriber).expect("json")),
            ("metrics", serde_json::to_value(run.metrics).expect("json")),
        ]
        .into_iter()
        .collect();
        std::fs::write(run_dir.join("run.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
        for (i, series) in run.series.iter().enumerate() {
            let mut csv = String::from("latency_us\n");
            for v in series.values() {
                csv.push_str(&format!("{v}\n"));
            }
            std::fs::write(run_dir.join(format!("sub-{i}.csv")), csv)?;
        }
        if let Some(t) = &run.timeline {
            std::fs::write(run_dir.join("timeline.csv"), t.to_csv())?;
        }
    }
    Ok(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stub::StubBackend;

    fn quick(backend: &str, transport: Transport) -> ExperimentConfig {
        ExperimentConfig {
            count: 50,
            interval_us: 100,
            payload_size: 1024,
            delay_ms: 5,
            repetitions: 1,
            ..ExperimentConfig::baseline(backend, transport, Profile::Latency)
        }
    }

    fn runner_with(backend: Arc<dyn Backend>) -> Runner {
        let mut registry = BackendRegistry::with_defaults();
        registry.register(backend);
        Runner::new(
            registry,
            RunnerOptions {
                sample_interval: None,
                silence_timeout: Duration::from_millis(500),
                ..RunnerOptions::default()
            },
        )
    }

    #[test]
    fn config_validation() {
        let base = quick("refbus", Transport::InProcess);
        assert!(base.validate().is_ok());
        assert_eq!(ExperimentConfig { subscribers: 0, ..base.clone() }.validate(), Err(ConfigError::NoSubscribers));
        assert_eq!(ExperimentConfig { count: 0, ..base.clone() }.validate(), Err(ConfigError::NoMessages));
        assert_eq!(ExperimentConfig { payload_size: 8, ..base.clone() }.validate(), Err(ConfigError::PayloadTooSmall(8)));
        assert_eq!(ExperimentConfig { repetitions: 0, ..base.clone() }.validate(), Err(ConfigError::NoRepetitions));
        assert!(ExperimentConfig { pinning: vec![0], ..base.clone() }.validate().is_err());
        assert!(ExperimentConfig { pinning: vec![0, 1], ..base }.validate().is_ok());
    }

    #[test]
    fn baseline_matches_table_values() {
        let c = ExperimentConfig::baseline("refbus", Transport::Tcp, Profile::Latency);
        assert_eq!((c.interval_us, c.payload_size, c.subscribers, c.count, c.delay_ms, c.repetitions), (1000, 32768, 1, 5000, 1000, 4));
        assert_eq!(Profile::Throughput.interval_us(), 0);
        assert_eq!(Profile::Cpu.interval_us(), 0);
    }

    #[test]
    fn config_hash_is_stable_and_discriminating() {
        let a = quick("refbus", Transport::Tcp);
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), ExperimentConfig { subscribers: 2, ..a.clone() }.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn unknown_backend_and_transport() {
        let r = runner_with(Arc::new(StubBackend::new("stub", 10_000)));
        assert!(matches!(r.check(&quick("nope", Transport::Tcp)), Err(ConfigError::UnknownBackend(_))));
    }

    #[test]
    fn single_message_has_no_jitter() {
        let r = runner_with(Arc::new(StubBackend::new("stub", 10_000)));
        let out = r.execute(&ExperimentConfig { count: 1, ..quick("stub", Transport::InProcess) }).unwrap();
        assert_eq!(out.metrics.received, 1.0);
        assert_eq!(out.metrics.jitter_us, None);
        assert_eq!(out.metrics.latency.avg, 10.0);
    }

    #[test]
    fn stub_pipeline_is_analytic() {
        let r = runner_with(Arc::new(StubBackend::new("stub", 10_000)));
        let cfg = ExperimentConfig { subscribers: 2, repetitions: 2, ..quick("stub", Transport::InProcess) };
        let out = r.execute(&cfg).unwrap();
        assert_eq!(out.metrics.latency.avg, 10.0);
        assert_eq!(out.metrics.jitter_us, Some(0.0));
        assert_eq!(out.runs.len(), 2);
        assert!(!out.partial);
        // 50 messages of 1024 B over 49 * 100 µs + 10 µs
        let expected = 50.0 * 1024.0 / (4_910_000.0 / 1e9) / 1e6;
        assert_eq!(out.metrics.throughput_mbps, expected);
        assert_eq!(out.runs[0].pacing.mean_overshoot_ns, 0.0);
    }

    #[test]
    fn refbus_inproc_loss_free() {
        let r = runner_with(Arc::new(crate::refbus::Refbus::new()));
        let out = r.execute(&ExperimentConfig { subscribers: 2, ..quick("refbus", Transport::InProcess) }).unwrap();
        assert_eq!(out.metrics.received, 50.0);
        assert_eq!(out.runs[0].queues.iter().map(|q| q.dropped).sum::<u64>(), 0);
        assert!(out.metrics.latency.min >= 0.0);
    }

    #[test]
    fn refbus_stream_transports_in_threads() {
        let r = runner_with(Arc::new(crate::refbus::Refbus::new()));
        for t in [Transport::InterProcess, Transport::Tcp] {
            let out = r.execute(&quick("refbus", t)).unwrap();
            assert_eq!(out.metrics.received, 50.0, "{t}");
        }
    }

    #[test]
    fn missing_adapter_binary_fails_all_runs() {
        let mut registry = BackendRegistry::empty();
        registry.register_adapter(BackendDescriptor::adapter(
            "ghost",
            vec!["/nonexistent/shim".into()],
            [Transport::Tcp],
        ));
        let r = Runner::new(registry, RunnerOptions { sample_interval: None, ..RunnerOptions::default() });
        let err = r.execute(&quick("ghost", Transport::Tcp)).unwrap_err();
        assert!(matches!(err, RunnerError::AllRunsFailed(1, _)), "{err}");
    }

    #[test]
    fn archive_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = BackendRegistry::empty();
        registry.register(Arc::new(StubBackend::new("stub", 10_000)));
        let r = Runner::new(
            registry,
            RunnerOptions {
                sample_interval: None,
                archive_dir: Some(dir.path().to_path_buf()),
                ..RunnerOptions::default()
            },
        );
        let cfg = quick("stub", Transport::InProcess);
        let out = r.execute(&cfg).unwrap();
        let name = out.archive.unwrap();
        assert_eq!(name, cfg.hash());
        let run = dir.path().join(&name).join("run-0");
        assert!(dir.path().join(&name).join("config.json").exists());
        assert!(run.join("publisher.json").exists());
        let csv = std::fs::read_to_string(run.join("sub-0.csv")).unwrap();
        assert_eq!(csv.lines().count(), 51);
    }
}
