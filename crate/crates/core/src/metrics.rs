//! Figures of merit computed from raw measurement data.
//!
//! Everything here is a pure function over immutable inputs. Latencies are
//! microseconds, payload sizes bytes, throughput megabytes (10^6 bytes) per
//! second.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("latency series is empty (every message was lost)")]
    EmptySeries,
    #[error("jitter needs at least two latencies, got {0}")]
    InsufficientSamples(usize),
    #[error("no messages were received")]
    NoMessages,
    #[error("last receive ({last_recv_ns} ns) is not after first send ({first_send_ns} ns)")]
    ZeroSpan { first_send_ns: u64, last_recv_ns: u64 },
    #[error("nothing to average")]
    EmptyList,
    #[error("latency #{index} is {value}; latencies must be finite and non-negative")]
    InvalidLatency { index: usize, value: f64 },
}

/// One-way latencies in microseconds, kept in reception order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LatencySeries(Vec<f64>);

impl LatencySeries {
    pub fn new(values: Vec<f64>) -> Result<Self, MetricsError> {
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(MetricsError::InvalidLatency { index, value });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for LatencySeries {
    type Error = MetricsError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<LatencySeries> for Vec<f64> {
    fn from(series: LatencySeries) -> Self {
        series.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub min: f64,
    pub avg: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentile on an ascending slice: the element at 1-based rank
/// `ceil(percent / 100 * n)`, computed in integers so that e.g. p90 of 100
/// samples is exactly the 90th.
fn nearest_rank(sorted: &[f64], percent: usize) -> f64 {
    let n = sorted.len();
    let rank = (percent * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

pub fn latency_stats(series: &LatencySeries) -> Result<LatencyStats, MetricsError> {
    if series.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    let mut sorted = series.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let sum: f64 = series.values().iter().sum();
    let avg = sum / sorted.len() as f64;
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    Ok(LatencyStats {
        min,
        // Rounding in the sum can push the mean a hair outside [min, max] for
        // near-constant series.
        avg: avg.clamp(min, max),
        p90: nearest_rank(&sorted, 90),
        p99: nearest_rank(&sorted, 99),
        max,
    })
}

/// Mean absolute difference of consecutive latencies, in reception order.
pub fn jitter(series: &LatencySeries) -> Result<f64, MetricsError> {
    let values = series.values();
    if values.len() < 2 {
        return Err(MetricsError::InsufficientSamples(values.len()));
    }
    let total: f64 = values.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(total / (values.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThroughputInput {
    pub received: u64,
    pub payload_size: usize,
    pub first_send_ns: u64,
    pub last_recv_ns: u64,
}

/// Megabytes (10^6 bytes) delivered per second between the first send and
/// the last receive.
pub fn throughput(input: &ThroughputInput) -> Result<f64, MetricsError> {
    if input.received == 0 {
        return Err(MetricsError::NoMessages);
    }
    if input.last_recv_ns <= input.first_send_ns {
        return Err(MetricsError::ZeroSpan {
            first_send_ns: input.first_send_ns,
            last_recv_ns: input.last_recv_ns,
        });
    }
    let bytes = input.received as f64 * input.payload_size as f64;
    let span_s = (input.last_recv_ns - input.first_send_ns) as f64 / 1e9;
    Ok(bytes / span_s / 1e6)
}

/// Metrics for one subscriber of one run, or an average of several.
///
/// `received` and `sent` are counts for a single subscriber and become means
/// once averaged. Optional fields are absent when they could not be computed
/// (jitter with fewer than two messages, CPU/memory without samples).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub latency: LatencyStats,
    pub throughput_mbps: f64,
    pub jitter_us: Option<f64>,
    pub received: f64,
    pub sent: f64,
    pub cpu_median: Option<f64>,
    pub mem_median: Option<f64>,
}

impl RunMetrics {
    pub fn loss(&self) -> f64 {
        (self.sent - self.received).max(0.0)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    mean(values.flatten())
}

/// Field-wise arithmetic mean. Optional fields average over the entries
/// where they are present.
pub fn mean_metrics(entries: &[RunMetrics]) -> Result<RunMetrics, MetricsError> {
    if entries.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let field = |f: fn(&RunMetrics) -> f64| mean(entries.iter().map(f)).expect("non-empty");
    Ok(RunMetrics {
        latency: LatencyStats {
            min: field(|m| m.latency.min),
            avg: field(|m| m.latency.avg),
            p90: field(|m| m.latency.p90),
            p99: field(|m| m.latency.p99),
            max: field(|m| m.latency.max),
        },
        throughput_mbps: field(|m| m.throughput_mbps),
        jitter_us: mean_present(entries.iter().map(|m| m.jitter_us)),
        received: field(|m| m.received),
        sent: field(|m| m.sent),
        cpu_median: mean_present(entries.iter().map(|m| m.cpu_median)),
        mem_median: mean_present(entries.iter().map(|m| m.mem_median)),
    })
}

/// Collapse the subscribers of one run into the result of that run.
pub fn average_subscribers(per_subscriber: &[RunMetrics]) -> Result<RunMetrics, MetricsError> {
    mean_metrics(per_subscriber)
}

/// Collapse the per-run results of one configuration.
pub fn average_runs(per_run: &[RunMetrics]) -> Result<RunMetrics, MetricsError> {
    mean_metrics(per_run)
}
