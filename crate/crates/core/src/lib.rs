//! Benchmarking suite for brokerless publish/subscribe messaging.
//!
//! One publisher fans `C` fixed-size messages out to `S` subscribers over an
//! in-process, inter-process or TCP transport. Each message carries its send
//! timestamp, so subscribers record one-way latencies; from those the suite
//! derives latency percentiles, jitter and throughput, alongside the median
//! CPU and unique-memory usage of the participating processes. Experiments
//! repeat `R` times, sweep the Cartesian product of parameter sets, and end in
//! per-cell optimality maps across backends.
//!
//! Module map:
//!
//! - [`metrics`]: figures of merit and the subscriber-then-run averaging.
//! - [`codec`]: the timestamped payload wire format.
//! - [`backend`]: the messaging interface and backend registry.
//! - [`adapter`]: the command-line/JSON protocol for out-of-tree shims.
//! - [`refbus`]: the bundled reference backend.
//! - [`sampler`]: CPU and USS sampling of running processes.
//! - [`runner`]: one configuration, `R` repetitions.
//! - [`sweep`], [`report`]: parameter sweeps, optimality maps and reports.
//!
//! The guide in `book/` walks through each of these with runnable examples.

pub mod adapter;
pub mod affinity;
pub mod backend;
pub mod clock;
pub mod codec;
pub mod metrics;
pub mod refbus;
pub mod report;
pub mod runner;
pub mod sampler;
pub mod stub;
pub mod sweep;
pub mod units;

pub use backend::{Backend, BackendDescriptor, BackendKind, BackendRegistry, Endpoint, Transport, Tuning};
pub use metrics::{LatencySeries, LatencyStats, RunMetrics};
pub use runner::{ExperimentConfig, ExperimentOutcome, Runner, RunnerOptions};
pub use sweep::{SweepResult, SweepSpec};

// The guide's code blocks run as doctests of this crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/codec.md")]
    mod codec {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/resources.md")]
    mod resources {}
    #[doc = include_str!("../../../book/src/sweeps.md")]
    mod sweeps {}
}
