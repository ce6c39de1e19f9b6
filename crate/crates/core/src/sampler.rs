//! Periodic CPU and memory sampling of the processes taking part in a run.
//!
//! At every tick each process contributes its CPU usage (percent of one core,
//! so sums can exceed 100) and its Unique Set Size as a percentage of total
//! physical memory. [`aggregate`] sums over processes per tick and reports the
//! median over ticks.
//!
//! Linux only; data comes from procfs.

use std::collections::BTreeMap;
use std::fs;
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::mono_now_ns;

pub const DEFAULT_INTERVAL: Duration = Duration::from_millis(100);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplerError {
    #[error("process {0} does not exist")]
    NoSuchProcess(u32),
    #[error("process sampling is not supported here: {0}")]
    SamplingUnsupported(String),
    #[error("sampling interval must be positive")]
    ZeroInterval,
    #[error("timeline has no sample rows")]
    EmptyTimeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub cpu_percent: f64,
    pub uss_bytes: u64,
    pub uss_percent: f64,
}

/// Where memory figures came from. `Rss` means USS was unavailable and the
/// resident set was used instead; reports carry this flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemorySource {
    Uss,
    Rss,
}

/// Samples on a shared time grid. A process with no reading at some tick
/// (not started yet, or exited) has `None` there, never zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceTimeline {
    pub interval_ms: u64,
    pub memory_source: MemorySource,
    pub sample_times_ns: Vec<u64>,
    pub per_process: BTreeMap<u32, Vec<Option<ResourceSample>>>,
}

impl ResourceTimeline {
    pub fn new(interval_ms: u64, pids: &[u32]) -> Self {
        Self {
            interval_ms,
            memory_source: MemorySource::Uss,
            sample_times_ns: Vec::new(),
            per_process: pids.iter().map(|p| (*p, Vec::new())).collect(),
        }
    }

    /// Append one row; `row` must hold an entry per tracked process.
    pub fn push_row(&mut self, time_ns: u64, row: &BTreeMap<u32, Option<ResourceSample>>) {
        self.sample_times_ns.push(time_ns);
        for (pid, series) in &mut self.per_process {
            series.push(row.get(pid).copied().flatten());
        }
    }

    pub fn len(&self) -> usize {
        self.sample_times_ns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_times_ns.is_empty()
    }

    /// CSV with one line per tick and process: `time_ns,pid,cpu_percent,uss_bytes,uss_percent`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_ns,pid,cpu_percent,uss_bytes,uss_percent\n");
        for (i, t) in self.sample_times_ns.iter().enumerate() {
            for (pid, series) in &self.per_process {
                match series[i] {
                    Some(s) => out.push_str(&format!(
                        "{t},{pid},{:.4},{},{:.6}\n",
                        s.cpu_percent, s.uss_bytes, s.uss_percent
                    )),
                    None => out.push_str(&format!("{t},{pid},,,\n")),
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSummary {
    pub cpu_median: f64,
    pub mem_median: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-tick sums over the processes present at that tick, then the median of
/// those sums. Ticks where no process is present are skipped.
pub fn aggregate(timeline: &ResourceTimeline) -> Result<ResourceSummary, SamplerError> {
    let mut cpu = Vec::with_capacity(timeline.len());
    let mut mem = Vec::with_capacity(timeline.len());
    for i in 0..timeline.len() {
        let present: Vec<&ResourceSample> = timeline
            .per_process
            .values()
            .filter_map(|series| series.get(i).and_then(Option::as_ref))
            .collect();
        if present.is_empty() {
            continue;
        }
        cpu.push(present.iter().map(|s| s.cpu_percent).sum());
        mem.push(present.iter().map(|s| s.uss_percent).sum());
    }
    if cpu.is_empty() {
        return Err(SamplerError::EmptyTimeline);
    }
    Ok(ResourceSummary {
        cpu_median: median(&mut cpu),
        mem_median: median(&mut mem),
    })
}

#[cfg(target_os = "linux")]
mod procfs {
    use super::*;

    pub fn clock_ticks_per_second() -> f64 {
        // SAFETY: sysconf has no memory-safety preconditions.
        let ticks = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
        if ticks > 0 {
            ticks as f64
        } else {
            100.0
        }
    }

    pub fn current_tid() -> u32 {
        // SAFETY: gettid has no preconditions.
        unsafe { libc::gettid() as u32 }
    }

    /// utime + stime in clock ticks from a `stat` file; `None` if the task
    /// is gone or a zombie.
    pub fn cpu_ticks(path: &str) -> Option<u64> {
        let stat = fs::read_to_string(path).ok()?;
        // The command name may contain spaces; fields resume after the last ')'.
        let rest = &stat[stat.rfind(')')? + 2..];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.first() == Some(&"Z") || fields.first() == Some(&"X") {
            return None;
        }
        // utime and stime are fields 14 and 15 of the full line.
        let utime: u64 = fields.get(11)?.parse().ok()?;
        let stime: u64 = fields.get(12)?.parse().ok()?;
        Some(utime + stime)
    }

    pub fn uss_bytes(pid: u32) -> Option<u64> {
        let rollup = fs::read_to_string(format!("/proc/{pid}/smaps_rollup")).ok()?;
        let mut kb = 0;
        let mut seen = false;
        for line in rollup.lines() {
            if let Some(rest) = line
                .strip_prefix("Private_Clean:")
                .or_else(|| line.strip_prefix("Private_Dirty:"))
                .or_else(|| line.strip_prefix("Private_Hugetlb:"))
            {
                kb += rest.trim().trim_end_matches("kB").trim().parse::<u64>().ok()?;
                seen = true;
            }
        }
        seen.then_some(kb * 1024)
    }

    pub fn rss_bytes(pid: u32) -> Option<u64> {
        let statm = fs::read_to_string(format!("/proc/{pid}/statm")).ok()?;
        let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
        // SAFETY: sysconf has no memory-safety preconditions.
        let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) }.max(4096) as u64;
        Some(pages * page)
    }

    pub fn total_memory_bytes() -> Option<u64> {
        let info = fs::read_to_string("/proc/meminfo").ok()?;
        let line = info.lines().find(|l| l.starts_with("MemTotal:"))?;
        let kb: u64 = line["MemTotal:".len()..].trim().trim_end_matches("kB").trim().parse().ok()?;
        Some(kb * 1024)
    }
}

/// A running sampler; [`SamplerHandle::stop`] returns the timeline.
pub struct SamplerHandle {
    stop: Sender<()>,
    thread: JoinHandle<ResourceTimeline>,
}

impl SamplerHandle {
    pub fn stop(self) -> ResourceTimeline {
        let _ = self.stop.send(());
        self.thread.join().expect("sampler thread panicked")
    }
}

/// Start sampling `pids` every `interval`. When the current process is among
/// them, the sampler thread's own CPU time is excluded.
#[cfg(target_os = "linux")]
pub fn sample_loop(pids: &[u32], interval: Duration) -> Result<SamplerHandle, SamplerError> {
    use procfs::*;

    if interval.is_zero() {
        return Err(SamplerError::ZeroInterval);
    }
    for pid in pids {
        if fs::metadata(format!("/proc/{pid}")).is_err() {
            return Err(SamplerError::NoSuchProcess(*pid));
        }
    }
    let total_memory = total_memory_bytes()
        .ok_or_else(|| SamplerError::SamplingUnsupported("cannot read /proc/meminfo".into()))?
        as f64;
    let pids = pids.to_vec();
    let own_pid = std::process::id();
    let (stop_tx, stop_rx) = mpsc::channel();
    let (tid_tx, tid_rx) = mpsc::channel();

    let thread = std::thread::Builder::new()
        .name("resource-sampler".into())
        .spawn(move || {
            let tick_rate = clock_ticks_per_second();
            let own_tid = current_tid();
            let _ = tid_tx.send(own_tid);
            let mut timeline = ResourceTimeline::new(interval.as_millis() as u64, &pids);
            let use_rss = pids.iter().any(|p| uss_bytes(*p).is_none());
            if use_rss {
                log::warn!("USS is unavailable; memory figures fall back to resident set size");
                timeline.memory_source = MemorySource::Rss;
            }
            let ticks_of = |pid: u32| -> Option<u64> {
                let total = cpu_ticks(&format!("/proc/{pid}/stat"))?;
                if pid == own_pid {
                    let mine = cpu_ticks(&format!("/proc/{pid}/task/{own_tid}/stat")).unwrap_or(0);
                    Some(total.saturating_sub(mine))
                } else {
                    Some(total)
                }
            };
            let mut last_ticks: BTreeMap<u32, Option<u64>> = pids.iter().map(|p| (*p, ticks_of(*p))).collect();
            let mut last_time = mono_now_ns();
            let mut gone: Vec<u32> = Vec::new();
            loop {
                let stopped = !matches!(stop_rx.recv_timeout(interval), Err(RecvTimeoutError::Timeout));
                let now = mono_now_ns();
                let elapsed_s = (now - last_time) as f64 / 1e9;
                // A final partial tick only counts if it covers a useful span.
                if stopped && elapsed_s < interval.as_secs_f64() / 4.0 {
                    break;
                }
                let mut row = BTreeMap::new();
                for pid in &pids {
                    let reading = if gone.contains(pid) { None } else { ticks_of(*pid) };
                    let sample = match (reading, last_ticks.get(pid).copied().flatten()) {
                        (Some(ticks), Some(prev)) => {
                            let mem = if use_rss { rss_bytes(*pid) } else { uss_bytes(*pid) };
                            mem.map(|bytes| ResourceSample {
                                cpu_percent: ticks.saturating_sub(prev) as f64 / tick_rate / elapsed_s * 100.0,
                                uss_bytes: bytes,
                                uss_percent: bytes as f64 / total_memory * 100.0,
                            })
                        }
                        _ => None,
                    };
                    if reading.is_none() && last_ticks.get(pid).copied().flatten().is_some() {
                        gone.push(*pid);
                    }
                    last_ticks.insert(*pid, reading);
                    row.insert(*pid, sample);
                }
                timeline.push_row(now, &row);
                last_time = now;
                if stopped {
                    break;
                }
            }
            timeline
        })
        .map_err(|e| SamplerError::SamplingUnsupported(e.to_string()))?;
    let _ = tid_rx.recv();
    Ok(SamplerHandle { stop: stop_tx, thread })
}

#[cfg(not(target_os = "linux"))]
pub fn sample_loop(_pids: &[u32], _interval: Duration) -> Result<SamplerHandle, SamplerError> {
    Err(SamplerError::SamplingUnsupported("procfs is required".into()))
}
