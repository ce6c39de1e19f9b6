//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 are machine-independent property and oracle checks.
//! Criteria 6-9 and 11 run real experiments and take a few minutes on a
//! desktop. Criterion 10 depends on the host, so it only reports unless
//! `BROKERBENCH_STRICT_ENV=1` is set.
//!
//! Run with `cargo test -p brokerbench-cli --test acceptance`. Set
//! `BROKERBENCH_ACCEPTANCE=1-5` (or a list such as `3,6,11`) to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use brokerbench::backend::{Backend, BackendRegistry, Endpoint, Reception, SubscriberHandle, Transport, Tuning};
use brokerbench::codec::{self, MIN_PAYLOAD_SIZE};
use brokerbench::metrics::{self, LatencySeries, RunMetrics, ThroughputInput};
use brokerbench::refbus::Refbus;
use brokerbench::runner::{ExperimentConfig, ExperimentOutcome, Profile, Runner, RunnerOptions};
use brokerbench::sampler::{self, ResourceSample, ResourceTimeline};
use brokerbench::stub::StubBackend;
use brokerbench::sweep::{self, Direction, Metric, RowStatus, SweepMeta, SweepResult, SweepRow, SweepSpec};
use brokerbench::units::ByteSize;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

const RELATIVE_TOLERANCE: f64 = 1e-9;
const ORACLE_CASES: usize = 1000;
const CODEC_CASES: usize = 10_000;
const SWEEP_SPECS: usize = 100;
const BURSTS: usize = 100;
const REPETITIONS: u32 = 10;
const ORDERING_QUORUM: usize = 8;
const KB: usize = 1024;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = Result<Verdict, String>;

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= RELATIVE_TOLERANCE * a.abs().max(b.abs())
}

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

// ---------------------------------------------------------------------------
// 1. metric oracles

/// Percentile by definition: the smallest sample value `x` such that at
/// least `percent`% of the samples are `<= x`.
fn oracle_percentile(values: &[f64], percent: usize) -> f64 {
    let n = values.len();
    let mut candidates: Vec<f64> = values.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    for x in candidates {
        let at_most = values.iter().filter(|v| **v <= x).count();
        if at_most * 100 >= percent * n {
            return x;
        }
    }
    unreachable!("the maximum always qualifies")
}

fn oracle_median(mut values: Vec<f64>) -> f64 {
    // selection by repeated removal of extremes
    while values.len() > 2 {
        let (lo, _) = values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        values.swap_remove(lo);
        let (hi, _) = values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        values.swap_remove(hi);
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn random_series(rng: &mut StdRng) -> Vec<f64> {
    let n = rng.gen_range(1..=60);
    let coarse = rng.gen_bool(0.3);
    (0..n)
        .map(|_| {
            if coarse {
                // many repeated values exercise percentile ranks on ties
                rng.gen_range(0..5) as f64 * 10.0
            } else {
                rng.gen_range(0.0..5000.0)
            }
        })
        .collect()
}

fn criterion_metric_oracles() -> Check {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    for case in 0..ORACLE_CASES {
        let values = random_series(&mut rng);
        let series = LatencySeries::new(values.clone()).map_err(|e| e.to_string())?;
        let stats = metrics::latency_stats(&series).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        for v in values.iter().rev() {
            total += v;
        }
        let expect = [
            ("min", values.iter().cloned().fold(f64::INFINITY, f64::min), stats.min),
            ("avg", total / values.len() as f64, stats.avg),
            ("p90", oracle_percentile(&values, 90), stats.p90),
            ("p99", oracle_percentile(&values, 99), stats.p99),
            ("max", values.iter().cloned().fold(f64::NEG_INFINITY, f64::max), stats.max),
        ];
        for (name, want, got) in expect {
            ensure(close(want, got), || format!("case {case}: {name} {got} != {want}"))?;
        }

        if values.len() >= 2 {
            let mut diffs = 0.0;
            for i in 1..values.len() {
                let d = values[i] - values[i - 1];
                diffs += if d < 0.0 { -d } else { d };
            }
            let want = diffs / (values.len() - 1) as f64;
            let got = metrics::jitter(&series).map_err(|e| e.to_string())?;
            ensure(close(want, got), || format!("case {case}: jitter {got} != {want}"))?;
        }

        let input = ThroughputInput {
            received: rng.gen_range(1..=10_000),
            payload_size: rng.gen_range(MIN_PAYLOAD_SIZE..=512 * KB),
            first_send_ns: rng.gen_range(0..1_000_000_000),
            last_recv_ns: 0,
        };
        let input = ThroughputInput {
            last_recv_ns: input.first_send_ns + rng.gen_range(1..10_000_000_000),
            ..input
        };
        // bytes per nanosecond is GB/s; times 1000 gives MB/s
        let want = (input.received * input.payload_size as u64) as f64
            / (input.last_recv_ns - input.first_send_ns) as f64
            * 1000.0;
        let got = metrics::throughput(&input).map_err(|e| e.to_string())?;
        ensure(close(want, got), || format!("case {case}: throughput {got} != {want}"))?;

        let pids: Vec<u32> = (0..rng.gen_range(1..=4)).map(|p| 100 + p).collect();
        let mut timeline = ResourceTimeline::new(100, &pids);
        let mut sums_cpu = Vec::new();
        let mut sums_mem = Vec::new();
        for tick in 0..rng.gen_range(1..=30u64) {
            let mut row = BTreeMap::new();
            let (mut cpu, mut mem, mut present) = (0.0, 0.0, false);
            for &pid in &pids {
                let sample = rng.gen_bool(0.8).then(|| ResourceSample {
                    cpu_percent: rng.gen_range(0.0..100.0),
                    uss_bytes: rng.gen_range(0..1 << 30),
                    uss_percent: rng.gen_range(0.0..10.0),
                });
                if let Some(s) = sample {
                    cpu += s.cpu_percent;
                    mem += s.uss_percent;
                    present = true;
                }
                row.insert(pid, sample);
            }
            timeline.push_row(tick * 100_000_000, &row);
            if present {
                sums_cpu.push(cpu);
                sums_mem.push(mem);
            }
        }
        match sampler::aggregate(&timeline) {
            Ok(summary) => {
                ensure(!sums_cpu.is_empty(), || format!("case {case}: summary from an empty timeline"))?;
                let (want_cpu, want_mem) = (oracle_median(sums_cpu), oracle_median(sums_mem));
                ensure(close(want_cpu, summary.cpu_median), || {
                    format!("case {case}: cpu median {} != {want_cpu}", summary.cpu_median)
                })?;
                ensure(close(want_mem, summary.mem_median), || {
                    format!("case {case}: memory median {} != {want_mem}", summary.mem_median)
                })?;
            }
            Err(_) => ensure(sums_cpu.is_empty(), || format!("case {case}: aggregate rejected a valid timeline"))?,
        }
    }
    let elapsed = started.elapsed();
    Ok(Verdict::new(
        elapsed < Duration::from_secs(10),
        format!("{ORACLE_CASES} cases x 4 functions agree within {RELATIVE_TOLERANCE:e} in {elapsed:.2?} (limit 10 s)"),
    ))
}

// ---------------------------------------------------------------------------
// 2. codec

/// Corruptions of a valid payload of `size` bytes. Each must be rejected.
fn mutations(valid: &[u8], rng: &mut StdRng) -> Vec<(&'static str, Vec<u8>)> {
    let sep = valid.iter().position(|b| *b == codec::SEPARATOR).unwrap();
    let mut out = Vec::new();

    let mut v = valid.to_vec();
    v.truncate(rng.gen_range(0..valid.len()));
    out.push(("truncated", v));

    let mut v = valid.to_vec();
    v.push(codec::FILL);
    out.push(("extended", v));

    let mut v = valid.to_vec();
    v[sep] = codec::FILL;
    out.push(("separator removed", v));

    let mut v = valid.to_vec();
    v[rng.gen_range(0..sep)] = *[b'x', b' ', b'-', b'+', b'|' ^ 1].choose(rng).unwrap();
    out.push(("non-digit in header", v));

    if sep + 1 < valid.len() {
        let mut v = valid.to_vec();
        v[rng.gen_range(sep + 1..valid.len())] = *[b'B', b'a', 0, b'|', b'0'].choose(rng).unwrap();
        out.push(("wrong padding byte", v));
    }

    let mut v = valid.to_vec();
    v.copy_within(sep.., 0);
    let len = v.len();
    v[len - sep..].fill(codec::FILL);
    out.push(("empty timestamp", v));

    out
}

fn criterion_codec() -> Check {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(2);
    let mut rejected = 0usize;
    for case in 0..CODEC_CASES {
        let ts: u64 = match case % 4 {
            0 => rng.gen(),
            1 => rng.gen_range(0..1000),
            2 => u64::MAX - rng.gen_range(0..1000),
            _ => 1_700_000_000_000_000_000 + rng.gen_range(0..1u64 << 40),
        };
        let size = if rng.gen_bool(0.5) {
            rng.gen_range(MIN_PAYLOAD_SIZE..=64)
        } else {
            rng.gen_range(MIN_PAYLOAD_SIZE..=64 * KB)
        };
        let payload = codec::encode(ts, size).map_err(|e| e.to_string())?;
        ensure(payload.len() == size, || format!("case {case}: encoded {} bytes, wanted {size}", payload.len()))?;
        let back = codec::decode(payload.as_bytes(), size).map_err(|e| format!("case {case}: {e}"))?;
        ensure(back == ts, || format!("case {case}: decoded {back}, encoded {ts}"))?;
        for (what, bad) in mutations(payload.as_bytes(), &mut rng) {
            ensure(codec::decode(&bad, size).is_err(), || {
                format!("case {case}: {what} payload was accepted ({:?})", String::from_utf8_lossy(&bad[..bad.len().min(30)]))
            })?;
            rejected += 1;
        }
    }
    ensure(codec::encode(0, MIN_PAYLOAD_SIZE - 1).is_err(), || "20-byte payload accepted".into())?;
    let elapsed = started.elapsed();
    Ok(Verdict::new(
        elapsed < Duration::from_secs(5),
        format!("{CODEC_CASES} roundtrips, {rejected} malformed payloads rejected, in {elapsed:.2?} (limit 5 s)"),
    ))
}

// ---------------------------------------------------------------------------
// 3. averaging hierarchy

/// Latency of run `r`, subscriber `s`, in nanoseconds.
const STUB_LATENCIES: [[u64; 2]; 2] = [[10_000, 30_000], [20_000, 50_000]];
/// Added to message `i` of every subscriber: alternating 0 and 2 µs.
const STUB_PATTERN: [u64; 2] = [0, 2_000];

fn criterion_averaging() -> Check {
    let config = ExperimentConfig {
        subscribers: 2,
        count: 100,
        interval_us: 1000,
        payload_size: 4096,
        delay_ms: 0,
        repetitions: 2,
        ..ExperimentConfig::baseline("stub", Transport::InProcess, Profile::Latency)
    };
    let execute = || -> Result<ExperimentOutcome, String> {
        let stub = StubBackend::with_latencies("stub", STUB_LATENCIES.iter().map(|r| r.to_vec()).collect())
            .with_pattern(STUB_PATTERN.to_vec());
        let mut registry = BackendRegistry::empty();
        registry.register(std::sync::Arc::new(stub));
        let runner = Runner::new(
            registry,
            RunnerOptions {
                sample_interval: None,
                silence_timeout: Duration::from_millis(500),
                retry_failed: false,
                ..RunnerOptions::default()
            },
        );
        runner.execute(&config).map_err(|e| e.to_string())
    };
    let first = execute()?;
    let second = execute()?;

    // Per subscriber: 100 latencies alternating base and base + 2 µs, the
    // last one sent 99 ms after the first.
    let per_sub = |base: u64| -> [f64; 4] {
        let b = base as f64 / 1000.0;
        let span_ns = 99_000_000 + base + 2_000;
        [b, b + 1.0, b + 2.0, 100.0 * 4096.0 / (span_ns as f64 / 1e9) / 1e6]
    };
    let mut expected = [0.0; 4];
    for run in STUB_LATENCIES {
        let (a, b) = (per_sub(run[0]), per_sub(run[1]));
        for k in 0..4 {
            expected[k] += (a[k] + b[k]) / 2.0 / STUB_LATENCIES.len() as f64;
        }
    }
    let m = &first.metrics;
    let got = [m.latency.min, m.latency.avg, m.latency.max, m.throughput_mbps];
    let exact = got == expected && m.jitter_us == Some(2.0) && m.received == 100.0;
    let bits = |m: &RunMetrics| serde_json::to_string(m).expect("metrics serialize");
    let reproducible = bits(&first.metrics) == bits(&second.metrics);
    Ok(Verdict::new(
        exact && reproducible,
        format!(
            "min/avg/max/throughput {got:?} vs hand-computed {expected:?}; jitter {:?}; identical on rerun: {reproducible}",
            m.jitter_us
        ),
    ))
}

// ---------------------------------------------------------------------------
// 4. sweep algebra

fn random_subset<T: Clone>(rng: &mut StdRng, pool: &[T], max: usize) -> Vec<T> {
    let k = rng.gen_range(1..=max.min(pool.len()));
    let mut picked: Vec<T> = pool.choose_multiple(rng, k).cloned().collect();
    picked.shuffle(rng);
    picked
}

fn random_spec(rng: &mut StdRng) -> SweepSpec {
    let names: Vec<String> = ["alpha", "beta", "gamma", "delta"].map(String::from).to_vec();
    SweepSpec {
        backends: random_subset(rng, &names, 4),
        transports: random_subset(rng, &Transport::ALL, 3),
        intervals_us: random_subset(rng, &[0, 100, 1000], 3),
        payload_sizes: random_subset(rng, &(0..10).map(|k| ByteSize(KB << k)).collect::<Vec<_>>(), 4),
        subscribers: random_subset(rng, &[1, 2, 4, 8], 4),
        count: 10,
        delay_ms: 0,
        repetitions: 1,
        pinning: Vec::new(),
        tuning: Tuning::default(),
        adapters: BTreeMap::new(),
    }
}

fn metrics_with(value: f64) -> RunMetrics {
    RunMetrics {
        latency: metrics::LatencyStats {
            min: value,
            avg: value,
            p90: value,
            p99: value,
            max: value,
        },
        throughput_mbps: value,
        jitter_us: Some(value),
        received: 1.0,
        sent: 1.0,
        cpu_median: Some(value),
        mem_median: Some(value),
    }
}

fn synthetic_result(spec: &SweepSpec, values: &[f64]) -> SweepResult {
    let rows = spec
        .enumerate()
        .into_iter()
        .zip(values)
        .map(|(config, &v)| SweepRow {
            schema: sweep::ROW_SCHEMA,
            key: sweep::row_key(&config),
            metrics: Some(metrics_with(v)),
            status: RowStatus::Ok,
            runs_ok: 1,
            error: None,
            archive: None,
            config,
        })
        .collect();
    SweepResult {
        meta: SweepMeta::new(spec, None),
        rows,
    }
}

/// (transport, interval, payload size, subscribers)
type CellKey = (String, u64, usize, usize);
/// Cell -> (winner, tie).
type Winners = BTreeMap<CellKey, (String, bool)>;

/// Winners by scanning every row.
fn brute_force_winners(
    result: &SweepResult,
    spec: &SweepSpec,
    metric: Metric,
) -> Winners {
    let mut best: BTreeMap<CellKey, (String, f64, bool)> = BTreeMap::new();
    // visiting backends in declared order makes the first one win ties
    for backend in &spec.backends {
        for row in result.rows.iter().filter(|r| &r.config.backend == backend) {
            let c = &row.config;
            let v = metric.value(row.metrics.as_ref().unwrap()).unwrap();
            let key = (c.transport.to_string(), c.interval_us, c.payload_size, c.subscribers);
            match best.get_mut(&key) {
                None => {
                    best.insert(key, (backend.clone(), v, false));
                }
                Some(entry) => {
                    let better = match metric.direction() {
                        Direction::Minimize => v < entry.1,
                        Direction::Maximize => v > entry.1,
                    };
                    if better {
                        *entry = (backend.clone(), v, false);
                    } else if v == entry.1 {
                        entry.2 = true;
                    }
                }
            }
        }
    }
    best.into_iter().map(|(k, (w, _, tie))| (k, (w, tie))).collect()
}

fn winners_of(result: &SweepResult, metric: Metric) -> Result<Winners, String> {
    let maps = sweep::optimality(result, metric, None).map_err(|e| e.to_string())?;
    let mut out = BTreeMap::new();
    for map in maps {
        for cell in map.cells {
            out.insert(
                (map.transport.to_string(), map.interval_us, cell.payload_size, cell.subscribers),
                (cell.winner, cell.tie),
            );
        }
    }
    Ok(out)
}

fn criterion_sweep_algebra() -> Check {
    let mut rng = StdRng::seed_from_u64(4);
    type Transform = (&'static str, fn(f64) -> f64);
    let transforms: [Transform; 3] = [
        ("2v+1", |v| 2.0 * v + 1.0),
        ("v^3", |v| v * v * v),
        ("ln(1+v)", |v| v.ln_1p()),
    ];
    let mut cells = 0usize;
    for case in 0..SWEEP_SPECS {
        let spec = random_spec(&mut rng);
        spec.validate().map_err(|e| e.to_string())?;
        let product = spec.backends.len()
            * spec.transports.len()
            * spec.intervals_us.len()
            * spec.payload_sizes.len()
            * spec.subscribers.len();
        let configs = spec.enumerate();
        ensure(configs.len() == product && spec.len() == product, || {
            format!("case {case}: enumerated {} configurations, expected {product}", configs.len())
        })?;
        let distinct: BTreeSet<String> = configs.iter().map(sweep::row_key).collect();
        ensure(distinct.len() == product, || format!("case {case}: duplicate configurations"))?;

        // small value range so ties occur
        let values: Vec<f64> = (0..product).map(|_| rng.gen_range(1..8) as f64).collect();
        let result = synthetic_result(&spec, &values);
        for metric in [Metric::LatencyAvg, Metric::Throughput] {
            let got = winners_of(&result, metric)?;
            let want = brute_force_winners(&result, &spec, metric);
            ensure(got == want, || format!("case {case}: {} map differs from brute force", metric.name()))?;
            cells += got.len();
            for (name, f) in transforms {
                let transformed: Vec<f64> = values.iter().map(|v| f(*v)).collect();
                let again = winners_of(&synthetic_result(&spec, &transformed), metric)?;
                ensure(again == got, || format!("case {case}: {} map changed under {name}", metric.name()))?;
            }
        }
    }
    Ok(Verdict::new(
        true,
        format!("{SWEEP_SPECS} specs: counts equal the set-size product; {cells} cells match brute force and survive 2v+1, v^3, ln(1+v)"),
    ))
}

// ---------------------------------------------------------------------------
// 5. conservation

fn drain(sub: &mut dyn SubscriberHandle, limit: Option<u64>, patience: Duration) -> Result<u64, String> {
    let mut n = 0;
    while limit.is_none_or(|l| n < l) {
        match sub.receive(patience).map_err(|e| e.to_string())? {
            Reception::Message(_) => n += 1,
            Reception::TimedOut | Reception::Closed => break,
        }
    }
    Ok(n)
}

fn burst(rng: &mut StdRng, trial: usize, dir: &Path) -> Result<(), String> {
    let transport = Transport::ALL[trial % 3];
    let subscribers = rng.gen_range(1..=3);
    let messages: u64 = rng.gen_range(1..=400);
    let capacity = rng.gen_range(1..=64);
    let size = rng.gen_range(MIN_PAYLOAD_SIZE..=2048);
    let early: Vec<u64> = (0..subscribers).map(|_| rng.gen_range(0..=messages / 2)).collect();
    let label = format!("trial {trial} ({transport}, S={subscribers}, M={messages}, capacity {capacity})");

    let endpoint = match transport {
        Transport::InProcess => Endpoint::inproc(format!("acceptance-{trial}")),
        Transport::InterProcess => Endpoint::ipc(dir.join(format!("b{trial}.sock")).to_string_lossy()),
        Transport::Tcp => Endpoint::tcp("127.0.0.1:0"),
    }
    .map_err(|e| e.to_string())?;
    let tuning = Tuning {
        queue_capacity: capacity,
        ..Tuning::default()
    };
    let refbus = Refbus::new();
    let mut publisher = refbus.bind(&endpoint, &tuning).map_err(|e| e.to_string())?;
    let bound = publisher.endpoint().clone();
    let mut subs = Vec::new();
    for i in 0..subscribers {
        subs.push(refbus.connect(&bound, &tuning).map_err(|e| e.to_string())?);
        let deadline = Instant::now() + Duration::from_secs(5);
        while publisher.subscriber_count() <= i && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(1));
        }
    }
    ensure(publisher.subscriber_count() == subscribers, || format!("{label}: subscribers did not attach"))?;

    let payload = codec::encode(1, size).map_err(|e| e.to_string())?;
    for _ in 0..messages {
        publisher.send(payload.as_bytes()).map_err(|e| e.to_string())?;
    }
    let mut before = Vec::new();
    for (s, &k) in subs.iter_mut().zip(&early) {
        before.push(drain(s.as_mut(), Some(k), Duration::from_millis(200))?);
    }
    let (stats, after) = std::thread::scope(|scope| {
        let closer = scope.spawn(|| publisher.close());
        let after: Result<Vec<u64>, String> =
            subs.iter_mut().map(|s| drain(s.as_mut(), None, Duration::from_secs(5))).collect();
        (closer.join().expect("close panicked"), after)
    });
    let stats = stats.map_err(|e| e.to_string())?;
    let after = after?;
    ensure(stats.len() == subscribers, || format!("{label}: {} queue reports", stats.len()))?;
    for i in 0..subscribers {
        let s = &stats[i];
        let in_flight = s.offered.saturating_sub(s.dropped + before[i]);
        let received = before[i] + after[i];
        ensure(s.offered == messages, || format!("{label}: subscriber {i} offered {}", s.offered))?;
        ensure(after[i] == in_flight && messages == received + s.dropped, || {
            format!(
                "{label}: subscriber {i}: sent {messages}, received {received}, dropped {}, in flight at close {in_flight}, delivered after close {}",
                s.dropped, after[i]
            )
        })?;
    }
    Ok(())
}

fn criterion_conservation() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = StdRng::seed_from_u64(5);
    for trial in 0..BURSTS {
        burst(&mut rng, trial, dir.path())?;
    }
    Ok(Verdict::new(
        true,
        format!("{BURSTS} bursts over inproc/ipc/tcp: sent = received + dropped + in-flight for every subscriber"),
    ))
}

// ---------------------------------------------------------------------------
// 6-10. refbus experiments

fn brokerbench_exe() -> &'static str {
    env!("CARGO_BIN_EXE_brokerbench")
}

struct Bench {
    runner: Runner,
    _run_dir: tempfile::TempDir,
}

impl Bench {
    /// Runs the way the CLI does: threads for inproc, one process per role
    /// on ipc and tcp, no retries.
    fn new() -> Result<Self, String> {
        let run_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let runner = Runner::new(
            BackendRegistry::with_defaults(),
            RunnerOptions {
                retry_failed: false,
                run_dir: run_dir.path().to_path_buf(),
                role_command: Some(vec![brokerbench_exe().into(), "adapter".into()]),
                ..RunnerOptions::default()
            },
        );
        Ok(Self {
            runner,
            _run_dir: run_dir,
        })
    }

    fn run(&self, config: &ExperimentConfig) -> Result<ExperimentOutcome, String> {
        self.runner
            .execute(config)
            .map_err(|e| format!("{} {}: {e}", config.backend, config.transport))
    }
}

fn refbus_config(transport: Transport, profile: Profile) -> ExperimentConfig {
    ExperimentConfig::baseline("refbus", transport, profile)
}

/// Repetitions where every subscriber got every message.
fn loss_free_runs(outcome: &ExperimentOutcome) -> usize {
    let count = outcome.config.count as f64;
    outcome
        .runs
        .iter()
        .filter(|r| r.per_subscriber.iter().all(|s| s.received == count && s.sent == count))
        .count()
}

fn criterion_loss_free(bench: &Bench) -> Check {
    let mut pass = true;
    let mut notes = Vec::new();
    for transport in [Transport::InProcess, Transport::InterProcess] {
        let config = ExperimentConfig {
            repetitions: REPETITIONS,
            ..refbus_config(transport, Profile::Latency)
        };
        let (clean, failed) = match bench.run(&config) {
            Ok(outcome) => (loss_free_runs(&outcome), outcome.failures.len()),
            Err(e) => {
                notes.push(e);
                (0, REPETITIONS as usize)
            }
        };
        pass &= clean == REPETITIONS as usize;
        notes.push(format!("{transport}: {clean}/{REPETITIONS} loss-free ({failed} failed runs)"));
    }
    Ok(Verdict::new(pass, format!("T=1000 µs, C=5000, P=32 KB, S=1; {}", notes.join("; "))))
}

fn criterion_transport_ordering(bench: &Bench) -> Check {
    // C and D are reduced from the preset; ordering is a property of the
    // steady state, which 2000 paced messages sample well.
    let mut per_transport: BTreeMap<Transport, Vec<f64>> = BTreeMap::new();
    for rep in 0..REPETITIONS {
        for transport in Transport::ALL {
            let config = ExperimentConfig {
                count: 2000,
                delay_ms: 200,
                repetitions: 1,
                ..refbus_config(transport, Profile::Latency)
            };
            let avg = bench.run(&config).map(|o| o.metrics.latency.avg).map_err(|e| format!("repetition {rep}: {e}"))?;
            per_transport.entry(transport).or_default().push(avg);
        }
    }
    let inproc = &per_transport[&Transport::InProcess];
    let ipc = &per_transport[&Transport::InterProcess];
    let tcp = &per_transport[&Transport::Tcp];
    let held = (0..REPETITIONS as usize).filter(|&i| inproc[i] < ipc[i] && inproc[i] < tcp[i]).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Verdict::new(
        held >= ORDERING_QUORUM,
        format!(
            "inproc < ipc and inproc < tcp in {held}/{REPETITIONS} (need {ORDERING_QUORUM}); mean avg latency µs: inproc {:.1}, ipc {:.1}, tcp {:.1}",
            mean(inproc),
            mean(ipc),
            mean(tcp)
        ),
    ))
}

/// Averages at 1 KB and 512 KB for one transport and profile.
fn small_and_large(bench: &Bench, transport: Transport, profile: Profile) -> Result<(RunMetrics, RunMetrics), String> {
    let run = |size: usize| {
        let config = ExperimentConfig {
            payload_size: size,
            count: 1000,
            delay_ms: 200,
            repetitions: 3,
            ..refbus_config(transport, profile)
        };
        bench.run(&config).map(|o| o.metrics)
    };
    Ok((run(KB)?, run(512 * KB)?))
}

struct PayloadSweep {
    throughput: BTreeMap<Transport, (RunMetrics, RunMetrics)>,
    latency: BTreeMap<Transport, (RunMetrics, RunMetrics)>,
}

fn payload_sweep(bench: &Bench) -> Result<PayloadSweep, String> {
    let mut throughput = BTreeMap::new();
    let mut latency = BTreeMap::new();
    for transport in Transport::ALL {
        throughput.insert(transport, small_and_large(bench, transport, Profile::Throughput)?);
        latency.insert(transport, small_and_large(bench, transport, Profile::Latency)?);
    }
    Ok(PayloadSweep { throughput, latency })
}

fn criterion_payload_throughput(sweep: &Result<PayloadSweep, String>) -> Check {
    let sweep = sweep.as_ref().map_err(Clone::clone)?;
    let mut pass = true;
    let mut notes = Vec::new();
    for (transport, (small, large)) in &sweep.throughput {
        pass &= large.throughput_mbps > small.throughput_mbps;
        notes.push(format!(
            "{transport} {:.1} -> {:.1} MB/s",
            small.throughput_mbps, large.throughput_mbps
        ));
    }
    Ok(Verdict::new(pass, format!("T=0, 1 KB -> 512 KB: {}", notes.join(", "))))
}

fn criterion_payload_latency(sweep: &Result<PayloadSweep, String>) -> Check {
    let sweep = sweep.as_ref().map_err(Clone::clone)?;
    let mut pass = true;
    let mut notes = Vec::new();
    for (transport, (small, large)) in &sweep.latency {
        pass &= large.latency.avg > small.latency.avg;
        notes.push(format!("{transport} {:.1} -> {:.1} µs", small.latency.avg, large.latency.avg));
    }
    Ok(Verdict::new(pass, format!("T=1000 µs, 1 KB -> 512 KB: {}", notes.join(", "))))
}

fn cpu_mhz() -> Option<f64> {
    let info = std::fs::read_to_string("/proc/cpuinfo").ok()?;
    info.lines()
        .filter(|l| l.starts_with("cpu MHz"))
        .filter_map(|l| l.split(':').nth(1)?.trim().parse::<f64>().ok())
        .reduce(f64::max)
}

fn criterion_magnitude(sweep: &Result<PayloadSweep, String>) -> Check {
    let sweep = sweep.as_ref().map_err(Clone::clone)?;
    let latency = sweep.latency[&Transport::InProcess].0.latency.avg;
    let (small, large) = &sweep.throughput[&Transport::InProcess];
    let peak = small.throughput_mbps.max(large.throughput_mbps);
    let clock = cpu_mhz().map_or("unknown clock".to_string(), |mhz| format!("{:.2} GHz", mhz / 1000.0));
    Ok(Verdict::new(
        latency < 100.0 && peak > 100.0,
        format!(
            "inproc avg latency at 1 KB {latency:.1} µs (< 100), peak throughput {peak:.1} MB/s (> 100); host {clock}, {} cores",
            std::thread::available_parallelism().map_or(0, |n| n.get())
        ),
    ))
}

// ---------------------------------------------------------------------------
// 11. adapter protocol

fn shim_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/echo_shim.py")
}

fn criterion_adapter_conformance() -> Check {
    let run_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let output = Command::new(brokerbench_exe())
        .args(["--json", "run", "--backend", "echo", "--transport", "tcp"])
        .args(["--interval-us", "1000", "--count", "5000", "--size", "32KB", "--subscribers", "1"])
        .args(["--repetitions", &REPETITIONS.to_string(), "--no-retry"])
        .arg("--run-dir")
        .arg(run_dir.path())
        .arg("--adapter")
        .arg(format!("echo=python3 {}", shim_path().display()))
        .output()
        .map_err(|e| format!("could not start brokerbench: {e}"))?;
    let stdout = String::from_utf8_lossy(&output.stdout);
    if !output.status.success() {
        return Ok(Verdict::new(
            false,
            format!(
                "exit {:?}: {}{}",
                output.status.code(),
                stdout.trim(),
                String::from_utf8_lossy(&output.stderr).trim()
            ),
        ));
    }
    let outcome: ExperimentOutcome =
        serde_json::from_str(&stdout).map_err(|e| format!("unreadable run report: {e}"))?;
    let clean = loss_free_runs(&outcome);
    Ok(Verdict::new(
        clean == REPETITIONS as usize && outcome.config.count == 5000,
        format!(
            "python shim over tcp, T=1000 µs, C=5000: {clean}/{REPETITIONS} loss-free, avg latency {:.1} µs",
            outcome.metrics.latency.avg
        ),
    ))
}

// ---------------------------------------------------------------------------

fn selected() -> BTreeSet<u32> {
    let Ok(spec) = std::env::var("BROKERBENCH_ACCEPTANCE") else {
        return (1..=11).collect();
    };
    let mut out = BTreeSet::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u32, u32) = (a.parse().expect("criterion number"), b.parse().expect("criterion number"));
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse().expect("criterion number"));
            }
        }
    }
    out
}

fn main() {
    // `cargo test -- <filter>` passes arguments meant for the default
    // harness; a listing request must not run the suite.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let strict_env = std::env::var("BROKERBENCH_STRICT_ENV").is_ok_and(|v| v == "1");
    let wanted = selected();
    let needs_bench = wanted.iter().any(|c| (6..=10).contains(c));
    let bench = if needs_bench { Some(Bench::new()) } else { None };
    let bench_ref = || bench.as_ref().expect("bench").as_ref().map_err(Clone::clone);
    // shared by criteria 8-10; run on first use so its time is reported there
    let sweep = std::cell::OnceCell::new();
    let sweep_ref = || sweep.get_or_init(|| bench_ref().and_then(payload_sweep));

    // (number, name, gating, check)
    type Criterion<'a> = (u32, &'static str, bool, Box<dyn Fn() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "metric oracles", true, Box::new(criterion_metric_oracles)),
        (2, "codec roundtrip", true, Box::new(criterion_codec)),
        (3, "averaging hierarchy", true, Box::new(criterion_averaging)),
        (4, "sweep algebra", true, Box::new(criterion_sweep_algebra)),
        (5, "conservation", true, Box::new(criterion_conservation)),
        (6, "loss-free baseline", true, Box::new(|| bench_ref().and_then(criterion_loss_free))),
        (7, "transport ordering", true, Box::new(|| bench_ref().and_then(criterion_transport_ordering))),
        (8, "payload monotonicity", true, Box::new(|| criterion_payload_throughput(sweep_ref()))),
        (9, "latency growth", true, Box::new(|| criterion_payload_latency(sweep_ref()))),
        (10, "magnitude sanity", strict_env, Box::new(|| criterion_magnitude(sweep_ref()))),
        (11, "adapter conformance", true, Box::new(criterion_adapter_conformance)),
    ];

    let mut gating_failures = 0;
    for (number, name, gating, check) in criteria {
        if !wanted.contains(&number) {
            continue;
        }
        let started = Instant::now();
        let verdict = check().unwrap_or_else(|e| Verdict::new(false, e));
        let status = match (verdict.pass, gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        if !verdict.pass && gating {
            gating_failures += 1;
        }
        let note = if gating { "" } else { " [report only]" };
        println!(
            "criterion {number:>2} {status} {name}{note}: {} ({:.1?})",
            verdict.detail,
            started.elapsed()
        );
    }
    if gating_failures > 0 {
        println!("{gating_failures} gating criteria failed");
        std::process::exit(1);
    }
}
