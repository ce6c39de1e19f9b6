//! Command-line front end: argument parsing, validation and dispatch.
//!
//! Exit status: 0 success, 1 usage error, 2 every run failed, 3 completed
//! with failed runs or rows.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use brokerbench::adapter::{Role, RoleArgs};
use brokerbench::affinity;
use brokerbench::backend::{BackendDescriptor, BackendKind, BackendRegistry, Transport, Tuning};
use brokerbench::refbus::Refbus;
use brokerbench::report;
use brokerbench::runner::{self, ExperimentConfig, Profile, Runner, RunnerError, RunnerOptions};
use brokerbench::sweep::{self, Direction, Metric, SweepError, SweepOptions, SweepResult, SweepSpec};
use brokerbench::units::ByteSize;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ALL_FAILED: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "brokerbench", version, about = "Benchmark brokerless publish/subscribe backends")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one configuration R times and print the averaged metrics.
    Run(RunArgs),
    /// Run every combination of a sweep spec, resuming earlier progress.
    Sweep(SweepArgs),
    /// Print optimality maps for a finished sweep.
    Analyze(AnalyzeArgs),
    /// Write tables and SVG figures for a finished sweep.
    Report(ReportArgs),
    /// List available backends and their transports.
    ListBackends(BackendArgs),
    /// Serve one role of the adapter protocol with an in-tree backend.
    #[command(hide = true)]
    Adapter(AdapterArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Latency,
    Throughput,
    Cpu,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Latency => Profile::Latency,
            ProfileArg::Throughput => Profile::Throughput,
            ProfileArg::Cpu => Profile::Cpu,
        }
    }
}

#[derive(Debug, Clone, Args, Default)]
pub struct BackendArgs {
    /// Out-of-tree backend reachable through the adapter protocol, as
    /// `NAME=COMMAND ARGS...`; supports ipc and tcp. Repeatable.
    #[arg(long = "adapter", value_name = "NAME=CMD")]
    pub adapters: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct HarnessArgs {
    /// Resource sampling interval in ms; 0 disables sampling.
    #[arg(long, default_value_t = 100)]
    pub sample_interval_ms: u64,
    /// Subscriber silence timeout in ms.
    #[arg(long, default_value_t = 5000)]
    pub silence_timeout_ms: u64,
    /// Run in-tree backends in one process (threads) even on ipc/tcp.
    #[arg(long)]
    pub threads: bool,
    /// Directory for socket files.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Count a failed repetition as failed instead of re-running it once.
    #[arg(long)]
    pub no_retry: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML file with an experiment configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub transport: Option<Transport>,
    /// Interval preset: latency (T=1000 µs) or throughput/cpu (T=0).
    #[arg(long, value_enum, default_value_t = ProfileArg::Latency)]
    pub profile: ProfileArg,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub subscribers: Option<usize>,
    #[arg(long)]
    pub count: Option<u64>,
    /// Payload size, e.g. 32768 or 32KB.
    #[arg(long)]
    pub size: Option<ByteSize>,
    #[arg(long)]
    pub interval_us: Option<u64>,
    #[arg(long)]
    pub delay_ms: Option<u64>,
    #[arg(long)]
    pub repetitions: Option<u32>,
    /// Cores for publisher then subscribers, e.g. `2,3,4`.
    #[arg(long, env = affinity::CORES_ENV)]
    pub cores: Option<String>,
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    #[arg(long)]
    pub socket_buffer: Option<usize>,
    /// Archive raw per-run data under this directory.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    #[command(flatten)]
    pub harness: HarnessArgs,
    #[command(flatten)]
    pub backends: BackendArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Results root; the sweep writes to `<out>/<sweep-id>/`.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    /// Explicit sweep id instead of the spec hash.
    #[arg(long)]
    pub id: Option<String>,
    /// Re-run configurations that already have rows.
    #[arg(long)]
    pub force: bool,
    /// Stop after this many new rows.
    #[arg(long)]
    pub max_rows: Option<usize>,
    /// Skip writing figures and tables at the end.
    #[arg(long)]
    pub no_report: bool,
    #[arg(long, value_delimiter = ',')]
    pub backends: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub transports: Option<Vec<Transport>>,
    #[arg(long, value_delimiter = ',')]
    pub intervals_us: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub payload_sizes: Option<Vec<ByteSize>>,
    #[arg(long, value_delimiter = ',')]
    pub subscribers: Option<Vec<usize>>,
    #[arg(long)]
    pub count: Option<u64>,
    #[arg(long)]
    pub delay_ms: Option<u64>,
    #[arg(long)]
    pub repetitions: Option<u32>,
    #[arg(long, env = affinity::CORES_ENV)]
    pub cores: Option<String>,
    #[command(flatten)]
    pub harness: HarnessArgs,
    #[command(flatten)]
    pub adapter_args: BackendArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Sweep directory (containing rows.jsonl).
    pub dir: PathBuf,
    /// Metric name: latency_avg, latency_p90, latency_p99, throughput,
    /// jitter, cpu or memory.
    #[arg(long, default_value = "latency_avg")]
    pub metric: Metric,
    /// Override the metric's natural direction.
    #[arg(long, value_parser = parse_direction)]
    pub direction: Option<Direction>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AdapterArgs {
    #[arg(long)]
    pub role: Role,
    #[arg(long)]
    pub endpoint: String,
    #[arg(long)]
    pub transport: Transport,
    #[arg(long)]
    pub count: u64,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub interval_us: u64,
    #[arg(long)]
    pub delay_ms: u64,
    #[arg(long, default_value = brokerbench::refbus::NAME)]
    pub backend: String,
    #[arg(long, default_value_t = Tuning::default().queue_capacity)]
    pub queue_capacity: usize,
    #[arg(long, default_value_t = Tuning::default().socket_buffer_bytes)]
    pub socket_buffer: usize,
    #[arg(long, default_value_t = 5000)]
    pub silence_timeout_ms: u64,
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    match s {
        "min" | "minimize" => Ok(Direction::Minimize),
        "max" | "maximize" => Ok(Direction::Maximize),
        other => Err(format!("unknown direction `{other}` (use min or max)")),
    }
}

/// A command-line mistake; reported with exit status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

/// Parse `NAME=COMMAND ARGS...` into an adapter descriptor.
pub fn parse_adapter(spec: &str) -> Result<BackendDescriptor, UsageError> {
    let (name, command) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--adapter expects NAME=CMD, got `{spec}`")))?;
    let command: Vec<String> = command.split_whitespace().map(String::from).collect();
    if name.trim().is_empty() || command.is_empty() {
        return Err(usage(format!("--adapter expects NAME=CMD, got `{spec}`")));
    }
    Ok(BackendDescriptor::adapter(
        name.trim(),
        command,
        [Transport::InterProcess, Transport::Tcp],
    ))
}

pub fn build_registry(adapters: &BackendArgs) -> Result<BackendRegistry, UsageError> {
    let mut registry = BackendRegistry::with_defaults();
    for spec in &adapters.adapters {
        registry.register_adapter(parse_adapter(spec)?);
    }
    Ok(registry)
}

fn parse_cores(cores: &Option<String>) -> Result<Vec<usize>, UsageError> {
    match cores {
        Some(list) => affinity::parse_core_list(list).map_err(usage),
        None => Ok(Vec::new()),
    }
}

/// Runner options for the CLI: in-tree backends on stream transports run
/// one process per role by re-invoking this executable, unless `--threads`.
pub fn runner_options(harness: &HarnessArgs, archive: Option<PathBuf>) -> RunnerOptions {
    let role_command = if harness.threads {
        None
    } else {
        std::env::current_exe()
            .ok()
            .map(|exe| vec![exe.to_string_lossy().into_owned(), "adapter".into()])
    };
    RunnerOptions {
        sample_interval: (harness.sample_interval_ms > 0).then(|| Duration::from_millis(harness.sample_interval_ms)),
        silence_timeout: Duration::from_millis(harness.silence_timeout_ms),
        archive_dir: archive,
        run_dir: harness.run_dir.clone().unwrap_or_else(std::env::temp_dir),
        role_command,
        retry_failed: !harness.no_retry,
    }
}

/// Build and validate the experiment configuration for `run`.
pub fn experiment_config(args: &RunArgs, registry: &BackendRegistry) -> Result<ExperimentConfig, UsageError> {
    let profile = Profile::from(args.profile);
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => ExperimentConfig::baseline(brokerbench::refbus::NAME, Transport::Tcp, profile),
    };
    if args.profile != ProfileArg::Latency {
        if let Some(t) = args.interval_us.filter(|t| *t != 0) {
            return Err(usage(format!(
                "--profile {:?} measures unpaced publishing; drop --interval-us {t} or use --profile latency",
                profile
            )
            .to_lowercase()));
        }
        config.interval_us = 0;
    }
    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                config.$field = v;
            }
        };
    }
    set!(backend, args.backend.clone());
    set!(transport, args.transport);
    set!(subscribers, args.subscribers);
    set!(count, args.count);
    set!(payload_size, args.size.map(ByteSize::bytes));
    set!(interval_us, args.interval_us);
    set!(delay_ms, args.delay_ms);
    set!(repetitions, args.repetitions);
    if args.endpoint.is_some() {
        config.endpoint = args.endpoint.clone();
    }
    if args.cores.is_some() {
        config.pinning = parse_cores(&args.cores)?;
    }
    if let Some(v) = args.queue_capacity {
        config.tuning.queue_capacity = v;
    }
    if let Some(v) = args.socket_buffer {
        config.tuning.socket_buffer_bytes = v;
    }
    check_combination(&config, registry)?;
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn check_combination(config: &ExperimentConfig, registry: &BackendRegistry) -> Result<(), UsageError> {
    let entry = registry.get(&config.backend).ok_or_else(|| {
        let known: Vec<&str> = registry.descriptors().map(|d| d.name.as_str()).collect();
        usage(format!("unknown backend `{}` (available: {})", config.backend, known.join(", ")))
    })?;
    let descriptor = entry.descriptor();
    if descriptor.kind == BackendKind::SubprocessAdapter && config.transport == Transport::InProcess {
        return Err(usage(format!(
            "backend `{}` runs as separate processes and cannot use inproc, which needs a shared address space; \
             use ipc or tcp",
            config.backend
        )));
    }
    descriptor.check_transport(config.transport).map_err(|e| usage(e.to_string()))
}

/// Apply command-line overrides to a sweep spec.
pub fn sweep_spec(args: &SweepArgs) -> Result<SweepSpec, UsageError> {
    if !args.spec.exists() {
        return Err(usage(format!("sweep spec {} not found", args.spec.display())));
    }
    let mut spec = SweepSpec::load(&args.spec).map_err(|e| usage(format!("{}: {e}", args.spec.display())))?;
    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                spec.$field = v;
            }
        };
    }
    set!(backends, args.backends.clone());
    set!(transports, args.transports.clone());
    set!(intervals_us, args.intervals_us.clone());
    set!(payload_sizes, args.payload_sizes.clone());
    set!(subscribers, args.subscribers.clone());
    set!(count, args.count);
    set!(delay_ms, args.delay_ms);
    set!(repetitions, args.repetitions);
    if args.cores.is_some() {
        spec.pinning = parse_cores(&args.cores)?;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

fn print_json(out: &mut dyn Write, value: &impl serde::Serialize) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value).expect("serializable"))
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_else(|| "-".into())
}

fn cmd_run(args: &RunArgs, json: bool, out: &mut dyn Write) -> Result<i32, Box<dyn std::error::Error>> {
    let registry = build_registry(&args.backends)?;
    let config = experiment_config(args, &registry)?;
    let runner = Runner::new(registry, runner_options(&args.harness, args.archive.clone()));
    let outcome = match runner.execute(&config) {
        Ok(o) => o,
        Err(RunnerError::AllRunsFailed(n, first)) => {
            if json {
                print_json(out, &serde_json::json!({"status": "failed", "runs": n, "error": first}))?;
            } else {
                writeln!(out, "all {n} runs failed: {first}")?;
            }
            return Ok(EXIT_ALL_FAILED);
        }
        Err(e) => return Err(e.into()),
    };
    if json {
        print_json(out, &outcome)?;
    } else {
        let m = &outcome.metrics;
        writeln!(
            out,
            "{} over {}: S={} C={} P={} T={} µs, {}/{} runs ok",
            config.backend,
            config.transport,
            config.subscribers,
            config.count,
            ByteSize(config.payload_size),
            config.interval_us,
            outcome.runs.len(),
            config.repetitions
        )?;
        writeln!(
            out,
            "latency µs    min {:.2}  avg {:.2}  p90 {:.2}  p99 {:.2}  max {:.2}",
            m.latency.min, m.latency.avg, m.latency.p90, m.latency.p99, m.latency.max
        )?;
        writeln!(out, "throughput    {:.2} MB/s", m.throughput_mbps)?;
        writeln!(out, "jitter        {} µs", fmt_opt(m.jitter_us, 3))?;
        writeln!(out, "received      {:.1} of {:.0} (loss {:.4})", m.received, m.sent, m.loss())?;
        writeln!(out, "cpu median    {} %", fmt_opt(m.cpu_median, 2))?;
        writeln!(out, "memory median {} %", fmt_opt(m.mem_median, 4))?;
        for f in &outcome.failures {
            writeln!(out, "run {} attempt {} failed: {}", f.run_index, f.attempt, f.error)?;
        }
        if let Some(a) = &outcome.archive {
            writeln!(out, "archive       {a}")?;
        }
    }
    Ok(if outcome.partial { EXIT_PARTIAL } else { EXIT_OK })
}

fn cmd_sweep(args: &SweepArgs, json: bool, out: &mut dyn Write) -> Result<i32, Box<dyn std::error::Error>> {
    let spec = sweep_spec(args)?;
    let mut registry = build_registry(&args.adapter_args)?;
    spec.register_adapters(&mut registry);
    for config in spec.enumerate() {
        check_combination(&config, &registry)?;
    }
    let dir = args.out.join(args.id.clone().unwrap_or_else(|| spec.id()));
    let options = runner_options(&args.harness, None);
    let result = sweep::run_sweep(
        &spec,
        &registry,
        &options,
        &dir,
        &SweepOptions {
            force: args.force,
            max_new_rows: args.max_rows,
        },
    )?;
    if !args.no_report {
        report::emit_reports(&result, &dir)?;
    }
    let complete = result.rows.len() == spec.len();
    if json {
        print_json(
            out,
            &serde_json::json!({
                "dir": dir,
                "rows": result.rows.len(),
                "configs": spec.len(),
                "complete": complete,
                "failed": result.rows.iter().filter(|r| r.status != sweep::RowStatus::Ok).count(),
            }),
        )?;
    } else {
        writeln!(out, "{} of {} configurations in {}", result.rows.len(), spec.len(), dir.display())?;
        for row in result.rows.iter().filter(|r| r.status != sweep::RowStatus::Ok) {
            writeln!(out, "{:?} {}: {}", row.status, row.key, row.error.as_deref().unwrap_or(""))?;
        }
    }
    Ok(if result.all_failed() {
        EXIT_ALL_FAILED
    } else if result.has_failures() {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

fn load_result(dir: &Path) -> Result<SweepResult, UsageError> {
    SweepResult::load(dir).map_err(|e| usage(format!("cannot load sweep results from {}: {e}", dir.display())))
}

fn cmd_analyze(args: &AnalyzeArgs, json: bool, out: &mut dyn Write) -> Result<i32, Box<dyn std::error::Error>> {
    let result = load_result(&args.dir)?;
    let maps = match sweep::optimality(&result, args.metric, args.direction) {
        Ok(m) => m,
        Err(e @ SweepError::IncompleteGrid { .. }) => return Err(Box::new(usage(e.to_string()))),
        Err(e) => return Err(e.into()),
    };
    if json {
        print_json(out, &maps)?;
        return Ok(EXIT_OK);
    }
    for map in &maps {
        writeln!(
            out,
            "best {} ({:?}) on {} at T={} µs; * marks ties",
            map.metric.name(),
            map.direction,
            map.transport,
            map.interval_us
        )?;
        write!(out, "{:>8}", "P \\ S")?;
        for s in &map.subscribers {
            write!(out, " {s:>12}")?;
        }
        writeln!(out)?;
        for p in &map.payload_sizes {
            write!(out, "{:>8}", ByteSize(*p).to_string())?;
            for s in &map.subscribers {
                let cell = map.cell(*p, *s).expect("complete grid");
                let label = format!("{}{}", cell.winner, if cell.tie { "*" } else { "" });
                write!(out, " {label:>12}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_report(args: &ReportArgs, json: bool, out: &mut dyn Write) -> Result<i32, Box<dyn std::error::Error>> {
    let result = load_result(&args.dir)?;
    let written = report::emit_reports(&result, &args.dir)?;
    if json {
        print_json(out, &written)?;
    } else {
        for path in written {
            writeln!(out, "{}", path.display())?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_list(args: &BackendArgs, json: bool, out: &mut dyn Write) -> Result<i32, Box<dyn std::error::Error>> {
    let registry = build_registry(args)?;
    let descriptors: Vec<&BackendDescriptor> = registry.descriptors().collect();
    if json {
        print_json(out, &descriptors)?;
    } else {
        for d in descriptors {
            let transports: Vec<&str> = d.supported_transports.iter().map(|t| t.as_str()).collect();
            writeln!(out, "{:<12} {:<18} {}", d.name, format!("{:?}", d.kind), transports.join(","))?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_adapter(args: &AdapterArgs, out: &mut dyn Write) -> Result<i32, Box<dyn std::error::Error>> {
    if args.backend != brokerbench::refbus::NAME {
        return Err(Box::new(usage(format!("no in-tree backend named `{}`", args.backend))));
    }
    let backend = Arc::new(Refbus::new());
    let role = RoleArgs {
        role: args.role,
        endpoint: args.endpoint.clone(),
        transport: args.transport,
        count: args.count,
        size: args.size,
        interval_us: args.interval_us,
        delay_ms: args.delay_ms,
    };
    let tuning = Tuning {
        queue_capacity: args.queue_capacity,
        socket_buffer_bytes: args.socket_buffer,
    };
    let json = runner::run_role(backend.as_ref(), &role, &tuning, Duration::from_millis(args.silence_timeout_ms))?;
    writeln!(out, "{json}")?;
    Ok(EXIT_OK)
}

/// Dispatch a parsed command; errors are mapped to exit codes by [`run`].
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32, Box<dyn std::error::Error>> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, cli.json, out),
        Command::Sweep(a) => cmd_sweep(a, cli.json, out),
        Command::Analyze(a) => cmd_analyze(a, cli.json, out),
        Command::Report(a) => cmd_report(a, cli.json, out),
        Command::ListBackends(a) => cmd_list(a, cli.json, out),
        Command::Adapter(a) => cmd_adapter(a, out),
    }
}

/// Parse `argv`, run, and return the process exit status.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is::<UsageError>() {
                EXIT_USAGE
            } else {
                EXIT_ALL_FAILED
            }
        }
    }
}
