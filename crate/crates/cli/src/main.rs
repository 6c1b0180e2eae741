//! `memprobe` command-line front end.
//!
//! Exit codes: 0 success, 1 measurement error, 2 usage error, 3 refused by
//! the environment policy. Every failure also writes one JSON error record
//! to stderr.

mod profiles;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use memprobe::analysis::{self, reference, Metric, ResultSet, SeriesSummary};
use memprobe::backend::current_affinity;
use memprobe::chase::measure_latency;
use memprobe::env::{enforce, inspect_environment, EnvReport, Policy};
use memprobe::model::{self, Document, Record};
use memprobe::store::RunStore;
use memprobe::stream::{cores_in_node, run_stream};
use memprobe::sweep::{default_plans, run_sweep, SweepKind, SweepPlan};
use memprobe::{AccessMode, Bytes, ChaseSpec, DeviceProfile, Error, Nanos, StreamSpec};
use serde::{Deserialize, Serialize};

use profiles::{ProfileStore, BUILTIN_PROFILE};

const EXIT_MEASUREMENT: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_POLICY: u8 = 3;

/// Memory latency and bandwidth probes.
#[derive(Debug, Parser)]
#[command(name = "memprobe", version, arg_required_else_help = true)]
struct Cli {
    /// Profile store (TOML). Defaults to ./memprobe-profiles.toml when present.
    #[arg(long, env = "MEMPROBE_PROFILES", global = true)]
    profiles: Option<PathBuf>,

    /// Output format for stdout.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,

    /// Refuse to run (exit 3) unless SMT, THP and ASLR are all off.
    #[arg(long, global = true)]
    strict_env: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    /// Versioned JSON documents.
    Structured,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the platform report.
    Env,
    /// One pointer-chase latency measurement.
    Latency(LatencyArgs),
    /// One multi-worker scan bandwidth measurement.
    Bandwidth(BandwidthArgs),
    /// Latency vs buffer size and/or bandwidth vs worker count into a run directory.
    Sweep(SweepArgs),
    /// Re-render the summaries and plot data of a run directory.
    Report(ReportArgs),
    /// Ratio table between two run directories, or between published reference sets.
    Compare(CompareArgs),
}

fn parse_bytes(s: &str) -> Result<Bytes, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<AccessMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
struct Timing {
    /// Chase seed.
    #[arg(long, default_value_t = ChaseSpec::DEFAULT_SEED)]
    seed: u64,
    /// Timed runs; the median is reported.
    #[arg(long, default_value_t = 5)]
    runs: u32,
    /// Untimed passes before calibration.
    #[arg(long, default_value_t = 1)]
    warmup: u32,
    /// Minimum duration of each timed run, in milliseconds.
    #[arg(long, default_value_t = 200)]
    min_time_ms: u64,
    /// Restrict random jumps to windows of this size (e.g. 256K).
    #[arg(long, value_parser = parse_bytes)]
    window_bytes: Option<Bytes>,
}

#[derive(Debug, Args)]
struct LatencyArgs {
    /// Device profile name.
    #[arg(long, default_value = BUILTIN_PROFILE)]
    profile: String,
    /// ro or wb.
    #[arg(long, value_parser = parse_mode, default_value = "ro")]
    mode: AccessMode,
    /// Chase buffer size; accepts K/M/G suffixes.
    #[arg(long, value_parser = parse_bytes, default_value = "1G")]
    buffer_bytes: Bytes,
    #[command(flatten)]
    timing: Timing,
    /// Core to pin to; defaults to the first usable core of the profile's node.
    #[arg(long)]
    core: Option<u32>,
    /// 4K or 2M.
    #[arg(long, value_parser = parse_bytes, default_value = "4K")]
    page_bytes: Bytes,
    /// Directory to store the result document in.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BandwidthArgs {
    #[arg(long, default_value = BUILTIN_PROFILE)]
    profile: String,
    #[arg(long, value_parser = parse_mode, default_value = "ro")]
    mode: AccessMode,
    /// Worker count; defaults to every usable core of the profile's node.
    #[arg(long)]
    workers: Option<u32>,
    /// Private buffer per worker.
    #[arg(long, value_parser = parse_bytes, default_value = "1G")]
    per_worker_bytes: Bytes,
    /// Scans per worker; defaults to roughly one second of scanning.
    #[arg(long)]
    passes: Option<u32>,
    #[arg(long, default_value_t = ChaseSpec::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_parser = parse_bytes, default_value = "4K")]
    page_bytes: Bytes,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Latency,
    Bandwidth,
    All,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, default_value = BUILTIN_PROFILE)]
    profile: String,
    #[arg(long, value_enum, default_value_t = KindArg::All)]
    kind: KindArg,
    /// Access modes to measure; repeat or comma-separate. Both by default.
    #[arg(long = "mode", value_parser = parse_mode, value_delimiter = ',')]
    modes: Vec<AccessMode>,
    /// Latency points; defaults to powers of two from 32K up to the node's memory (max 4G).
    #[arg(long, value_parser = parse_bytes, value_delimiter = ',')]
    buffer_points: Vec<Bytes>,
    /// Drop default latency points above this size.
    #[arg(long, value_parser = parse_bytes)]
    max_buffer_bytes: Option<Bytes>,
    /// Bandwidth points; defaults to 1..=usable cores of the node.
    #[arg(long, value_delimiter = ',')]
    worker_points: Vec<u64>,
    #[command(flatten)]
    timing: Timing,
    #[arg(long, value_parser = parse_bytes, default_value = "1G")]
    per_worker_bytes: Bytes,
    #[arg(long)]
    passes: Option<u32>,
    #[arg(long, value_parser = parse_bytes, default_value = "4K")]
    page_bytes: Bytes,
    /// Run directory. Re-running the same plan into it resumes.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory written by `sweep`.
    #[arg(long)]
    out: PathBuf,
    /// Largest buffer points averaged into the latency plateau.
    #[arg(long, default_value_t = 3)]
    tail_points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReferenceArg {
    /// Interleaved DCPMM against interleaved DRAM.
    DcpmmVsDram,
    /// Non-interleaved DCPMM against interleaved DCPMM.
    NonInterleavedVsInterleaved,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Baseline run directory.
    #[arg(long, required_unless_present = "reference", requires = "subject")]
    baseline: Option<PathBuf>,
    /// Subject run directory; ratios are subject / baseline.
    #[arg(long, requires = "baseline")]
    subject: Option<PathBuf>,
    /// Compare published reference values instead of run directories.
    #[arg(long, value_enum, conflicts_with_all = ["baseline", "subject"])]
    reference: Option<ReferenceArg>,
    /// Where rendered tables go; defaults to the subject run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    tail_points: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ErrorRecord {
    exit_code: u8,
    error: String,
    message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    violations: Vec<String>,
}

impl Record for ErrorRecord {
    const KIND: &'static str = "error";
    fn units() -> &'static [(&'static str, &'static str)] {
        &[]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunSummary {
    series: Vec<SeriesSummary>,
}

impl Record for RunSummary {
    const KIND: &'static str = "run_summary";
    fn units() -> &'static [(&'static str, &'static str)] {
        &[("series.value", "ns (latency plateau) or GB/s (peak bandwidth, 1 GB = 1e9 bytes)")]
    }
}

#[derive(Debug)]
struct Failure(ErrorRecord);

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure(ErrorRecord {
            exit_code: EXIT_USAGE,
            error: "usage".into(),
            message: message.into(),
            violations: Vec::new(),
        })
    }

    fn invalid(e: Error) -> Self {
        Failure(ErrorRecord {
            exit_code: EXIT_USAGE,
            error: e.kind().into(),
            message: e.to_string(),
            violations: Vec::new(),
        })
    }

    fn measurement(e: Error) -> Self {
        let (exit_code, violations) = match &e {
            Error::Policy { violations } => (EXIT_POLICY, violations.clone()),
            _ => (EXIT_MEASUREMENT, Vec::new()),
        };
        Failure(ErrorRecord { exit_code, error: e.kind().into(), message: e.to_string(), violations })
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if e.exit_code() == 0 {
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default();
            let message = first.strip_prefix("error: ").unwrap_or(first);
            emit_error(&Failure::usage(message).0, Format::Structured);
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(record)) => {
            emit_error(&record, cli.format);
            ExitCode::from(record.exit_code)
        }
    }
}

fn emit_error(record: &ErrorRecord, format: Format) {
    if format == Format::Text && record.error != "usage" {
        eprintln!("memprobe: {}", record.message);
    }
    let doc = Document::new(record.clone(), None);
    eprintln!("{}", serde_json::to_string(&doc).expect("error records serialize"));
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Env => cmd_env(cli),
        Command::Latency(a) => cmd_latency(cli, a),
        Command::Bandwidth(a) => cmd_bandwidth(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Report(a) => cmd_report(cli, a),
        Command::Compare(a) => cmd_compare(cli, a),
    }
}

fn policy(cli: &Cli) -> Policy {
    if cli.strict_env {
        Policy::Strict
    } else {
        Policy::Advisory
    }
}

/// Inspects the host and applies the policy before any buffer is mapped.
fn checked_env(cli: &Cli) -> Result<EnvReport, Failure> {
    let env = inspect_environment();
    let warnings = enforce(policy(cli), &env).map_err(Failure::measurement)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(env)
}

fn profile(cli: &Cli, name: &str) -> Result<DeviceProfile, Failure> {
    ProfileStore::load(cli.profiles.as_deref())
        .and_then(|s| s.get(name))
        .map_err(Failure::usage)
}

/// Cores of `node` this process is allowed to run on.
fn usable_cores(node: u32) -> Vec<u32> {
    let domain = cores_in_node(node);
    match current_affinity() {
        Ok(allowed) => domain.into_iter().filter(|c| allowed.contains(c)).collect(),
        Err(_) => domain,
    }
}

fn check_page(page: Bytes) -> CmdResult {
    if page.0 == 4096 || page == Bytes::mib(2) {
        Ok(())
    } else {
        Err(Failure::usage(format!("page size {page} is not supported (4K or 2M)")))
    }
}

fn write_doc<T: Record + Clone>(dir: &Path, name: &str, record: &T, env: &EnvReport) -> CmdResult {
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(dir.join(name), model::serialize(record, Some(env))))
        .map_err(|e| Failure::measurement(e.into()))
}

fn cmd_env(cli: &Cli) -> CmdResult {
    let env = inspect_environment();
    match cli.format {
        Format::Text => print!("{}", render::env(&env)),
        Format::Structured => println!("{}", model::serialize(&env, None)),
    }
    enforce(policy(cli), &env).map(|_| ()).map_err(Failure::measurement)
}

fn cmd_latency(cli: &Cli, a: &LatencyArgs) -> CmdResult {
    let device = profile(cli, &a.profile)?;
    check_page(a.page_bytes)?;
    let t = &a.timing;
    let mut spec = ChaseSpec::new(a.buffer_bytes, a.mode);
    spec.window_bytes = t.window_bytes;
    spec.seed = t.seed;
    spec.runs = t.runs;
    spec.warmup_passes = t.warmup;
    spec.min_timed_duration = Nanos::from(Duration::from_millis(t.min_time_ms));
    spec.pin_core = match a.core {
        Some(c) => c,
        None => *usable_cores(device.numa_node).first().ok_or_else(|| {
            Failure::measurement(Error::Topology(format!("no usable core in node {}", device.numa_node)))
        })?,
    };
    spec.validate().map_err(Failure::invalid)?;

    let env = checked_env(cli)?;
    let result = measure_latency(&device, &spec, a.page_bytes).map_err(Failure::measurement)?;
    if let Some(dir) = &a.out {
        let name = format!(
            "latency-{}-{}.json",
            spec.mode.label().to_ascii_lowercase(),
            spec.buffer_bytes.0
        );
        write_doc(dir, &name, &result, &env)?;
    }
    match cli.format {
        Format::Text => print!("{}", render::chase(&result)),
        Format::Structured => println!("{}", model::serialize(&result, Some(&env))),
    }
    Ok(())
}

fn cmd_bandwidth(cli: &Cli, a: &BandwidthArgs) -> CmdResult {
    let device = profile(cli, &a.profile)?;
    check_page(a.page_bytes)?;
    let cores = usable_cores(device.numa_node);
    let n = a.workers.unwrap_or(cores.len() as u32) as usize;
    if n > cores.len() {
        return Err(Failure::measurement(Error::Topology(format!(
            "{n} workers requested but only {} usable cores in node {}",
            cores.len(),
            device.numa_node
        ))));
    }
    let mut spec = StreamSpec::new(&cores[..n], a.per_worker_bytes, a.mode);
    spec.seed = a.seed;
    if let Some(p) = a.passes {
        spec.passes = p;
    }
    if n > 0 {
        spec.validate().map_err(Failure::invalid)?;
    }

    let env = checked_env(cli)?;
    let result = run_stream(&spec, &device, a.page_bytes).map_err(Failure::measurement)?;
    if let Some(dir) = &a.out {
        let name = format!(
            "bandwidth-{}-{}w.json",
            spec.mode.label().to_ascii_lowercase(),
            spec.worker_count
        );
        write_doc(dir, &name, &result, &env)?;
    }
    match cli.format {
        Format::Text => print!("{}", render::stream(&result)),
        Format::Structured => println!("{}", model::serialize(&result, Some(&env))),
    }
    Ok(())
}

fn build_plans(a: &SweepArgs, device: &DeviceProfile, env: &EnvReport) -> Result<Vec<SweepPlan>, Failure> {
    let cores = usable_cores(device.numa_node);
    if cores.is_empty() {
        return Err(Failure::measurement(Error::Topology(format!(
            "no usable core in node {}",
            device.numa_node
        ))));
    }
    let t = &a.timing;
    let mut plans = Vec::new();
    for mut plan in default_plans(device, env) {
        let wanted = match plan.kind {
            SweepKind::LatencyVsBuffer => a.kind != KindArg::Bandwidth,
            SweepKind::BandwidthVsWorkers => a.kind != KindArg::Latency,
        };
        if !wanted {
            continue;
        }
        match plan.kind {
            SweepKind::LatencyVsBuffer => {
                if !a.buffer_points.is_empty() {
                    plan.points = a.buffer_points.iter().map(|b| b.0).collect();
                }
                if let Some(cap) = a.max_buffer_bytes {
                    plan.points.retain(|&p| p <= cap.0);
                }
            }
            SweepKind::BandwidthVsWorkers => {
                plan.points = if a.worker_points.is_empty() {
                    (1..=cores.len() as u64).collect()
                } else {
                    a.worker_points.clone()
                };
            }
        }
        plan.points.sort_unstable();
        plan.points.dedup();
        if !a.modes.is_empty() {
            plan.modes = a.modes.clone();
            plan.modes.dedup();
        }
        plan.cores = cores.clone();
        plan.seed = t.seed;
        plan.runs = t.runs;
        plan.warmup_passes = t.warmup;
        plan.min_timed_duration = Nanos::from(Duration::from_millis(t.min_time_ms));
        plan.window_bytes = t.window_bytes;
        plan.per_worker_bytes = a.per_worker_bytes;
        plan.passes = a.passes;
        plan.page_bytes = a.page_bytes;
        plan.validate().map_err(Failure::invalid)?;
        plans.push(plan);
    }
    // The bandwidth sweep is missing when the node reports no cores.
    if a.kind == KindArg::Bandwidth && plans.is_empty() {
        return Err(Failure::measurement(Error::Topology("no cores for a bandwidth sweep".into())));
    }
    Ok(plans)
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> CmdResult {
    let device = profile(cli, &a.profile)?;
    check_page(a.page_bytes)?;
    let env = inspect_environment();
    let plans = build_plans(a, &device, &env)?;
    let env = checked_env(cli)?;

    let store = RunStore::create(&a.out).map_err(Failure::measurement)?;
    store.write_env(&env).map_err(Failure::measurement)?;
    for plan in &plans {
        if let Err(e) = run_sweep(plan, &env, Some(&store)) {
            let mut f = Failure::measurement(e.source);
            f.0.message = format!("{} sweep failed: {}", plan.kind.slug(), f.0.message);
            if let (Some(m), Some(p)) = (e.mode, e.point) {
                f.0.message.push_str(&format!(" ({m} point {p})"));
            }
            return Err(f);
        }
    }
    render_run(cli, &store, 3)
}

fn render_run(cli: &Cli, store: &RunStore, tail_points: usize) -> CmdResult {
    let reports = store.load_reports().map_err(Failure::measurement)?;
    if reports.is_empty() {
        return Err(Failure::usage(format!(
            "{} holds no sweep reports",
            store.dir().display()
        )));
    }
    let mut series = Vec::new();
    for r in &reports {
        series.extend(analysis::summarize(r, tail_points).map_err(Failure::measurement)?);
        store
            .write_rendered(&format!("{}.tsv", r.plan.kind.slug()), &analysis::series_tsv(r))
            .map_err(Failure::measurement)?;
    }
    let text = analysis::render_summaries(&series);
    let summary = RunSummary { series };
    let json = model::serialize(&summary, None);
    store.write_rendered("summary.txt", &text).map_err(Failure::measurement)?;
    store.write_rendered("summary.json", &json).map_err(Failure::measurement)?;
    match cli.format {
        Format::Text => print!("{text}"),
        Format::Structured => println!("{json}"),
    }
    Ok(())
}

fn cmd_report(cli: &Cli, a: &ReportArgs) -> CmdResult {
    let store = RunStore::open(&a.out).map_err(|e| Failure::usage(e.to_string()))?;
    render_run(cli, &store, a.tail_points)
}

fn load_set(dir: &Path, tail_points: usize) -> Result<ResultSet, Failure> {
    let store = RunStore::open(dir).map_err(|e| Failure::usage(e.to_string()))?;
    let reports = store.load_reports().map_err(Failure::measurement)?;
    let label = reports
        .first()
        .map(|r| r.plan.device.name.clone())
        .ok_or_else(|| Failure::usage(format!("{} holds no sweep reports", dir.display())))?;
    ResultSet::from_reports(label, &reports, tail_points).map_err(Failure::measurement)
}

fn file_label(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn cmd_compare(cli: &Cli, a: &CompareArgs) -> CmdResult {
    let (baseline, mut subject) = match (a.reference, &a.baseline, &a.subject) {
        (Some(ReferenceArg::DcpmmVsDram), _, _) => {
            (reference::dram_interleaved(), reference::dcpmm_interleaved())
        }
        (Some(ReferenceArg::NonInterleavedVsInterleaved), _, _) => {
            (reference::dcpmm_interleaved(), reference::dcpmm_non_interleaved())
        }
        (None, Some(b), Some(s)) => (load_set(b, a.tail_points)?, load_set(s, a.tail_points)?),
        _ => return Err(Failure::usage("compare needs --baseline and --subject, or --reference")),
    };
    if subject.label == baseline.label {
        subject.label = format!("{} (subject)", subject.label);
    }
    let metrics = analysis::common_metrics(&baseline, &subject);
    if metrics.is_empty() {
        return Err(Failure::measurement(Error::MissingMetric(format!(
            "`{}` and `{}` share no metric (wanted any of {})",
            baseline.label,
            subject.label,
            Metric::ALL.map(|m| m.name()).join(", ")
        ))));
    }
    let table = analysis::ratio_table(&baseline, &subject, &metrics).map_err(Failure::measurement)?;
    let text = analysis::render_ratio_table(&table);

    let out = a.out.clone().or_else(|| a.subject.clone());
    if let Some(dir) = out {
        let store = RunStore::create(dir).map_err(Failure::measurement)?;
        let stem = format!("compare-{}-vs-{}", file_label(&baseline.label), file_label(&subject.label));
        store
            .write_rendered(&format!("{stem}.txt"), &text)
            .and_then(|_| store.write_rendered(&format!("{stem}.json"), &model::serialize(&table, None)))
            .map_err(Failure::measurement)?;
    }
    match cli.format {
        Format::Text => print!("{text}"),
        Format::Structured => println!("{}", model::serialize(&table, None)),
    }
    Ok(())
}
