//! `minos`: server, benchmark client, queueing simulator and report tool.

mod report;

use std::fmt::Write as _;
use std::io::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use minos_core::kvstore::StoreConfig;
use minos_core::loadgen::{
    self, build_keyspace, sweep_slo, InprocSetup, RunResult, WorkloadSpec, CURVE_CSV_HEADER, RUN_CSV_HEADER,
};
use minos_core::runtime::harness::Harness;
use minos_core::runtime::udp::UdpServer;
use minos_core::runtime::{epoch_csv_rows, Policy, Server, ServerConfig, ServiceModel, EPOCH_CSV_HEADER};
use minos_core::shardctl::ShardPlan;
use minos_qsim::{Discipline, SimConfig};

const EXIT_HELP: &str = "Exit codes:
  0  success
  1  runtime failure (socket, file write or simulation error)
  2  invalid arguments or configuration
  3  malformed input file (workload spec or CSV)

The MINOS_SEED environment variable sets the default seed.";

#[derive(Parser)]
#[command(name = "minos", version, about = "Size-aware sharded key-value store toolkit", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for every random stream; overrides the seed of a spec file.
    #[arg(long, global = true, env = "MINOS_SEED")]
    seed: Option<u64>,
    /// Output CSV file; standard output when omitted or `-`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
}

#[derive(Subcommand)]
enum Command {
    /// Run a server and write per-epoch, per-core statistics.
    Serve(ServeArgs),
    /// Drive a server with open-loop load and report latency.
    Bench(BenchArgs),
    /// Simulate the queueing models behind the dispatch policies.
    Qsim(QsimArgs),
    /// Merge CSV outputs into sorted, annotated tables.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    /// Deterministic virtual-time harness in this process.
    Inproc,
    /// One UDP socket per RX queue.
    Udp,
}

#[derive(Args, Clone)]
struct ServerArgs {
    /// size-aware, hkh, sho or hkh-ws.
    #[arg(long, default_value = "size-aware")]
    policy: String,
    #[arg(long, default_value_t = 8)]
    cores: usize,
    /// Handoff cores for sho.
    #[arg(long, default_value_t = 1)]
    handoff: usize,
    /// Fixed size threshold in bytes instead of the learned one.
    #[arg(long)]
    static_threshold: Option<u64>,
    /// Control epoch. Defaults to 1000 on UDP and 5 on the in-process
    /// harness, whose runs last tens of virtual milliseconds.
    #[arg(long)]
    epoch_ms: Option<f64>,
    /// Weight of the newest histogram in the moving average.
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args)]
struct WorkloadArgs {
    /// Workload spec file (key = value lines).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Key count when no spec file is given; the default workload is scaled to it.
    #[arg(long, default_value_t = 100_000)]
    keys: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    server: ServerArgs,
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, value_enum, default_value = "inproc")]
    backend: Backend,
    #[arg(long, default_value_t = 9100)]
    port_base: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    /// Seconds to serve over UDP; 0 serves until killed. For the in-process
    /// backend, the length of the generated load.
    #[arg(long)]
    duration: Option<f64>,
    /// Offered load of the in-process backend, requests per second.
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    server: ServerArgs,
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, value_enum, default_value = "inproc")]
    backend: Backend,
    /// Remote UDP server as HOST:PORT_BASE; a local one is started otherwise.
    #[arg(long)]
    target: Option<String>,
    /// Requests per second.
    #[arg(long)]
    rate: Option<f64>,
    /// Run length in seconds, including warm-up and cool-down.
    #[arg(long)]
    duration: Option<f64>,
    /// Client threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Evenly spaced rates LO:HI:STEPS instead of a single rate.
    #[arg(long)]
    sweep: Option<String>,
    /// Also search the highest rate meeting p99 <= M x mean service time, for
    /// each comma-separated M, between the sweep bounds.
    #[arg(long, value_delimiter = ',')]
    slo: Vec<f64>,
    /// Outstanding requests per UDP client thread.
    #[arg(long, default_value_t = 1024)]
    inflight: usize,
}

#[derive(Args)]
struct QsimArgs {
    /// Comma-separated disciplines: NXMGD1, MGN, NXMGD1_WS, SIZE_AWARE or all.
    #[arg(long, value_delimiter = ',', default_value = "NXMGD1")]
    discipline: Vec<String>,
    /// Comma-separated large/small service ratios.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    k: Vec<f64>,
    /// Comma-separated utilizations.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    rho: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0.00125)]
    frac_large: f64,
    /// Requests simulated per point (scientific notation accepted).
    #[arg(long, default_value = "1e7")]
    horizon: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// CSV files to merge.
    inputs: Vec<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
        }
    }
}

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).parse_default_env().init();
    let stamp = format!("# minos {}", std::env::args().skip(1).collect::<Vec<_>>().join(" "));
    let result = match &cli.command {
        Command::Serve(a) => serve(&cli, a, &stamp),
        Command::Bench(a) => bench(&cli, a, &stamp),
        Command::Qsim(a) => qsim(&cli, a, &stamp),
        Command::Report(a) => run_report(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("minos: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) if p != Path::new("-") => std::fs::write(p, text).map_err(runtime(&p.display().to_string())),
        _ => std::io::stdout().write_all(text.as_bytes()).map_err(runtime("stdout")),
    }
}

fn policy_of(args: &ServerArgs) -> Result<Policy, CliError> {
    let p: Policy = args.policy.parse().map_err(CliError::Usage)?;
    Ok(match p {
        Policy::Sho { .. } => Policy::Sho { handoff: args.handoff },
        p => p,
    })
}

fn server_config(args: &ServerArgs, backend: Backend, keys: usize) -> Result<ServerConfig, CliError> {
    let mut cfg = ServerConfig::new(args.cores, policy_of(args)?);
    cfg.batch = args.batch;
    cfg.control.alpha = args.alpha;
    cfg.control.static_threshold = args.static_threshold;
    let epoch_ms = args.epoch_ms.unwrap_or(if backend == Backend::Udp { 1000.0 } else { 5.0 });
    if !(epoch_ms > 0.0) {
        return Err(CliError::Usage("--epoch-ms must be positive".into()));
    }
    if !(args.alpha > 0.0 && args.alpha <= 1.0) {
        return Err(CliError::Usage("--alpha must be in (0, 1]".into()));
    }
    cfg.control.epoch_ns = (epoch_ms * 1e6) as u64;
    cfg.store = StoreConfig::for_keys(args.cores, keys);
    if backend == Backend::Udp {
        cfg.service = ServiceModel::zero();
        cfg.keep_values = true;
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn workload(cli: &Cli, args: &WorkloadArgs) -> Result<WorkloadSpec, CliError> {
    let mut spec = match &args.spec {
        Some(p) => WorkloadSpec::from_file(p).map_err(|e| match e {
            loadgen::SpecError::Io(e) => CliError::Runtime(format!("{}: {e}", p.display())),
            e => CliError::Input(format!("{}: {e}", p.display())),
        })?,
        None => WorkloadSpec::scaled(args.keys),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    Ok(spec)
}

/// Overrides run parameters and picks a warm-up and cool-down of 10% each
/// when the spec's own would not fit the shorter run.
fn adjust_run(spec: &mut WorkloadSpec, rate: Option<f64>, duration: Option<f64>, threads: Option<usize>) -> Result<(), CliError> {
    if let Some(r) = rate {
        spec.rate = r;
    }
    if let Some(t) = threads {
        spec.threads = t;
    }
    if let Some(d) = duration {
        spec.duration_s = d;
        if spec.warmup_s + spec.cooldown_s >= d {
            spec.warmup_s = 0.1 * d;
            spec.cooldown_s = 0.1 * d;
        }
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))
}

fn plan_at(plans: &[(u64, Arc<ShardPlan>)], initial: &Arc<ShardPlan>, t: u64) -> Arc<ShardPlan> {
    plans.iter().take_while(|(pt, _)| *pt <= t).last().map_or_else(|| initial.clone(), |(_, p)| p.clone())
}

/// Per-epoch rows of a finished harness run.
fn harness_rows(h: &Harness, policy: Policy, initial: &Arc<ShardPlan>) -> Vec<String> {
    let mut rows = Vec::new();
    let mut prev: Option<&(u64, Vec<_>)> = None;
    for e in h.epoch_stats() {
        let (t, stats) = e;
        let (t0, before) = match prev {
            Some((t0, s)) => (*t0, s.clone()),
            None => (0, vec![Default::default(); stats.len()]),
        };
        let delta: Vec<_> = stats.iter().zip(&before).map(|(a, b)| a.since(b)).collect();
        // the plan in force during the window is the one published at its start
        rows.extend(epoch_csv_rows(policy, &plan_at(h.plans(), initial, t0), *t, t - t0, &delta));
        prev = Some(e);
    }
    rows
}

/// The keyspace must fit the store's arena before a local server is filled.
fn check_fits(keys: &loadgen::Keyspace, cfg: &ServerConfig) -> Result<(), CliError> {
    let need = keys.footprint_bytes();
    if need > cfg.store.memory_limit {
        return Err(CliError::Usage(format!(
            "{} keys need {} MB of store memory but the limit is {} MB; lower --keys or the spec's total_keys",
            keys.len(),
            need >> 20,
            cfg.store.memory_limit >> 20
        )));
    }
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs, stamp: &str) -> Result<(), CliError> {
    let mut spec = workload(cli, &a.workload)?;
    let cfg = server_config(&a.server, a.backend, spec.total_keys)?;
    match a.backend {
        Backend::Inproc => {
            let duration = a.duration.unwrap_or(0.1);
            adjust_run(&mut spec, a.rate, Some(duration), None)?;
            let setup = InprocSetup::new(spec.clone(), cfg.clone());
            check_fits(&setup.keys, &cfg)?;
            let rate = match a.rate {
                Some(r) => r,
                None => {
                    let mean = setup.generator().mean_service_ns(&cfg.service, cfg.mtu_payload, 100_000, spec.seed);
                    0.7 * cfg.cores as f64 * 1e9 / mean
                }
            };
            let server = setup.build_server();
            let initial = server.plan();
            let mut h = Harness::new(server);
            let r = loadgen::run_inproc_on(&setup, &mut h, rate, 0);
            info!("served {} of {} requests, p99 {} ns", r.completed, r.sent, r.p99());
            let mut text = format!("{stamp}\n# seed={} rate={rate:.0}\n{EPOCH_CSV_HEADER}\n", spec.seed);
            for row in harness_rows(&h, cfg.policy, &initial) {
                let _ = writeln!(text, "{row}");
            }
            write_out(cli.out.as_deref(), &text)
        }
        Backend::Udp => {
            let keys = build_keyspace(&spec, spec.seed);
            check_fits(&keys, &cfg)?;
            let server = Arc::new(Server::new(cfg).map_err(CliError::Usage)?);
            keys.populate(&server).map_err(runtime("populate"))?;
            let udp = UdpServer::start(server, a.bind, a.port_base).map_err(runtime("bind"))?;
            eprintln!("serving {} RX queues on {}..{}", a.server.cores, udp.addrs()[0], udp.addrs()[a.server.cores - 1]);
            let mut out: Box<dyn std::io::Write> = match cli.out.as_deref() {
                Some(p) if p != Path::new("-") => {
                    Box::new(std::fs::File::create(p).map_err(runtime(&p.display().to_string()))?)
                }
                _ => Box::new(std::io::stdout()),
            };
            writeln!(out, "{stamp}\n# seed={}\n{EPOCH_CSV_HEADER}", spec.seed).map_err(runtime("write"))?;
            let start = Instant::now();
            let mut written = 0;
            let limit = a.duration.filter(|&d| d > 0.0).map(Duration::from_secs_f64);
            while limit.is_none_or(|l| start.elapsed() < l) {
                std::thread::sleep(Duration::from_millis(100));
                let rows = udp.epoch_rows();
                for r in &rows[written..] {
                    writeln!(out, "{r}").map_err(runtime("write"))?;
                }
                out.flush().map_err(runtime("write"))?;
                written = rows.len();
            }
            if udp.dropped() > 0 {
                eprintln!("dropped {} malformed datagrams", udp.dropped());
            }
            udp.shutdown();
            Ok(())
        }
    }
}

fn parse_sweep(s: &str) -> Result<(f64, f64, usize), CliError> {
    let bad = || CliError::Usage(format!("--sweep {s:?} must be LO:HI:STEPS with 0 < LO <= HI"));
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts[..] else { return Err(bad()) };
    let (lo, hi, n) = (
        lo.parse::<f64>().map_err(|_| bad())?,
        hi.parse::<f64>().map_err(|_| bad())?,
        n.parse::<usize>().map_err(|_| bad())?,
    );
    if !(lo > 0.0 && lo <= hi && n >= 1) {
        return Err(bad());
    }
    Ok((lo, hi, n))
}

fn bench(cli: &Cli, a: &BenchArgs, stamp: &str) -> Result<(), CliError> {
    let mut spec = workload(cli, &a.workload)?;
    adjust_run(&mut spec, a.rate, a.duration, a.threads)?;
    let cfg = server_config(&a.server, a.backend, spec.total_keys)?;
    let policy = cfg.policy;
    let rates: Vec<f64> = match &a.sweep {
        Some(s) => {
            let (lo, hi, n) = parse_sweep(s)?;
            (0..n).map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
        }
        None => vec![spec.rate],
    };
    if !a.slo.is_empty() && a.sweep.is_none() {
        return Err(CliError::Usage("--slo needs --sweep bounds to search between".into()));
    }
    if a.slo.iter().any(|&m| !(m > 0.0)) {
        return Err(CliError::Usage("--slo multiples must be positive".into()));
    }
    let setup = InprocSetup::new(spec.clone(), cfg.clone());
    let keys = setup.keys.clone();
    if a.target.is_none() {
        check_fits(&keys, &cfg)?;
    }

    // UDP: a local server unless a target is given
    let local;
    let addrs: Vec<SocketAddr> = match (a.backend, &a.target) {
        (Backend::Inproc, _) => Vec::new(),
        (Backend::Udp, Some(t)) => {
            let (host, port) = t
                .rsplit_once(':')
                .ok_or_else(|| CliError::Usage(format!("--target {t:?} must be HOST:PORT_BASE")))?;
            let ip: IpAddr = host.parse().map_err(|_| CliError::Usage(format!("bad target host {host:?}")))?;
            let base: u16 = port.parse().map_err(|_| CliError::Usage(format!("bad target port {port:?}")))?;
            (0..cfg.cores).map(|q| SocketAddr::new(ip, minos_core::protocol::rx_port(base, q))).collect()
        }
        (Backend::Udp, None) => {
            let server = Arc::new(Server::new(cfg.clone()).map_err(CliError::Usage)?);
            keys.populate(&server).map_err(runtime("populate"))?;
            local = UdpServer::start(server, IpAddr::from([127, 0, 0, 1]), 0).map_err(runtime("bind"))?;
            local.addrs().to_vec()
        }
    };
    let run_one = |rate: f64| -> Result<RunResult, CliError> {
        let r = match a.backend {
            Backend::Inproc => loadgen::run_inproc(&setup, rate).0,
            Backend::Udp => {
                let s = WorkloadSpec { rate, ..spec.clone() };
                loadgen::run_udp(&s, keys.clone(), policy, &addrs, a.inflight, Duration::from_secs(2))
                    .map_err(runtime("udp run"))?
            }
        };
        info!("{policy} rate {rate:.0}: p99 {} ns, valid {}", r.p99(), r.is_valid());
        Ok(r)
    };

    let mut text = format!("{stamp}\n# seed={}\n{RUN_CSV_HEADER}\n", spec.seed);
    for &rate in &rates {
        let _ = writeln!(text, "{}", run_one(rate)?.csv_row(&policy.to_string()));
    }
    if !a.slo.is_empty() {
        let model = if a.backend == Backend::Udp { ServiceModel::default() } else { cfg.service };
        let mean = setup.generator().mean_service_ns(&model, cfg.mtu_payload, 200_000, spec.seed);
        let slos: Vec<f64> = a.slo.iter().map(|m| m * mean).collect();
        let mut failure = None;
        let (results, curve) = sweep_slo(
            |rate| match run_one(rate) {
                Ok(r) => r,
                Err(e) => {
                    failure.get_or_insert(e);
                    RunResult { lost: 1, ..empty_result(rate) }
                }
            },
            &slos,
            rates[0],
            rates[rates.len() - 1],
            8,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let _ = writeln!(text, "\n{CURVE_CSV_HEADER}");
        for p in &curve {
            let _ = writeln!(text, "{policy},{:.0},{},{}", p.rate, p.p99_ns, p.valid as u8);
        }
        let _ = writeln!(text, "\npolicy,slo_multiple,slo_ns,max_rate");
        for (m, r) in a.slo.iter().zip(&results) {
            let _ = writeln!(text, "{policy},{m},{:.0},{:.0}", r.slo_ns, r.max_rate);
        }
    }
    write_out(cli.out.as_deref(), &text)
}

fn empty_result(rate: f64) -> RunResult {
    RunResult {
        offered_rate: rate,
        sent: 0,
        completed: 0,
        lost: 0,
        window_arrival_rate: 0.0,
        window_completion_rate: 0.0,
        latency: loadgen::LatencyRecorder::unbounded(),
        latency_large: loadgen::LatencyRecorder::unbounded(),
        latency_small: loadgen::LatencyRecorder::unbounded(),
        core_stats: Vec::new(),
    }
}

fn qsim(cli: &Cli, a: &QsimArgs, stamp: &str) -> Result<(), CliError> {
    let mut disciplines = Vec::new();
    for d in &a.discipline {
        if d.eq_ignore_ascii_case("all") {
            disciplines.extend(Discipline::ALL);
        } else {
            disciplines.push(d.parse::<Discipline>().map_err(|e| CliError::Usage(e.to_string()))?);
        }
    }
    if !(a.horizon >= 1.0 && a.horizon <= u64::MAX as f64) {
        return Err(CliError::Usage(format!("--horizon {} must be at least 1", a.horizon)));
    }
    let base = SimConfig {
        n_cores: a.n,
        frac_large: a.frac_large,
        horizon: a.horizon as u64,
        seed: cli.seed.unwrap_or(1),
        ..SimConfig::default()
    };
    let rows = minos_qsim::sweep(&base, &disciplines, &a.rho, &a.k).map_err(|e| match e {
        minos_qsim::SimError::UnstableConfig(_) | minos_qsim::SimError::Invalid(_) => CliError::Usage(e.to_string()),
    })?;
    let text = format!("{stamp}\n# seed={}\n{}", base.seed, minos_qsim::sweep_csv(&rows));
    write_out(cli.out.as_deref(), &text)
}

fn run_report(cli: &Cli, a: &ReportArgs) -> Result<(), CliError> {
    let mut tables = report::load(&a.inputs).map_err(|e| match e {
        report::ReportError::Io { .. } => CliError::Runtime(e.to_string()),
        report::ReportError::Malformed { .. } => CliError::Input(e.to_string()),
    })?;
    write_out(cli.out.as_deref(), &report::render(&mut tables))
}
