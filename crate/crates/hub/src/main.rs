//! `xri-hub`: run the hub, its device emulators, scripted demos and metrics.
//!
//! Settings resolve as command-line flag, then `XRI_*` environment variable,
//! then the scenario's `[run]` table, then built-in defaults.
//!
//! Exit codes: 0 success, 1 demo assertion failed, 2 configuration or input
//! error, 3 runtime error (I/O, port in use).

mod emulators;
mod server;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tokio::net::TcpListener;
use tracing::{error, info, warn};
use xri_core::config::{ConfigError, ScenarioConfig};
use xri_core::metrics::{read_log_csv, summarize, write_summary_csv, MetricsError, MetricsSummary};
use xri_core::script::{run_demo, DemoScript, ScriptError};
use xri_core::world::{write_coherence_csv, write_log_csv, World};

use crate::emulators::{Clock, Emulators};
use crate::server::{addr_url, hub_router, serve_http, serve_tcp, tick_loop, Hub, HttpDevices};

#[derive(Parser)]
#[command(name = "xri-hub", version, about = "Keeps virtual and physical objects in sync")]
struct Cli {
    /// Log filter, e.g. `info` or `xri_hub=debug`.
    #[arg(long, global = true, env = "XRI_LOG", default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the hub with a scenario, spawning device emulators.
    Serve(ServeArgs),
    /// Replay a demo script headless and check its expectations.
    Demo(DemoArgs),
    /// Summarize an event log.
    Metrics(MetricsArgs),
    /// Run only the device emulators of a scenario.
    SimDevices(SimArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "XRI_SCENARIO")]
    scenario: PathBuf,
    /// WebSocket/HTTP listen address [default: 127.0.0.1:8080].
    #[arg(long, env = "XRI_LISTEN")]
    listen: Option<SocketAddr>,
    /// Line-delimited TCP listen address [default: 127.0.0.1:8090].
    #[arg(long, env = "XRI_TCP_LISTEN")]
    tcp_listen: Option<SocketAddr>,
    /// Bridge emulator port [default: 8081].
    #[arg(long, env = "XRI_BRIDGE_PORT")]
    bridge_port: Option<u16>,
    /// First plug emulator port [default: 8082].
    #[arg(long, env = "XRI_PLUG_PORT")]
    plug_port: Option<u16>,
    /// Overrides the scenario tick rate.
    #[arg(long, env = "XRI_TICK_HZ")]
    tick_hz: Option<f64>,
    #[arg(long, env = "XRI_SEED")]
    seed: Option<u64>,
    /// Demo-format script of timed faults and updates to inject.
    #[arg(long, env = "XRI_FAULTS")]
    faults: Option<PathBuf>,
    /// Event log written on shutdown.
    #[arg(long, env = "XRI_METRICS")]
    metrics: Option<PathBuf>,
    /// Talk to the endpoints in the scenario instead of spawning emulators.
    #[arg(long)]
    attach: bool,
}

#[derive(Args)]
struct DemoArgs {
    script: PathBuf,
    /// Overrides the script's scenario.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, env = "XRI_SEED")]
    seed: Option<u64>,
    /// Directory for `<name>-events.csv` and `<name>-coherence.csv`.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args)]
struct MetricsArgs {
    log: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, env = "XRI_SCENARIO")]
    scenario: PathBuf,
    #[arg(long, env = "XRI_BRIDGE_PORT")]
    bridge_port: Option<u16>,
    #[arg(long, env = "XRI_PLUG_PORT")]
    plug_port: Option<u16>,
    /// Hub base URL for button events; defaults to each plug's `callback`.
    #[arg(long, env = "XRI_CALLBACK")]
    callback: Option<String>,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

trait Exit<T> {
    fn exit(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Exit<T> for Result<T, E> {
    fn exit(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, err: e.into() })
    }
}

const ASSERTION: u8 = 1;
const CONFIG: u8 = 2;
const RUNTIME: u8 = 3;

fn config_code(e: &ConfigError) -> u8 {
    match e {
        ConfigError::Io { .. } => RUNTIME,
        _ => CONFIG,
    }
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig, Failure> {
    ScenarioConfig::load(path).map_err(|e| Failure {
        code: config_code(&e),
        err: e.into(),
    })
}

fn apply_tick_hz(cfg: &mut ScenarioConfig, hz: f64) -> Result<(), Failure> {
    if !(hz.is_finite() && hz > 0.0) || (1000.0 / hz).round() < 1.0 {
        return Err(anyhow!("tick rate must be > 0 and at most 1000 Hz")).exit(CONFIG);
    }
    cfg.tick_ms = (1000.0 / hz).round() as u64;
    Ok(())
}

/// Resolved settings of `serve`.
struct RunConfig {
    scenario: ScenarioConfig,
    listen: SocketAddr,
    tcp_listen: SocketAddr,
    bridge_port: u16,
    plug_port: u16,
    seed: u64,
    faults: Option<DemoScript>,
    metrics: Option<PathBuf>,
    attach: bool,
}

fn resolve(args: ServeArgs) -> Result<RunConfig, Failure> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(hz) = args.tick_hz {
        apply_tick_hz(&mut scenario, hz)?;
    }
    let file = scenario.run.clone();
    let parse_addr = |s: Option<String>, what: &str| -> Result<Option<SocketAddr>, Failure> {
        s.map(|s| s.parse().with_context(|| format!("[run] {what}: bad address {s:?}")))
            .transpose()
            .exit(CONFIG)
    };
    let listen = match args.listen {
        Some(a) => a,
        None => parse_addr(file.listen, "listen")?.unwrap_or_else(|| "127.0.0.1:8080".parse().unwrap()),
    };
    let tcp_listen = match args.tcp_listen {
        Some(a) => a,
        None => parse_addr(file.tcp_listen, "tcp_listen")?.unwrap_or_else(|| "127.0.0.1:8090".parse().unwrap()),
    };
    let bridge_port = args.bridge_port.or(file.bridge_port).unwrap_or(8081);
    let plug_port = args.plug_port.or(file.plug_port).unwrap_or(8082);
    let plugs = scenario
        .devices
        .iter()
        .filter(|d| d.kind == xri_core::device::DeviceKind::Plug)
        .count() as u16;

    let mut used = BTreeSet::new();
    let mut ports = vec![listen.port(), tcp_listen.port()];
    if !args.attach {
        if scenario.devices.iter().any(|d| d.kind == xri_core::device::DeviceKind::ColorBulb) {
            ports.push(bridge_port);
        }
        ports.extend((0..plugs).map(|i| if plug_port == 0 { 0 } else { plug_port + i }));
    }
    for p in ports.into_iter().filter(|p| *p != 0) {
        if !used.insert(p) {
            return Err(anyhow!("port {p} is assigned twice; ports must be distinct")).exit(CONFIG);
        }
    }

    let faults = match args.faults {
        Some(p) => Some(DemoScript::load(&p).map_err(|e| Failure {
            code: script_code(&e),
            err: e.into(),
        })?),
        None => None,
    };
    Ok(RunConfig {
        scenario,
        listen,
        tcp_listen,
        bridge_port,
        plug_port,
        seed: args.seed.or(file.seed).unwrap_or(0),
        faults,
        metrics: args.metrics.or(file.metrics.map(PathBuf::from)),
        attach: args.attach,
    })
}

fn script_code(e: &ScriptError) -> u8 {
    match e {
        ScriptError::Io { .. } => RUNTIME,
        ScriptError::Config(c) => config_code(c),
        _ => CONFIG,
    }
}

fn write_events(path: &Path, world: &World) -> Result<(), Failure> {
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display())).exit(RUNTIME)?;
    write_log_csv(BufWriter::new(f), world.log()).exit(RUNTIME)
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let rc = resolve(args)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .exit(RUNTIME)?;
    rt.block_on(async move {
        let http = TcpListener::bind(rc.listen)
            .await
            .with_context(|| format!("cannot listen on {}", rc.listen))
            .exit(RUNTIME)?;
        let tcp = TcpListener::bind(rc.tcp_listen)
            .await
            .with_context(|| format!("cannot listen on {}", rc.tcp_listen))
            .exit(RUNTIME)?;
        let hub_addr = http.local_addr().exit(RUNTIME)?;
        let tcp_addr = tcp.local_addr().exit(RUNTIME)?;
        let callback = addr_url(hub_addr);

        let clock = Clock::start();
        let mut cfg = rc.scenario;
        let emus = if rc.attach {
            None
        } else {
            let e = Emulators::spawn(&cfg, rc.listen.ip(), rc.bridge_port, rc.plug_port, Some(&callback), clock)
                .await
                .exit(RUNTIME)?;
            e.rewrite_endpoints(&mut cfg, &callback);
            Some(Arc::new(e))
        };
        let agents: Vec<String> = cfg.agents.iter().map(|a| a.id.clone()).collect();
        let name = cfg.name.clone();
        let tick_ms = cfg.tick_ms;
        let world = World::new(cfg, rc.seed).exit(CONFIG)?;
        let hub = Arc::new(Mutex::new(Hub::new(world)));

        tokio::spawn(serve_http(hub_router(hub.clone()), http));
        tokio::spawn(serve_tcp(hub.clone(), tcp));
        info!(scenario = %name, %hub_addr, %tcp_addr, tick_ms, ?agents, "hub listening");
        println!("hub listening on ws://{hub_addr}/ws (tcp {tcp_addr})");

        let stop = Arc::new(AtomicBool::new(false));
        let ticker = {
            let (hub, stop, emus) = (hub.clone(), stop.clone(), emus.clone());
            let faults = rc.faults;
            // The blocking HTTP client must be built outside the async runtime.
            std::thread::spawn(move || -> anyhow::Result<()> {
                let devices = HttpDevices::new()?;
                tick_loop(hub, devices, stop, faults, emus, clock);
                Ok(())
            })
        };

        tokio::signal::ctrl_c().await.exit(RUNTIME)?;
        info!("shutting down");
        stop.store(true, Ordering::SeqCst);
        tokio::task::spawn_blocking(move || ticker.join())
            .await
            .exit(RUNTIME)?
            .map_err(|_| anyhow!("tick thread panicked"))
            .exit(RUNTIME)?
            .exit(RUNTIME)?;

        let h = hub.lock().unwrap();
        if let Some(path) = &rc.metrics {
            write_events(path, &h.world)?;
            info!(path = %path.display(), "event log written");
        }
        match summarize(h.world.log()) {
            Ok(s) => print_summary(&s),
            Err(e) => warn!("no metrics: {e}"),
        }
        Ok(())
    })
}

fn demo(args: DemoArgs) -> Result<(), Failure> {
    let mut script = DemoScript::load(&args.script).map_err(|e| Failure {
        code: script_code(&e),
        err: e.into(),
    })?;
    if let Some(seed) = args.seed {
        script.seed = seed;
    }
    let scenario = args
        .scenario
        .or(script.scenario.clone())
        .ok_or_else(|| anyhow!("{}: script names no scenario", args.script.display()))
        .exit(CONFIG)?;
    let cfg = load_scenario(&scenario)?;
    let run = run_demo(&script, cfg).map_err(|e| Failure {
        code: script_code(&e),
        err: e.into(),
    })?;

    let stem = args
        .script
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("demo")
        .to_string();
    std::fs::create_dir_all(&args.out_dir).exit(RUNTIME)?;
    let events = args.out_dir.join(format!("{stem}-events.csv"));
    let coherence = args.out_dir.join(format!("{stem}-coherence.csv"));
    write_events(&events, &run.world)?;
    let f = File::create(&coherence).exit(RUNTIME)?;
    write_coherence_csv(BufWriter::new(f), &run.reports).exit(RUNTIME)?;

    for o in &run.outcomes {
        let mark = if o.passed { "ok  " } else { "FAIL" };
        println!("{mark} {}:{} at {} ms: {} ({})", args.script.display(), o.line, o.at_ms, o.text, o.detail);
    }
    for r in &run.reports {
        println!("coherence {}: noise {:.4}, {} ms incoherent", r.link_id, r.noise_score, r.incoherent_ms());
    }
    println!("wrote {} and {}", events.display(), coherence.display());
    match run.outcomes.iter().find(|o| !o.passed) {
        Some(o) => Err(anyhow!(
            "{}:{}: expectation failed: {} ({})",
            args.script.display(),
            o.line,
            o.text,
            o.detail
        ))
        .exit(ASSERTION),
        None => Ok(()),
    }
}

fn print_summary(s: &MetricsSummary) {
    println!("tick {} ms, grace {} ms", s.tick_ms, s.grace_ms);
    let opt = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    for l in &s.links {
        println!(
            "{}: noise {:.4} ({}/{} samples incoherent), latency p50 {} ms p95 {} ms, commands device {} scene {}, failed deliveries {}, unconverged {}",
            l.link,
            l.noise_score,
            l.incoherent_samples,
            l.samples,
            opt(l.latency_p50_ms),
            opt(l.latency_p95_ms),
            l.device_commands,
            l.scene_commands,
            l.failed_deliveries,
            l.unconverged,
        );
    }
}

fn metrics(args: MetricsArgs) -> Result<(), Failure> {
    let f = File::open(&args.log)
        .with_context(|| format!("cannot open {}", args.log.display()))
        .exit(RUNTIME)?;
    let records = read_log_csv(f).map_err(|e| {
        let code = match e {
            MetricsError::Csv(ref c) if c.is_io_error() => RUNTIME,
            _ => CONFIG,
        };
        Failure {
            code,
            err: anyhow::Error::new(e).context(args.log.display().to_string()),
        }
    })?;
    let s = summarize(&records)
        .with_context(|| args.log.display().to_string())
        .exit(CONFIG)?;
    match args.format {
        Format::Text => print_summary(&s),
        Format::Csv => write_summary_csv(std::io::stdout().lock(), &s).exit(RUNTIME)?,
    }
    Ok(())
}

fn sim_devices(args: SimArgs) -> Result<(), Failure> {
    let cfg = load_scenario(&args.scenario)?;
    let rt = tokio::runtime::Runtime::new().exit(RUNTIME)?;
    rt.block_on(async move {
        let bridge_port = args.bridge_port.or(cfg.run.bridge_port).unwrap_or(8081);
        let plug_port = args.plug_port.or(cfg.run.plug_port).unwrap_or(8082);
        let emus = Emulators::spawn(&cfg, args.host, bridge_port, plug_port, args.callback.as_deref(), Clock::start())
            .await
            .exit(RUNTIME)?;
        if let Some(a) = emus.bridge_addr {
            println!("bridge on http://{a}/api/{}", cfg.bridge_user);
        }
        for (id, a) in &emus.plug_addrs {
            println!("plug {id} on http://{a}");
        }
        tokio::signal::ctrl_c().await.exit(RUNTIME)?;
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| "info".into());
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.cmd {
        Cmd::Serve(a) => serve(a),
        Cmd::Demo(a) => demo(a),
        Cmd::Metrics(a) => metrics(a),
        Cmd::SimDevices(a) => sim_devices(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{:#}", f.err);
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
