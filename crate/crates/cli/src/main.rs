use std::fmt;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use hivescale::analysis::{self, consumption_rate, render_svg, TrajectoryOptions};
use hivescale::hub::{Hub, HubConfig};
use hivescale::node::{AdcMode, Calibration, LoadCellBank, LoadHandle, NodeConfig, SensorNode};
use hivescale::physics::{decompose_forces, ForceQuad, PlatformGeometry};
use hivescale::pipeline::{run_experiment, write_atomic, RunConfig, RunError, DEFAULT_HARDWARE_OFFSETS};
use hivescale::scenario::{builtin_winter, load_scenario, serialize_scenario, Scenario};
use hivescale::store::{export_csv, parse_csv, Record, Store};
use hivescale::transport::tcp::{serve, TcpPublisher};
use hivescale::transport::{Broker, FaultConfig, Publisher, TopicFilter, DEFAULT_REORDER_WINDOW};
use serde::de::DeserializeOwned;

const BUILTIN_WINTER: &str = "builtin-winter";

#[derive(Parser)]
#[command(name = "hivescale", version, about = "Hive weighing platform simulator and telemetry pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario end to end in one process.
    Run(RunArgs),
    /// Simulated sensor node publishing to a hub over TCP.
    Node(NodeArgs),
    /// Networked hub: accept node connections and persist records.
    Hub(HubArgs),
    /// Export stored records as CSV.
    Export(ExportArgs),
    /// Render the center-of-mass trajectory as SVG.
    Plot(PlotArgs),
    /// Print daily consumption estimates.
    Consumption(ConsumptionArgs),
    /// Scenario file utilities.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file, or `builtin-winter`.
    #[arg(long, default_value = BUILTIN_WINTER)]
    scenario: String,
    /// Per-sample load cell noise in grams; 0 turns noise off.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    duplicate_rate: f64,
    #[arg(long, default_value_t = 0)]
    reorder_window: usize,
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    #[arg(long, default_value = "store")]
    store_dir: PathBuf,
    #[arg(long, default_value = "trajectory.csv")]
    out_csv: PathBuf,
    #[arg(long, default_value = "trajectory.svg")]
    out_svg: PathBuf,
    #[arg(long, default_value = "hive-1")]
    hive_id: String,
    /// Unrounded converter output.
    #[arg(long)]
    ideal_adc: bool,
    #[command(flatten)]
    trajectory: TrajectoryArgs,
}

#[derive(Args, Clone, Copy)]
struct TrajectoryArgs {
    /// Centered moving-average window over trajectory points.
    #[arg(long, default_value_t = 1)]
    smoothing: usize,
    /// Plot positions relative to the first point.
    #[arg(long)]
    relative: bool,
}

impl From<TrajectoryArgs> for TrajectoryOptions {
    fn from(a: TrajectoryArgs) -> Self {
        TrajectoryOptions {
            smoothing: a.smoothing,
            relative_to_first: a.relative,
        }
    }
}

#[derive(Args)]
struct NodeArgs {
    /// Node config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hub address, overrides `publish_target`.
    #[arg(long)]
    connect: Option<String>,
    #[arg(long, default_value = BUILTIN_WINTER)]
    scenario: String,
    #[arg(long)]
    hive_id: Option<String>,
}

#[derive(Args)]
struct HubArgs {
    /// Hub config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    store_dir: Option<PathBuf>,
    /// Stop after this long without new messages.
    #[arg(long)]
    idle_timeout_ms: Option<u64>,
    /// Where to write the final counters; stdout if absent.
    #[arg(long)]
    status_file: Option<PathBuf>,
}

#[derive(Args)]
struct SourceArgs {
    /// CSV written by `export` or `run`.
    #[arg(long, conflicts_with = "store_dir")]
    csv: Option<PathBuf>,
    #[arg(long)]
    store_dir: Option<PathBuf>,
    #[arg(long, default_value = "hive-1")]
    hive_id: String,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    store_dir: PathBuf,
    #[arg(long, default_value = "hive-1")]
    hive_id: String,
    #[arg(long)]
    from_ms: Option<u64>,
    #[arg(long)]
    to_ms: Option<u64>,
    /// Output file; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value = "trajectory.svg")]
    out: PathBuf,
    #[arg(long, default_value_t = 500.0)]
    n_mm: f64,
    #[arg(long, default_value_t = 400.0)]
    m_mm: f64,
    #[command(flatten)]
    trajectory: TrajectoryArgs,
}

#[derive(Args)]
struct ConsumptionArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = analysis::DEFAULT_CONSUMPTION_WINDOW_DAYS)]
    window_days: usize,
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Check a scenario file.
    Validate { path: PathBuf },
    /// Write the built-in winter scenario as JSON.
    DumpBuiltin {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failure reported as one `error kind=... msg="..."` line.
struct CliError {
    kind: &'static str,
    msg: String,
    config: bool,
}

impl CliError {
    fn config(msg: impl fmt::Display) -> Self {
        Self {
            kind: "config",
            msg: msg.to_string(),
            config: true,
        }
    }

    fn runtime(kind: &'static str, msg: impl fmt::Display) -> Self {
        Self {
            kind,
            msg: msg.to_string(),
            config: false,
        }
    }

    fn exit_code(&self) -> u8 {
        if self.config {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error kind={} msg={:?}", self.kind, self.msg)
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        if e.is_config() {
            CliError::config(e)
        } else {
            CliError::runtime(e.kind(), e)
        }
    }
}

type CliResult = Result<(), CliError>;

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| CliError::config(format!("{}: {e}", p.display()))),
    }
}

fn scenario_from(arg: &str) -> Result<Scenario, CliError> {
    if arg == BUILTIN_WINTER {
        return Ok(builtin_winter());
    }
    load_scenario(&read_text(Path::new(arg))?).map_err(|e| CliError::config(format!("{arg}: {e}")))
}

fn write_output(path: &Path, contents: &str) -> CliResult {
    write_atomic(path, contents.as_bytes()).map_err(CliError::from)
}

fn cmd_run(a: RunArgs) -> CliResult {
    let mut cfg = RunConfig::new(scenario_from(&a.scenario)?, a.store_dir);
    cfg.hive_id = a.hive_id;
    cfg.noise_sigma_g = a.noise_sigma;
    cfg.seed = a.seed;
    cfg.adc_mode = if a.ideal_adc { AdcMode::Ideal } else { AdcMode::Quantized };
    cfg.faults = FaultConfig {
        duplicate_rate: a.duplicate_rate,
        reorder_window: a.reorder_window,
        drop_rate: a.drop_rate,
        seed: a.seed,
    };
    cfg.hub_reorder_window = Some(a.reorder_window.max(DEFAULT_REORDER_WINDOW));
    cfg.out_csv = Some(a.out_csv);
    cfg.out_svg = Some(a.out_svg);
    cfg.trajectory = a.trajectory.into();
    let out = run_experiment(&cfg)?;
    println!("{}", out.summary);
    if !out.summary.is_complete() {
        return Err(CliError::runtime(
            "incomplete",
            format!("{} of {} steps persisted", out.summary.records, out.summary.steps),
        ));
    }
    Ok(())
}

fn cmd_node(a: NodeArgs) -> CliResult {
    let mut cfg: NodeConfig = read_toml(a.config.as_deref())?;
    if let Some(c) = a.connect {
        cfg.publish_target = Some(c);
    }
    if let Some(h) = a.hive_id {
        cfg.hive_id = h;
    }
    cfg.validate().map_err(CliError::config)?;
    let target = cfg
        .publish_target
        .clone()
        .ok_or_else(|| CliError::config("no hub address: set publish_target or pass --connect"))?;
    let scenario = scenario_from(&a.scenario)?;
    let snapshots = scenario.replay().map_err(CliError::config)?;

    let node_err = |e: hivescale::node::NodeError| CliError::runtime("node", e);
    let load = LoadHandle::new(ForceQuad::ZERO);
    let hardware = Calibration::new(cfg.scale_counts_per_g, DEFAULT_HARDWARE_OFFSETS).map_err(CliError::config)?;
    let mut bank = LoadCellBank::new(load.clone(), hardware, cfg.noise(), cfg.adc_mode).map_err(CliError::config)?;
    let zero = Calibration::new(cfg.scale_counts_per_g, [0; 4]).map_err(CliError::config)?;
    let mut node = SensorNode::new(&cfg, zero).map_err(CliError::config)?;
    let publisher = TcpPublisher::new(target.as_str()).map_err(CliError::config)?;
    node.tare(&mut bank).map_err(node_err)?;
    for snap in &snapshots {
        let forces = decompose_forces(&snap.state.items(), &scenario.geometry).map_err(|e| CliError::runtime("physics", e))?;
        load.set(forces);
        node.publish_cycle(&mut bank, &publisher, snap.ts_ms).map_err(node_err)?;
    }
    let d = node.diagnostics();
    println!(
        "published={} dropped={} retries={} saturated_samples={}",
        d.published, d.dropped, d.retries, d.saturated_samples
    );
    if d.dropped > 0 {
        return Err(CliError::runtime("dropped", format!("{} messages dropped", d.dropped)));
    }
    Ok(())
}

fn cmd_hub(a: HubArgs) -> CliResult {
    let mut cfg: HubConfig = read_toml(a.config.as_deref())?;
    if let Some(l) = a.listen {
        cfg.listen = Some(l);
    }
    if let Some(d) = a.store_dir {
        cfg.store_dir = d;
    }
    let listen = cfg
        .listen
        .clone()
        .ok_or_else(|| CliError::config("no listen address: set listen or pass --listen"))?;
    let filter = TopicFilter::parse(&cfg.topic_filter).map_err(CliError::config)?;
    let hub = Hub::new(cfg).map_err(|e| match e {
        hivescale::hub::HubError::Store(e) => CliError::runtime("store", e),
        e => CliError::config(e),
    })?;
    let listener = TcpListener::bind(&listen).map_err(|e| CliError::config(format!("bind {listen}: {e}")))?;
    let local = listener.local_addr().map_err(|e| CliError::runtime("io", e))?;
    println!("listening on {local}");
    let _ = std::io::stdout().flush();

    let broker = Arc::new(Broker::reliable());
    let sub = broker.subscribe(filter).map_err(|e| CliError::runtime("transport", e))?;
    let stop = Arc::new(AtomicBool::new(false));
    let status = thread::scope(|s| {
        let hub_thread = s.spawn(|| hub.run(sub));
        let server = {
            let sink: Arc<dyn Publisher> = broker.clone();
            let stop = Arc::clone(&stop);
            s.spawn(move || serve(listener, sink, stop))
        };
        if let Some(idle) = a.idle_timeout_ms.map(Duration::from_millis) {
            let mut seen = broker.stats().publish_attempts;
            let mut last = Instant::now();
            while last.elapsed() < idle {
                thread::sleep(Duration::from_millis(20));
                let now = broker.stats().publish_attempts;
                if now != seen {
                    seen = now;
                    last = Instant::now();
                }
            }
            stop.store(true, Ordering::Relaxed);
        }
        let served = server.join().expect("server thread panicked");
        broker.close();
        let status = hub_thread.join().expect("hub thread panicked");
        served.map(|()| status)
    })
    .map_err(|e| CliError::runtime("transport", e))?;

    let text = status.to_text();
    match a.status_file {
        Some(p) => write_output(&p, &text)?,
        None => print!("{text}"),
    }
    if !status.dead_letters.is_empty() {
        return Err(CliError::runtime(
            "dead_letter",
            format!("{} messages could not be stored", status.dead_letters.len()),
        ));
    }
    Ok(())
}

fn load_records(src: &SourceArgs) -> Result<Vec<Record>, CliError> {
    let records = match (&src.csv, &src.store_dir) {
        (Some(p), _) => parse_csv(&read_text(p)?).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
        (None, Some(dir)) => {
            let store = Store::open(dir).map_err(|e| CliError::runtime("store", e))?;
            store.read_all(&src.hive_id).map_err(|e| CliError::runtime("store", e))?
        }
        (None, None) => return Err(CliError::config("pass --csv or --store-dir")),
    };
    Ok(records.into_iter().filter(|r| r.hive_id == src.hive_id).collect())
}

fn cmd_export(a: ExportArgs) -> CliResult {
    let store = Store::open(&a.store_dir).map_err(|e| CliError::runtime("store", e))?;
    let records = match (a.from_ms, a.to_ms) {
        (None, None) => store.read_all(&a.hive_id),
        (from, to) => store.query_range(&a.hive_id, from.unwrap_or(0), to.unwrap_or(u64::MAX)),
    }
    .map_err(|e| match e {
        hivescale::store::StoreError::InvalidRange { .. } => CliError::config(e),
        e => CliError::runtime("store", e),
    })?;
    let csv = export_csv(&records);
    match a.out {
        Some(p) => write_output(&p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_plot(a: PlotArgs) -> CliResult {
    let geometry = PlatformGeometry::new(a.n_mm, a.m_mm).map_err(CliError::config)?;
    let records = load_records(&a.source)?;
    let analysis_err = |e: analysis::AnalysisError| CliError::runtime("analysis", e);
    let traj = analysis::trajectory(&records, geometry, a.trajectory.into()).map_err(analysis_err)?;
    let svg = render_svg(&traj, &geometry).map_err(analysis_err)?;
    write_output(&a.out, &svg)?;
    println!("points={} out={}", traj.points.len(), a.out.display());
    Ok(())
}

fn cmd_consumption(a: ConsumptionArgs) -> CliResult {
    let records = load_records(&a.source)?;
    let series = consumption_rate(&records, a.window_days).map_err(|e| CliError::runtime("analysis", e))?;
    println!("day,grams_per_day");
    for r in &series.rates {
        println!("{},{:.3}", r.day_index, r.grams_per_day);
    }
    Ok(())
}

fn cmd_scenario(c: ScenarioCommand) -> CliResult {
    match c {
        ScenarioCommand::Validate { path } => {
            let s = scenario_from(&path.to_string_lossy())?;
            println!(
                "ok name={} steps={} days={} strips_removed={}",
                s.name,
                s.steps.len(),
                s.total_days(),
                s.total_strips_removed()
            );
            Ok(())
        }
        ScenarioCommand::DumpBuiltin { out } => {
            let text = serialize_scenario(&builtin_winter());
            match out {
                Some(p) => write_output(&p, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("{}", CliError::config(first));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Node(a) => cmd_node(a),
        Command::Hub(a) => cmd_hub(a),
        Command::Export(a) => cmd_export(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Consumption(a) => cmd_consumption(a),
        Command::Scenario(c) => cmd_scenario(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
