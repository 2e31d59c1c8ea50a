//! In-process end-to-end run: scenario physics drive a simulated node, whose
//! messages cross a faulty channel into the hub and the store, followed by
//! analysis and artifact output.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use thiserror::Error;

use crate::analysis::{self, AnalysisError, TrajectoryOptions};
use crate::hub::{Hub, HubConfig, HubError};
use crate::node::{
    AdcMode, Calibration, LoadCellBank, LoadHandle, NodeConfig, NodeError, NoiseModel, SensorNode,
    DEFAULT_SCALE_COUNTS_PER_G, DEFAULT_WINDOW,
};
use crate::physics::{decompose_forces, ForceQuad, PhysicsError};
use crate::scenario::{Scenario, ScenarioError};
use crate::store::{export_csv, Record, Store, StoreError};
use crate::transport::{Broker, FaultConfig, TopicFilter, TransportError, DEFAULT_REORDER_WINDOW};

/// Channel zero offsets of the simulated converters before taring.
pub const DEFAULT_HARDWARE_OFFSETS: [i32; 4] = [8_000, -1_200, 15_000, 3];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Scenario(ScenarioError::Parse(_) | ScenarioError::Validation { .. }) => "config",
            RunError::Scenario(_) => "scenario",
            RunError::Physics(_) => "physics",
            RunError::Node(NodeError::InvalidConfig(_) | NodeError::InvalidCalibration(_)) => "config",
            RunError::Node(_) => "node",
            RunError::Transport(TransportError::InvalidConfig(_)) => "config",
            RunError::Transport(_) => "transport",
            RunError::Hub(HubError::InvalidConfig(_)) => "config",
            RunError::Hub(_) => "hub",
            RunError::Store(_) => "store",
            RunError::Analysis(_) => "analysis",
            RunError::Io { .. } => "io",
        }
    }

    pub fn is_config(&self) -> bool {
        self.kind() == "config"
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub hive_id: String,
    /// Per-sample, per-cell noise; 0 disables it.
    pub noise_sigma_g: f64,
    pub seed: u64,
    pub adc_mode: AdcMode,
    pub scale_counts_per_g: f64,
    pub hardware_offsets: [i32; 4],
    pub window: usize,
    pub faults: FaultConfig,
    /// Hub reorder buffer; defaults to the channel's reorder window.
    pub hub_reorder_window: Option<usize>,
    pub store_dir: PathBuf,
    pub out_csv: Option<PathBuf>,
    pub out_svg: Option<PathBuf>,
    pub trajectory: TrajectoryOptions,
}

impl RunConfig {
    pub fn new(scenario: Scenario, store_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario,
            hive_id: "hive-1".into(),
            noise_sigma_g: 0.0,
            seed: 1,
            adc_mode: AdcMode::Quantized,
            scale_counts_per_g: DEFAULT_SCALE_COUNTS_PER_G,
            hardware_offsets: DEFAULT_HARDWARE_OFFSETS,
            window: DEFAULT_WINDOW,
            faults: FaultConfig::none(),
            hub_reorder_window: None,
            store_dir: store_dir.into(),
            out_csv: None,
            out_svg: None,
            trajectory: TrajectoryOptions::default(),
        }
    }

    fn reorder_window(&self) -> usize {
        self.hub_reorder_window
            .unwrap_or(self.faults.reorder_window.max(DEFAULT_REORDER_WINDOW))
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.scenario.validate()?;
        self.faults.validate()?;
        if !(self.noise_sigma_g.is_finite() && self.noise_sigma_g >= 0.0) {
            return Err(RunError::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma_g)));
        }
        if self.faults.reorder_window > self.reorder_window() {
            return Err(RunError::Config(format!(
                "hub reorder window {} is smaller than the channel's {}",
                self.reorder_window(),
                self.faults.reorder_window
            )));
        }
        self.node_config().validate()?;
        Ok(())
    }

    fn node_config(&self) -> NodeConfig {
        NodeConfig {
            hive_id: self.hive_id.clone(),
            scale_counts_per_g: self.scale_counts_per_g,
            sigma_g: self.noise_sigma_g,
            seed: self.seed,
            window: self.window,
            publish_target: None,
            adc_mode: self.adc_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub records: usize,
    pub duplicates: u64,
    pub gaps: u64,
    pub dropped: u64,
    pub dead_lettered: u64,
    pub degenerate: u64,
    pub initial_total_g: f64,
    pub final_total_g: f64,
    pub consumed_g: f64,
}

impl RunSummary {
    /// Every step produced a persisted record.
    pub fn is_complete(&self) -> bool {
        self.records == self.steps
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "steps={} records={} duplicates={} gaps={} dropped={} dead_lettered={} consumed_g={:.1}",
            self.steps, self.records, self.duplicates, self.gaps, self.dropped, self.dead_lettered, self.consumed_g
        )
    }
}

/// Everything a run produced, for callers that want more than the summary.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<Record>,
    pub svg: String,
    pub csv: String,
}

/// Writes `contents` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    let io_err = |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn run_experiment(config: &RunConfig) -> Result<RunOutput, RunError> {
    config.validate()?;
    let scenario = &config.scenario;
    let geometry = scenario.geometry;
    let snapshots = scenario.replay()?;

    let store = Store::open(&config.store_dir)?;
    if store.log_path(&config.hive_id).exists() && !store.read_all(&config.hive_id)?.is_empty() {
        return Err(RunError::Config(format!(
            "store {} already holds records for hive {}",
            config.store_dir.display(),
            config.hive_id
        )));
    }

    let broker = Broker::new(config.faults.clone())?;
    let subscription = broker.subscribe(TopicFilter::all_telemetry())?;
    let hub = Hub::new(HubConfig {
        default_geometry: geometry,
        reorder_window: config.reorder_window(),
        store_dir: config.store_dir.clone(),
        ..HubConfig::default()
    })?;

    let load = LoadHandle::new(ForceQuad::ZERO);
    let mut bank = LoadCellBank::new(
        load.clone(),
        Calibration::new(config.scale_counts_per_g, config.hardware_offsets)?,
        NoiseModel {
            sigma_g: config.noise_sigma_g,
            rng_seed: config.seed,
        },
        config.adc_mode,
    )?;
    let mut node = SensorNode::new(&config.node_config(), Calibration::new(config.scale_counts_per_g, [0; 4])?)?;

    let (node_result, status) = thread::scope(|s| {
        let hub_thread = s.spawn(|| hub.run(subscription));
        let node_result = (|| -> Result<(), RunError> {
            // empty platform
            node.tare(&mut bank)?;
            for snap in &snapshots {
                load.set(decompose_forces(&snap.state.items(), &geometry)?);
                node.publish_cycle(&mut bank, &broker, snap.ts_ms)?;
            }
            Ok(())
        })();
        broker.close();
        let status = hub_thread.join().expect("hub thread panicked");
        (node_result, status)
    });
    node_result?;

    let records = store.read_all(&config.hive_id)?;
    let totals = status.totals();
    let initial_total_g = scenario.initial_state().total_mass_g();
    let final_total_g = records.last().map_or(0.0, |r| r.total_g);
    let summary = RunSummary {
        steps: snapshots.len(),
        records: records.len(),
        duplicates: totals.duplicates_dropped,
        gaps: totals.gaps_detected,
        dropped: node.diagnostics().dropped,
        dead_lettered: totals.dead_lettered,
        degenerate: totals.degenerate_readings,
        initial_total_g,
        final_total_g,
        consumed_g: initial_total_g - final_total_g,
    };

    let csv = export_csv(&records);
    let svg = if records.is_empty() {
        String::new()
    } else {
        let traj = analysis::trajectory(&records, geometry, config.trajectory)?;
        analysis::render_svg(&traj, &geometry)?
    };
    if let Some(path) = &config.out_csv {
        write_atomic(path, csv.as_bytes())?;
    }
    if let (Some(path), false) = (&config.out_svg, svg.is_empty()) {
        write_atomic(path, svg.as_bytes())?;
    }
    log::info!("run finished: {summary}");
    Ok(RunOutput {
        summary,
        records,
        svg,
        csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{builtin_winter, ScenarioStep};

    fn short_scenario() -> Scenario {
        let mut s = builtin_winter();
        s.steps = vec![
            ScenarioStep {
                sphere_move: [0.0, 0.0],
                strips_removed: 1,
                days_represented: 1,
            };
            5
        ];
        s
    }

    #[test]
    fn short_run_persists_every_step() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new(short_scenario(), dir.path().join("store"));
        cfg.out_csv = Some(dir.path().join("out/trajectory.csv"));
        cfg.out_svg = Some(dir.path().join("out/trajectory.svg"));
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.summary.records, 5);
        assert!(out.summary.is_complete());
        assert!((out.summary.consumed_g - 5.0 * 26.5).abs() < 0.05);
        assert_eq!(std::fs::read_to_string(cfg.out_csv.unwrap()).unwrap(), out.csv);
        assert_eq!(std::fs::read_to_string(cfg.out_svg.unwrap()).unwrap(), out.svg);
        assert!(out.summary.to_string().ends_with("consumed_g=132.5"));
    }

    #[test]
    fn refuses_populated_store() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::new(short_scenario(), dir.path());
        run_experiment(&cfg).unwrap();
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.is_config(), "{err}");
    }

    #[test]
    fn config_checks() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new(short_scenario(), dir.path());
        cfg.faults.duplicate_rate = 1.5;
        assert!(run_experiment(&cfg).unwrap_err().is_config());
        let mut cfg = RunConfig::new(short_scenario(), dir.path());
        cfg.faults.reorder_window = 9;
        cfg.hub_reorder_window = Some(2);
        assert!(run_experiment(&cfg).unwrap_err().is_config());
        let mut cfg = RunConfig::new(short_scenario(), dir.path());
        cfg.hive_id = "bad/id".into();
        assert!(run_experiment(&cfg).unwrap_err().is_config());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
