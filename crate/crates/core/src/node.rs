//! Sensor node emulation: four HX711-style channels, taring, ten-sample
//! averaging and periodic publication of telemetry.

use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::ForceQuad;
use crate::transport::{encode_message, HiveId, Publisher, TelemetryMessage, Topic, TransportError};

/// Largest value the 24-bit converter can report.
pub const ADC_MAX: i32 = (1 << 23) - 1;
/// Smallest value the 24-bit converter can report.
pub const ADC_MIN: i32 = -(1 << 23);
pub const DEFAULT_SCALE_COUNTS_PER_G: f64 = 100.0;
pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_SIGMA_G: f64 = 5.0;
/// Publish attempts per message before it is given up.
pub const PUBLISH_ATTEMPTS: usize = 3;
/// Tare is refused when a cell's spread exceeds this many noise sigmas.
pub const TARE_SPREAD_SIGMAS: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("short window: {got} samples, {need} required")]
    ShortWindow { got: usize, need: usize },
    #[error("unstable tare: cell {cell} spread {spread_g} g exceeds {limit_g} g")]
    UnstableTare { cell: usize, spread_g: f64, limit_g: f64 },
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("invalid node config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Per-channel conversion between grams and converter counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scale_counts_per_g: f64,
    pub offset_counts: [i32; 4],
}

impl Calibration {
    pub fn new(scale_counts_per_g: f64, offset_counts: [i32; 4]) -> Result<Self, NodeError> {
        let cal = Self {
            scale_counts_per_g,
            offset_counts,
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        if !(self.scale_counts_per_g.is_finite() && self.scale_counts_per_g > 0.0) {
            return Err(NodeError::InvalidCalibration(format!(
                "scale must be positive, got {}",
                self.scale_counts_per_g
            )));
        }
        if let Some(o) = self.offset_counts.iter().find(|o| !(ADC_MIN..=ADC_MAX).contains(*o)) {
            return Err(NodeError::InvalidCalibration(format!("offset {o} outside 24-bit range")));
        }
        Ok(())
    }
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            scale_counts_per_g: DEFAULT_SCALE_COUNTS_PER_G,
            offset_counts: [0; 4],
        }
    }
}

/// Converter model: round, add the channel offset, clamp to 24 bits.
pub fn quantize(force_g: f64, cal: &Calibration, cell: usize) -> i32 {
    let raw = (force_g * cal.scale_counts_per_g).round() + f64::from(cal.offset_counts[cell]);
    // NaN maps to 0 through `as`; forces are finite in practice.
    raw.clamp(f64::from(ADC_MIN), f64::from(ADC_MAX)) as i32
}

pub fn counts_to_grams(counts: f64, cal: &Calibration, cell: usize) -> f64 {
    (counts - f64::from(cal.offset_counts[cell])) / cal.scale_counts_per_g
}

/// True when `counts` sits on either converter rail.
pub fn is_saturated(counts: f64) -> bool {
    counts >= f64::from(ADC_MAX) || counts <= f64::from(ADC_MIN)
}

/// One reading of all four channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    /// Converter counts. Integral unless the bank runs [`AdcMode::Ideal`].
    pub counts: [f64; 4],
    pub ts_ms: u64,
}

/// Mean per cell of the most recent `window` readings (already in grams).
pub fn average_samples(readings: &[[f64; 4]], window: usize) -> Result<[f64; 4], NodeError> {
    if window == 0 || readings.len() < window {
        return Err(NodeError::ShortWindow {
            got: readings.len(),
            need: window,
        });
    }
    let recent = &readings[readings.len() - window..];
    let mut out = [0.0; 4];
    for (cell, slot) in out.iter_mut().enumerate() {
        *slot = recent.iter().map(|r| r[cell]).sum::<f64>() / window as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_g: f64,
    pub rng_seed: u64,
}

impl NoiseModel {
    pub fn off() -> Self {
        Self {
            sigma_g: 0.0,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AdcMode {
    /// 24-bit rounding and clamping.
    #[default]
    Quantized,
    /// Unrounded counts; for exactness checks.
    Ideal,
}

/// Anything that can produce raw four-channel readings.
pub trait SampleSource {
    fn read_sample(&mut self, ts_ms: u64) -> RawSample;
}

/// Shared handle to the forces currently acting on the platform.
#[derive(Debug, Clone, Default)]
pub struct LoadHandle(Arc<RwLock<ForceQuad>>);

impl LoadHandle {
    pub fn new(initial: ForceQuad) -> Self {
        Self(Arc::new(RwLock::new(initial)))
    }

    pub fn set(&self, forces: ForceQuad) {
        *self.0.write().expect("load lock poisoned") = forces;
    }

    pub fn get(&self) -> ForceQuad {
        *self.0.read().expect("load lock poisoned")
    }
}

/// Simulated load cells with their converters.
///
/// `hardware` holds the physical zero offset of each channel, which a node
/// learns through [`tare`].
pub struct LoadCellBank {
    load: LoadHandle,
    hardware: Calibration,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    mode: AdcMode,
}

impl LoadCellBank {
    pub fn new(load: LoadHandle, hardware: Calibration, noise: NoiseModel, mode: AdcMode) -> Result<Self, NodeError> {
        hardware.validate()?;
        if !(noise.sigma_g.is_finite() && noise.sigma_g >= 0.0) {
            return Err(NodeError::InvalidConfig(format!("sigma_g must be >= 0, got {}", noise.sigma_g)));
        }
        let normal = (noise.sigma_g > 0.0)
            .then(|| Normal::new(0.0, noise.sigma_g).expect("sigma checked above"));
        Ok(Self {
            load,
            hardware,
            noise: normal,
            rng: ChaCha8Rng::seed_from_u64(noise.rng_seed),
            mode,
        })
    }

    pub fn load(&self) -> &LoadHandle {
        &self.load
    }
}

impl SampleSource for LoadCellBank {
    fn read_sample(&mut self, ts_ms: u64) -> RawSample {
        let forces = self.load.get().to_array();
        let mut counts = [0.0; 4];
        for (cell, slot) in counts.iter_mut().enumerate() {
            let noise = self.noise.as_ref().map_or(0.0, |n| n.sample(&mut self.rng));
            let g = forces[cell] + noise;
            *slot = match self.mode {
                AdcMode::Quantized => f64::from(quantize(g, &self.hardware, cell)),
                AdcMode::Ideal => {
                    g * self.hardware.scale_counts_per_g + f64::from(self.hardware.offset_counts[cell])
                }
            };
        }
        RawSample { counts, ts_ms }
    }
}

/// Zeroes every channel against the current (reference) load.
///
/// Reads `window` samples and sets each offset to the rounded mean count.
/// Fails when any channel moved by more than ten noise sigmas in the window.
pub fn tare<S: SampleSource + ?Sized>(
    source: &mut S,
    cal: &Calibration,
    window: usize,
    sigma_g: f64,
) -> Result<Calibration, NodeError> {
    cal.validate()?;
    if window == 0 {
        return Err(NodeError::ShortWindow { got: 0, need: 1 });
    }
    let samples: Vec<RawSample> = (0..window).map(|_| source.read_sample(0)).collect();
    let limit_g = TARE_SPREAD_SIGMAS * sigma_g;
    let mut offsets = [0i32; 4];
    for (cell, offset) in offsets.iter_mut().enumerate() {
        let (lo, hi, sum) = samples.iter().map(|s| s.counts[cell]).fold(
            (f64::INFINITY, f64::NEG_INFINITY, 0.0),
            |(lo, hi, sum), c| (lo.min(c), hi.max(c), sum + c),
        );
        let spread_g = (hi - lo) / cal.scale_counts_per_g;
        if spread_g > limit_g {
            return Err(NodeError::UnstableTare { cell, spread_g, limit_g });
        }
        let mean = (sum / window as f64).round();
        if !(f64::from(ADC_MIN)..=f64::from(ADC_MAX)).contains(&mean) {
            return Err(NodeError::InvalidCalibration(format!("tare mean {mean} outside 24-bit range")));
        }
        *offset = mean as i32;
    }
    Calibration::new(cal.scale_counts_per_g, offsets)
}

/// Node settings, as read from the node config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub hive_id: String,
    pub scale_counts_per_g: f64,
    pub sigma_g: f64,
    pub seed: u64,
    pub window: usize,
    /// Hub address for networked mode, `host:port`.
    pub publish_target: Option<String>,
    pub adc_mode: AdcMode,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            hive_id: "hive-1".into(),
            scale_counts_per_g: DEFAULT_SCALE_COUNTS_PER_G,
            sigma_g: DEFAULT_SIGMA_G,
            seed: 1,
            window: DEFAULT_WINDOW,
            publish_target: None,
            adc_mode: AdcMode::Quantized,
        }
    }
}

impl NodeConfig {
    pub fn validate(&self) -> Result<HiveId, NodeError> {
        let id = HiveId::new(self.hive_id.clone()).map_err(|e| NodeError::InvalidConfig(e.to_string()))?;
        if !(self.scale_counts_per_g.is_finite() && self.scale_counts_per_g > 0.0) {
            return Err(NodeError::InvalidConfig("scale_counts_per_g must be positive".into()));
        }
        if !(self.sigma_g.is_finite() && self.sigma_g >= 0.0) {
            return Err(NodeError::InvalidConfig("sigma_g must be >= 0".into()));
        }
        if self.window == 0 {
            return Err(NodeError::InvalidConfig("window must be >= 1".into()));
        }
        Ok(id)
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            sigma_g: self.sigma_g,
            rng_seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeDiagnostics {
    pub published: u64,
    pub dropped: u64,
    pub retries: u64,
    pub saturated_samples: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PublishOutcome {
    Published(TelemetryMessage),
    /// Every attempt failed; the sequence number is consumed anyway.
    Dropped(TelemetryMessage),
}

pub struct SensorNode {
    hive_id: HiveId,
    topic: Topic,
    cal: Calibration,
    window: usize,
    sigma_g: f64,
    next_seq: u64,
    diagnostics: NodeDiagnostics,
}

impl SensorNode {
    pub fn new(config: &NodeConfig, cal: Calibration) -> Result<Self, NodeError> {
        let hive_id = config.validate()?;
        cal.validate()?;
        Ok(Self {
            topic: Topic::telemetry(hive_id.clone()),
            hive_id,
            cal,
            window: config.window,
            sigma_g: config.sigma_g,
            next_seq: 0,
            diagnostics: NodeDiagnostics::default(),
        })
    }

    pub fn hive_id(&self) -> &HiveId {
        &self.hive_id
    }

    pub fn calibration(&self) -> &Calibration {
        &self.cal
    }

    pub fn diagnostics(&self) -> NodeDiagnostics {
        self.diagnostics
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Re-zeroes the node against whatever the source currently measures.
    pub fn tare<S: SampleSource + ?Sized>(&mut self, source: &mut S) -> Result<(), NodeError> {
        self.cal = tare(source, &self.cal, self.window, self.sigma_g)?;
        Ok(())
    }

    /// Reads one window and returns the averaged per-cell grams.
    pub fn read_averaged<S: SampleSource + ?Sized>(&mut self, source: &mut S, ts_ms: u64) -> Result<[f64; 4], NodeError> {
        let mut grams = Vec::with_capacity(self.window);
        for _ in 0..self.window {
            let sample = source.read_sample(ts_ms);
            let mut g = [0.0; 4];
            for (cell, (slot, counts)) in g.iter_mut().zip(sample.counts).enumerate() {
                if is_saturated(counts) {
                    self.diagnostics.saturated_samples += 1;
                }
                *slot = counts_to_grams(counts, &self.cal, cell);
            }
            grams.push(g);
        }
        average_samples(&grams, self.window)
    }

    /// One publish period: sample, average, publish with bounded retry.
    pub fn publish_cycle<S, P>(&mut self, source: &mut S, publisher: &P, ts_ms: u64) -> Result<PublishOutcome, NodeError>
    where
        S: SampleSource + ?Sized,
        P: Publisher + ?Sized,
    {
        let cells_g = self.read_averaged(source, ts_ms)?;
        let msg = TelemetryMessage {
            hive_id: self.hive_id.clone(),
            seq: self.next_seq,
            ts_ms,
            cells_g,
        };
        self.next_seq += 1;
        let payload = encode_message(&msg)?;
        let mut last_err = None;
        for attempt in 0..PUBLISH_ATTEMPTS {
            if attempt > 0 {
                self.diagnostics.retries += 1;
            }
            match publisher.publish(&self.topic, &payload) {
                Ok(()) => {
                    self.diagnostics.published += 1;
                    return Ok(PublishOutcome::Published(msg));
                }
                Err(e) => last_err = Some(e),
            }
        }
        self.diagnostics.dropped += 1;
        log::warn!(
            "hive {} seq {} dropped after {PUBLISH_ATTEMPTS} attempts: {}",
            self.hive_id,
            msg.seq,
            last_err.map(|e| e.to_string()).unwrap_or_default()
        );
        Ok(PublishOutcome::Dropped(msg))
    }
}

/// Runs the publish loop once per timestamp yielded by `schedule`; the node
/// stops when the schedule ends.
pub fn run_node<S, P, I>(node: &mut SensorNode, source: &mut S, publisher: &P, schedule: I) -> Result<NodeDiagnostics, NodeError>
where
    S: SampleSource + ?Sized,
    P: Publisher + ?Sized,
    I: IntoIterator<Item = u64>,
{
    for ts_ms in schedule {
        node.publish_cycle(source, publisher, ts_ms)?;
    }
    Ok(node.diagnostics())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{decompose_forces, MassItem, PlatformGeometry, Point};
    use crate::transport::{decode_message, Broker, TopicFilter};
    use std::sync::Mutex;

    /// Replays a fixed list of count vectors.
    struct Scripted(Vec<[f64; 4]>, usize);

    impl SampleSource for Scripted {
        fn read_sample(&mut self, ts_ms: u64) -> RawSample {
            let c = self.0[self.1 % self.0.len()];
            self.1 += 1;
            RawSample { counts: c, ts_ms }
        }
    }

    fn cal(offset: i32) -> Calibration {
        Calibration::new(100.0, [offset; 4]).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, &cal(8000), 0), 8000);
        assert_eq!(quantize(26.5, &cal(0), 2), 2650);
        assert_eq!(quantize(1e9, &cal(0), 1), ADC_MAX);
        assert_eq!(quantize(1e9, &cal(-5000), 1), ADC_MAX);
        assert_eq!(quantize(-1e9, &cal(0), 1), ADC_MIN);
    }

    #[test]
    fn counts_to_grams_examples() {
        assert_eq!(counts_to_grams(8000.0, &cal(8000), 0), 0.0);
        assert_eq!(counts_to_grams(2650.0, &cal(0), 0), 26.5);
    }

    #[test]
    fn quantize_round_trip_half_lsb() {
        let c = Calibration::new(100.0, [1234, -77, 0, 8_000]).unwrap();
        let mut g = -5000.0;
        while g < 40_000.0 {
            for cell in 0..4 {
                let back = counts_to_grams(f64::from(quantize(g, &c, cell)), &c, cell);
                assert!((back - g).abs() <= 0.005 + 1e-9, "{g} -> {back}");
            }
            g += 7.3191;
        }
    }

    #[test]
    fn calibration_validation() {
        assert!(Calibration::new(0.0, [0; 4]).is_err());
        assert!(Calibration::new(100.0, [ADC_MAX + 1, 0, 0, 0]).is_err());
    }

    #[test]
    fn averaging() {
        assert_eq!(average_samples(&[[5.0; 4]; 10], 10).unwrap(), [5.0; 4]);
        let ramp: Vec<[f64; 4]> = (1..=10).map(|i| [f64::from(i); 4]).collect();
        assert_eq!(average_samples(&ramp, 10).unwrap(), [5.5; 4]);
        let mut rev = ramp.clone();
        rev.reverse();
        rev.swap(2, 7);
        assert_eq!(average_samples(&rev, 10).unwrap(), [5.5; 4]);
        assert_eq!(
            average_samples(&ramp[..9], 10),
            Err(NodeError::ShortWindow { got: 9, need: 10 })
        );
    }

    #[test]
    fn tare_constant_stream() {
        let mut src = Scripted(vec![[1234.0; 4]], 0);
        let c = tare(&mut src, &Calibration::default(), 10, 0.0).unwrap();
        assert_eq!(c.offset_counts, [1234; 4]);
        assert_eq!(counts_to_grams(1234.0, &c, 3), 0.0);
    }

    #[test]
    fn tare_detects_motion() {
        let mut script = vec![[500.0; 4]; 5];
        script.extend(vec![[500.0 + 100_000.0; 4]; 5]);
        let mut src = Scripted(script, 0);
        let err = tare(&mut src, &Calibration::default(), 10, 0.0).unwrap_err();
        assert!(matches!(err, NodeError::UnstableTare { cell: 0, .. }));
    }

    #[test]
    fn tare_then_center_load_reads_quarter() {
        let load = LoadHandle::default();
        let hw = Calibration::new(100.0, [8000, -1200, 15_000, 3]).unwrap();
        let mut bank = LoadCellBank::new(load.clone(), hw, NoiseModel::off(), AdcMode::Quantized).unwrap();
        let config = NodeConfig { sigma_g: 0.0, ..NodeConfig::default() };
        let mut node = SensorNode::new(&config, Calibration::default()).unwrap();
        node.tare(&mut bank).unwrap();
        assert_eq!(node.calibration().offset_counts, hw.offset_counts);
        let g = PlatformGeometry::default();
        load.set(decompose_forces(&[MassItem::new("w", 1000.0, g.center())], &g).unwrap());
        let cells = node.read_averaged(&mut bank, 0).unwrap();
        for c in cells {
            assert!((c - 250.0).abs() <= 0.005);
        }
    }

    #[test]
    fn noisy_tare_is_stable() {
        let load = LoadHandle::default();
        let noise = NoiseModel { sigma_g: 5.0, rng_seed: 3 };
        let mut bank = LoadCellBank::new(load, Calibration::new(100.0, [500; 4]).unwrap(), noise, AdcMode::Quantized).unwrap();
        let c = tare(&mut bank, &Calibration::default(), 10, 5.0).unwrap();
        for o in c.offset_counts {
            // mean of ten N(0, 5 g) samples is well inside +-10 g
            assert!((o - 500).abs() < 1000, "{o}");
        }
    }

    #[test]
    fn saturation_is_counted() {
        let load = LoadHandle::new(ForceQuad::new(1e9, 0.0, 0.0, 0.0));
        let mut bank = LoadCellBank::new(load, Calibration::default(), NoiseModel::off(), AdcMode::Quantized).unwrap();
        let mut node = SensorNode::new(&NodeConfig::default(), Calibration::default()).unwrap();
        node.read_averaged(&mut bank, 0).unwrap();
        assert_eq!(node.diagnostics().saturated_samples, 10);
    }

    #[test]
    fn averaging_reduces_noise_by_sqrt_window() {
        let sigma = 5.0;
        let load = LoadHandle::new(ForceQuad::new(8000.0, 8000.0, 8000.0, 8000.0));
        let noise = NoiseModel { sigma_g: sigma, rng_seed: 99 };
        let mut bank = LoadCellBank::new(load, Calibration::default(), noise, AdcMode::Quantized).unwrap();
        let mut node = SensorNode::new(&NodeConfig::default(), Calibration::default()).unwrap();
        let n = 10_000;
        let vals: Vec<f64> = (0..n).map(|_| node.read_averaged(&mut bank, 0).unwrap()[1]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let expected = sigma / 10f64.sqrt();
        assert!((sd - expected).abs() / expected < 0.1, "sd {sd} expected {expected}");
    }

    fn noise_free_run(seed: u64) -> Vec<Vec<u8>> {
        let g = PlatformGeometry::default();
        let load = LoadHandle::default();
        let noise = NoiseModel { sigma_g: 2.0, rng_seed: seed };
        let mut bank = LoadCellBank::new(load.clone(), Calibration::new(100.0, [10, 20, 30, 40]).unwrap(), noise, AdcMode::Quantized).unwrap();
        let config = NodeConfig { seed, sigma_g: 2.0, ..NodeConfig::default() };
        let mut node = SensorNode::new(&config, Calibration::default()).unwrap();
        node.tare(&mut bank).unwrap();
        let broker = Broker::reliable();
        let sub = broker.subscribe(TopicFilter::all_telemetry()).unwrap();
        load.set(decompose_forces(&[MassItem::new("a", 3000.0, Point::new(100.0, 300.0))], &g).unwrap());
        run_node(&mut node, &mut bank, &broker, (0..20).map(|d| d * 1000)).unwrap();
        broker.close();
        sub.map(|d| d.payload).collect()
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(noise_free_run(7), noise_free_run(7));
        assert_ne!(noise_free_run(7), noise_free_run(8));
    }

    #[test]
    fn five_steps_match_decomposition() {
        let g = PlatformGeometry::default();
        let load = LoadHandle::default();
        let mut bank = LoadCellBank::new(load.clone(), Calibration::new(100.0, [8000; 4]).unwrap(), NoiseModel::off(), AdcMode::Ideal).unwrap();
        let mut node = SensorNode::new(&NodeConfig { sigma_g: 0.0, ..NodeConfig::default() }, Calibration::default()).unwrap();
        node.tare(&mut bank).unwrap();
        let broker = Broker::reliable();
        let sub = broker.subscribe(TopicFilter::all_telemetry()).unwrap();
        let mut expected = Vec::new();
        for step in 0..5u64 {
            let items = [MassItem::new("a", 1000.0 + 10.0 * step as f64, Point::new(50.0 * step as f64, 80.0))];
            let q = decompose_forces(&items, &g).unwrap();
            load.set(q);
            expected.push(q);
            node.publish_cycle(&mut bank, &broker, step).unwrap();
        }
        broker.close();
        let msgs: Vec<TelemetryMessage> = sub.map(|d| decode_message(&d.payload).unwrap()).collect();
        assert_eq!(msgs.len(), 5);
        for (i, (m, q)) in msgs.iter().zip(expected).enumerate() {
            assert_eq!(m.seq, i as u64);
            for (a, b) in m.cells_g.iter().zip(q.to_array()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    /// Fails every attempt for the listed sequence numbers.
    struct Flaky {
        down_for: Vec<u64>,
        attempts: Mutex<Vec<u64>>,
        inner: Broker,
    }

    impl Publisher for Flaky {
        fn publish(&self, topic: &Topic, payload: &[u8]) -> Result<(), TransportError> {
            let seq = decode_message(payload).unwrap().seq;
            self.attempts.lock().unwrap().push(seq);
            if self.down_for.contains(&seq) {
                return Err(TransportError::Io("connection refused".into()));
            }
            self.inner.publish(topic, payload)
        }
    }

    #[test]
    fn publisher_outage_drops_after_retries() {
        let load = LoadHandle::new(ForceQuad::new(10.0, 10.0, 10.0, 10.0));
        let mut bank = LoadCellBank::new(load, Calibration::default(), NoiseModel::off(), AdcMode::Quantized).unwrap();
        let mut node = SensorNode::new(&NodeConfig::default(), Calibration::default()).unwrap();
        let flaky = Flaky {
            down_for: vec![2],
            attempts: Mutex::new(Vec::new()),
            inner: Broker::reliable(),
        };
        let sub = flaky.inner.subscribe(TopicFilter::all_telemetry()).unwrap();
        let diag = run_node(&mut node, &mut bank, &flaky, 0..5).unwrap();
        flaky.inner.close();
        assert_eq!(diag.dropped, 1);
        assert_eq!(diag.retries, 2);
        assert_eq!(diag.published, 4);
        assert_eq!(flaky.attempts.lock().unwrap().iter().filter(|&&s| s == 2).count(), PUBLISH_ATTEMPTS);
        let seqs: Vec<u64> = sub.map(|d| decode_message(&d.payload).unwrap().seq).collect();
        assert_eq!(seqs, vec![0, 1, 3, 4]);
    }

    #[test]
    fn config_validation() {
        assert!(NodeConfig { hive_id: "Bad Id".into(), ..NodeConfig::default() }.validate().is_err());
        assert!(NodeConfig { window: 0, ..NodeConfig::default() }.validate().is_err());
        assert!(NodeConfig { sigma_g: -1.0, ..NodeConfig::default() }.validate().is_err());
    }
}
