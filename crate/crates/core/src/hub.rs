//! Telemetry hub: per-hive deduplication and ordering, center-of-mass
//! reconstruction and persistence.
//!
//! Hives are independent. Each hive's state sits behind its own lock, so one
//! hive is applied strictly in seq order while different hives proceed in
//! parallel.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{reconstruct_com, ComputedPoint, ForceQuad, PhysicsError, PlatformGeometry, DEFAULT_EPSILON_G};
use crate::store::{Record, RecordSink, Store, StoreError};
use crate::transport::{decode_message, HiveId, Subscription, TelemetryMessage, Topic, TransportError, DEFAULT_REORDER_WINDOW};

#[derive(Debug, Error)]
pub enum HubError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("payload for hive {payload} arrived on topic of hive {topic}")]
    TopicMismatch { topic: String, payload: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid hub config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HubConfig {
    /// Address the networked hub listens on.
    pub listen: Option<String>,
    pub topic_filter: String,
    pub default_geometry: PlatformGeometry,
    /// Per-hive geometry overrides, keyed by hive id.
    pub geometry: BTreeMap<String, PlatformGeometry>,
    pub reorder_window: usize,
    pub epsilon_g: f64,
    pub store_dir: PathBuf,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            listen: None,
            topic_filter: "apiary/+/telemetry".into(),
            default_geometry: PlatformGeometry::default(),
            geometry: BTreeMap::new(),
            reorder_window: DEFAULT_REORDER_WINDOW,
            epsilon_g: DEFAULT_EPSILON_G,
            store_dir: PathBuf::from("store"),
        }
    }
}

impl HubConfig {
    pub fn validate(&self) -> Result<(), HubError> {
        crate::transport::TopicFilter::parse(&self.topic_filter)?;
        self.default_geometry
            .validate()
            .map_err(|e| HubError::InvalidConfig(e.to_string()))?;
        for (id, g) in &self.geometry {
            if !HiveId::is_valid(id) {
                return Err(HubError::InvalidConfig(format!("geometry key {id:?} is not a hive id")));
            }
            g.validate().map_err(|e| HubError::InvalidConfig(format!("{id}: {e}")))?;
        }
        if !(self.epsilon_g.is_finite() && self.epsilon_g >= 0.0) {
            return Err(HubError::InvalidConfig("epsilon_g must be >= 0".into()));
        }
        Ok(())
    }

    pub fn geometry_for(&self, hive: &HiveId) -> PlatformGeometry {
        self.geometry.get(hive.as_str()).copied().unwrap_or(self.default_geometry)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct HiveCounters {
    pub received: u64,
    pub applied: u64,
    pub persisted: u64,
    pub duplicates_dropped: u64,
    pub gaps_detected: u64,
    pub missing_seqs: u64,
    pub degenerate_readings: u64,
    pub store_failures: u64,
    pub dead_lettered: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DedupOutcome {
    Accept,
    Duplicate,
    Buffered,
}

/// Ordering state of one hive.
#[derive(Debug, Clone)]
pub struct HiveIngestState {
    hive_id: HiveId,
    geometry: PlatformGeometry,
    reorder_window: usize,
    next_seq: u64,
    pending: BTreeMap<u64, TelemetryMessage>,
    counters: HiveCounters,
}

impl HiveIngestState {
    pub fn new(hive_id: HiveId, geometry: PlatformGeometry, reorder_window: usize) -> Self {
        Self {
            hive_id,
            geometry,
            reorder_window,
            next_seq: 0,
            pending: BTreeMap::new(),
            counters: HiveCounters::default(),
        }
    }

    /// Resume after `seq` (for example the last seq already in the store).
    pub fn resume_after(mut self, seq: Option<u64>) -> Self {
        self.next_seq = seq.map_or(0, |s| s + 1);
        self
    }

    pub fn hive_id(&self) -> &HiveId {
        &self.hive_id
    }

    pub fn geometry(&self) -> &PlatformGeometry {
        &self.geometry
    }

    /// Highest seq handed on for application, if any.
    pub fn highest_applied_seq(&self) -> Option<u64> {
        self.next_seq.checked_sub(1)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn counters(&self) -> HiveCounters {
        self.counters
    }

    /// Classifies an arriving message and returns every message that became
    /// ready for application, in seq order.
    ///
    /// Out-of-order messages wait in a buffer of at most `reorder_window`
    /// entries. When one more would not fit, the missing seqs are recorded as
    /// a gap and the whole buffer is released in seq order.
    pub fn offer(&mut self, msg: TelemetryMessage) -> (DedupOutcome, Vec<TelemetryMessage>) {
        self.counters.received += 1;
        if msg.seq < self.next_seq || self.pending.contains_key(&msg.seq) {
            self.counters.duplicates_dropped += 1;
            return (DedupOutcome::Duplicate, Vec::new());
        }
        if msg.seq == self.next_seq {
            let mut ready = vec![msg];
            self.next_seq += 1;
            self.drain_contiguous(&mut ready);
            return (DedupOutcome::Accept, ready);
        }
        self.pending.insert(msg.seq, msg);
        if self.pending.len() <= self.reorder_window {
            return (DedupOutcome::Buffered, Vec::new());
        }
        (DedupOutcome::Buffered, self.flush())
    }

    /// Releases everything buffered in seq order, recording gaps.
    pub fn flush(&mut self) -> Vec<TelemetryMessage> {
        let mut ready = Vec::with_capacity(self.pending.len());
        for (seq, msg) in std::mem::take(&mut self.pending) {
            if seq > self.next_seq {
                self.counters.gaps_detected += 1;
                self.counters.missing_seqs += seq - self.next_seq;
                log::warn!("hive {}: seqs {}..{} missing", self.hive_id, self.next_seq, seq - 1);
            }
            self.next_seq = seq + 1;
            ready.push(msg);
        }
        ready
    }

    fn drain_contiguous(&mut self, ready: &mut Vec<TelemetryMessage>) {
        while let Some(msg) = self.pending.remove(&self.next_seq) {
            self.next_seq += 1;
            ready.push(msg);
        }
    }
}

/// Why an accepted message produced no persisted point.
#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    DegenerateLoad { seq: u64, total_g: f64 },
    DeadLettered { seq: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadLetter {
    pub hive_id: String,
    pub seq: u64,
    pub reason: String,
}

/// Reconstructs the point for an accepted message and appends it to `sink`.
///
/// A failed append is retried once before the message is dead-lettered.
pub fn ingest(
    msg: &TelemetryMessage,
    state: &mut HiveIngestState,
    sink: &mut dyn RecordSink,
    epsilon_g: f64,
) -> Result<ComputedPoint, Rejection> {
    state.counters.applied += 1;
    let forces = ForceQuad::from_array(msg.cells_g);
    let total_g = forces.total();
    let pos = match reconstruct_com(&forces, &state.geometry, epsilon_g) {
        Ok(p) => p,
        Err(e) => {
            debug_assert!(matches!(e, PhysicsError::DegenerateLoad { .. }));
            state.counters.degenerate_readings += 1;
            log::debug!("hive {} seq {}: degenerate load {total_g} g", msg.hive_id, msg.seq);
            return Err(Rejection::DegenerateLoad { seq: msg.seq, total_g });
        }
    };
    let record = Record {
        hive_id: msg.hive_id.to_string(),
        seq: msg.seq,
        ts_ms: msg.ts_ms,
        cells_g: msg.cells_g,
        total_g,
        x_mm: pos.x,
        y_mm: pos.y,
    };
    let mut last_err = None;
    for _ in 0..2 {
        match sink.append(&record) {
            Ok(()) => {
                state.counters.persisted += 1;
                return Ok(ComputedPoint {
                    total_g,
                    x: pos.x,
                    y: pos.y,
                    ts_ms: msg.ts_ms,
                    seq: msg.seq,
                });
            }
            Err(e) => {
                state.counters.store_failures += 1;
                last_err = Some(e);
            }
        }
    }
    state.counters.dead_lettered += 1;
    let reason = last_err.map(|e| e.to_string()).unwrap_or_default();
    log::error!("hive {} seq {} dead-lettered: {reason}", msg.hive_id, msg.seq);
    Err(Rejection::DeadLettered { seq: msg.seq, reason })
}

type SinkFactory = dyn Fn(&HiveId) -> Result<(Box<dyn RecordSink>, Option<u64>), StoreError> + Send + Sync;

struct HiveWorker {
    state: HiveIngestState,
    sink: Box<dyn RecordSink>,
}

/// Result of handling one delivery.
#[derive(Debug, Clone, PartialEq)]
pub struct Handled {
    pub outcome: DedupOutcome,
    pub points: Vec<ComputedPoint>,
    pub rejections: Vec<Rejection>,
}

pub struct Hub {
    config: HubConfig,
    sinks: Box<SinkFactory>,
    hives: Mutex<HashMap<HiveId, Arc<Mutex<HiveWorker>>>>,
    malformed: AtomicU64,
    dead_letters: Mutex<Vec<DeadLetter>>,
}

impl Hub {
    /// Hub persisting into the store directory named by the config.
    pub fn new(config: HubConfig) -> Result<Self, HubError> {
        config.validate()?;
        let store = Store::open(&config.store_dir)?;
        Ok(Self::with_sinks(config, move |hive: &HiveId| {
            let log = store.writer(hive.as_str())?;
            let last = log.last_seq();
            Ok((Box::new(log) as Box<dyn RecordSink>, last))
        }))
    }

    /// Hub with a custom sink per hive. The factory also reports the last
    /// seq already persisted so ingestion resumes after it.
    pub fn with_sinks<F>(config: HubConfig, factory: F) -> Self
    where
        F: Fn(&HiveId) -> Result<(Box<dyn RecordSink>, Option<u64>), StoreError> + Send + Sync + 'static,
    {
        Self {
            config,
            sinks: Box::new(factory),
            hives: Mutex::new(HashMap::new()),
            malformed: AtomicU64::new(0),
            dead_letters: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    fn worker(&self, hive: &HiveId) -> Result<Arc<Mutex<HiveWorker>>, HubError> {
        let mut hives = self.hives.lock().expect("hub lock poisoned");
        if let Some(w) = hives.get(hive) {
            return Ok(Arc::clone(w));
        }
        let (sink, last) = (self.sinks)(hive)?;
        let state = HiveIngestState::new(hive.clone(), self.config.geometry_for(hive), self.config.reorder_window)
            .resume_after(last);
        let worker = Arc::new(Mutex::new(HiveWorker { state, sink }));
        hives.insert(hive.clone(), Arc::clone(&worker));
        Ok(worker)
    }

    /// Decodes and applies one delivered payload.
    pub fn handle_delivery(&self, topic: &str, payload: &[u8]) -> Result<Handled, HubError> {
        let parsed = Topic::parse(topic).and_then(|t| decode_message(payload).map(|m| (t, m)));
        let (topic, msg) = match parsed {
            Ok(v) => v,
            Err(e) => {
                self.malformed.fetch_add(1, Ordering::Relaxed);
                return Err(e.into());
            }
        };
        if topic.hive_id() != &msg.hive_id {
            self.malformed.fetch_add(1, Ordering::Relaxed);
            return Err(HubError::TopicMismatch {
                topic: topic.hive_id().to_string(),
                payload: msg.hive_id.to_string(),
            });
        }
        self.handle_message(msg)
    }

    pub fn handle_message(&self, msg: TelemetryMessage) -> Result<Handled, HubError> {
        let worker = self.worker(&msg.hive_id)?;
        let mut w = worker.lock().expect("hive lock poisoned");
        let (outcome, ready) = w.state.offer(msg);
        let (points, rejections) = self.apply(&mut w, ready);
        Ok(Handled {
            outcome,
            points,
            rejections,
        })
    }

    fn apply(&self, w: &mut HiveWorker, ready: Vec<TelemetryMessage>) -> (Vec<ComputedPoint>, Vec<Rejection>) {
        let mut points = Vec::new();
        let mut rejections = Vec::new();
        let HiveWorker { state, sink } = w;
        for msg in ready {
            match ingest(&msg, state, sink.as_mut(), self.config.epsilon_g) {
                Ok(p) => points.push(p),
                Err(r) => {
                    if let Rejection::DeadLettered { seq, reason } = &r {
                        self.dead_letters.lock().expect("dead letter lock poisoned").push(DeadLetter {
                            hive_id: msg.hive_id.to_string(),
                            seq: *seq,
                            reason: reason.clone(),
                        });
                    }
                    rejections.push(r);
                }
            }
        }
        (points, rejections)
    }

    /// Releases every hive's reorder buffer. Call at end of stream.
    pub fn flush(&self) -> Vec<ComputedPoint> {
        let workers: Vec<_> = {
            let hives = self.hives.lock().expect("hub lock poisoned");
            let mut v: Vec<_> = hives.iter().map(|(k, w)| (k.clone(), Arc::clone(w))).collect();
            v.sort_by(|a, b| a.0.cmp(&b.0));
            v
        };
        let mut points = Vec::new();
        for (_, worker) in workers {
            let mut w = worker.lock().expect("hive lock poisoned");
            let ready = w.state.flush();
            points.extend(self.apply(&mut w, ready).0);
        }
        points
    }

    /// Consumes a subscription until the channel closes, then flushes.
    /// Undecodable deliveries are counted and skipped.
    pub fn run(&self, subscription: Subscription) -> HubStatus {
        for delivery in subscription {
            if let Err(e) = self.handle_delivery(&delivery.topic, &delivery.payload) {
                log::warn!("dropping delivery on {}: {e}", delivery.topic);
            }
        }
        self.flush();
        self.status()
    }

    pub fn status(&self) -> HubStatus {
        let hives = self.hives.lock().expect("hub lock poisoned");
        let mut per_hive: Vec<(String, HiveCounters)> = hives
            .iter()
            .map(|(id, w)| (id.to_string(), w.lock().expect("hive lock poisoned").state.counters()))
            .collect();
        per_hive.sort_by(|a, b| a.0.cmp(&b.0));
        HubStatus {
            malformed: self.malformed.load(Ordering::Relaxed),
            dead_letters: self.dead_letters.lock().expect("dead letter lock poisoned").clone(),
            hives: per_hive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HubStatus {
    pub malformed: u64,
    pub dead_letters: Vec<DeadLetter>,
    pub hives: Vec<(String, HiveCounters)>,
}

impl HubStatus {
    pub fn hive(&self, id: &str) -> Option<&HiveCounters> {
        self.hives.iter().find(|(h, _)| h == id).map(|(_, c)| c)
    }

    /// Counters summed over all hives.
    pub fn totals(&self) -> HiveCounters {
        self.hives.iter().fold(HiveCounters::default(), |mut acc, (_, c)| {
            acc.received += c.received;
            acc.applied += c.applied;
            acc.persisted += c.persisted;
            acc.duplicates_dropped += c.duplicates_dropped;
            acc.gaps_detected += c.gaps_detected;
            acc.missing_seqs += c.missing_seqs;
            acc.degenerate_readings += c.degenerate_readings;
            acc.store_failures += c.store_failures;
            acc.dead_lettered += c.dead_lettered;
            acc
        })
    }

    /// Plain-text `key value` dump, one line per counter.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "malformed {}", self.malformed);
        let _ = writeln!(out, "dead_letters {}", self.dead_letters.len());
        for (id, c) in &self.hives {
            for (k, v) in [
                ("received", c.received),
                ("applied", c.applied),
                ("persisted", c.persisted),
                ("duplicates", c.duplicates_dropped),
                ("gaps", c.gaps_detected),
                ("missing_seqs", c.missing_seqs),
                ("degenerate", c.degenerate_readings),
                ("store_failures", c.store_failures),
                ("dead_lettered", c.dead_lettered),
            ] {
                let _ = writeln!(out, "hive.{id}.{k} {v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(seq: u64) -> TelemetryMessage {
        TelemetryMessage {
            hive_id: HiveId::new("h1").unwrap(),
            seq,
            ts_ms: seq * 10,
            cells_g: [250.0; 4],
        }
    }

    fn state(window: usize) -> HiveIngestState {
        HiveIngestState::new(HiveId::new("h1").unwrap(), PlatformGeometry::default(), window)
    }

    fn seqs(v: &[TelemetryMessage]) -> Vec<u64> {
        v.iter().map(|m| m.seq).collect()
    }

    #[test]
    fn dedup_duplicate() {
        let mut s = state(5);
        let outcomes: Vec<DedupOutcome> = [0, 1, 1, 2].into_iter().map(|q| s.offer(msg(q)).0).collect();
        use DedupOutcome::*;
        assert_eq!(outcomes, vec![Accept, Accept, Duplicate, Accept]);
        assert_eq!(s.counters().duplicates_dropped, 1);
        assert_eq!(s.highest_applied_seq(), Some(2));
    }

    #[test]
    fn dedup_reorder() {
        let mut s = state(5);
        assert_eq!(s.offer(msg(0)), (DedupOutcome::Accept, vec![msg(0)]));
        assert_eq!(s.offer(msg(2)), (DedupOutcome::Buffered, vec![]));
        let (o, ready) = s.offer(msg(1));
        assert_eq!(o, DedupOutcome::Accept);
        assert_eq!(seqs(&ready), vec![1, 2]);
        // a duplicate of a buffered seq is also dropped
        s.offer(msg(5));
        assert_eq!(s.offer(msg(5)).0, DedupOutcome::Duplicate);
    }

    #[test]
    fn dedup_gap_after_buffer_full() {
        let mut s = state(5);
        s.offer(msg(0));
        for q in 7..12 {
            assert_eq!(s.offer(msg(q)), (DedupOutcome::Buffered, vec![]));
        }
        assert_eq!(s.pending_len(), 5);
        let (o, ready) = s.offer(msg(12));
        assert_eq!(o, DedupOutcome::Buffered);
        assert_eq!(seqs(&ready), vec![7, 8, 9, 10, 11, 12]);
        assert_eq!(s.counters().gaps_detected, 1);
        assert_eq!(s.counters().missing_seqs, 6);
        assert_eq!(s.highest_applied_seq(), Some(12));
        assert_eq!(s.offer(msg(3)).0, DedupOutcome::Duplicate);
    }

    #[test]
    fn flush_at_end_of_stream() {
        let mut s = state(5);
        s.offer(msg(0));
        s.offer(msg(7));
        assert_eq!(seqs(&s.flush()), vec![7]);
        assert_eq!(s.counters().gaps_detected, 1);
        assert_eq!(s.highest_applied_seq(), Some(7));
    }

    #[test]
    fn zero_window_never_buffers() {
        let mut s = state(0);
        s.offer(msg(0));
        let (o, ready) = s.offer(msg(3));
        assert_eq!(o, DedupOutcome::Buffered);
        assert_eq!(seqs(&ready), vec![3]);
        assert_eq!(s.pending_len(), 0);
    }

    #[derive(Default)]
    struct MemSink {
        records: Arc<Mutex<Vec<Record>>>,
        fail_next: usize,
    }

    impl RecordSink for MemSink {
        fn append(&mut self, r: &Record) -> Result<(), StoreError> {
            if self.fail_next > 0 {
                self.fail_next -= 1;
                return Err(StoreError::Io(std::io::Error::other("disk unplugged")));
            }
            self.records.lock().unwrap().push(r.clone());
            Ok(())
        }
    }

    #[test]
    fn ingest_examples() {
        let mut s = state(5);
        let mut sink = MemSink::default();
        let p = ingest(&msg(0), &mut s, &mut sink, 1.0).unwrap();
        assert_eq!((p.x, p.y, p.total_g), (250.0, 200.0, 1000.0));

        let mut m = msg(1);
        m.cells_g = [10.0, 20.0, 30.0, 40.0];
        let p = ingest(&m, &mut s, &mut sink, 1.0).unwrap();
        assert!((p.x - 350.0).abs() < 1e-12 && (p.y - 200.0).abs() < 1e-12);
        assert_eq!(p.total_g, 100.0);

        let mut m = msg(2);
        m.cells_g = [0.0; 4];
        assert!(matches!(ingest(&m, &mut s, &mut sink, 1.0), Err(Rejection::DegenerateLoad { seq: 2, .. })));
        assert_eq!(sink.records.lock().unwrap().len(), 2);
        assert_eq!(s.counters().degenerate_readings, 1);
    }

    #[test]
    fn store_failure_retried_then_dead_lettered() {
        let mut s = state(5);
        let mut sink = MemSink { fail_next: 1, ..Default::default() };
        assert!(ingest(&msg(0), &mut s, &mut sink, 1.0).is_ok());
        assert_eq!(s.counters().store_failures, 1);
        sink.fail_next = 2;
        assert!(matches!(ingest(&msg(1), &mut s, &mut sink, 1.0), Err(Rejection::DeadLettered { seq: 1, .. })));
        assert_eq!(s.counters().dead_lettered, 1);
        assert_eq!(sink.records.lock().unwrap().len(), 1);
    }

    #[test]
    fn hub_routes_and_counts() {
        let records = Arc::new(Mutex::new(Vec::new()));
        let shared = Arc::clone(&records);
        let hub = Hub::with_sinks(HubConfig::default(), move |_| {
            Ok((Box::new(MemSink { records: Arc::clone(&shared), fail_next: 0 }) as Box<dyn RecordSink>, None))
        });
        let payload = crate::transport::encode_message(&msg(0)).unwrap();
        hub.handle_delivery("apiary/h1/telemetry", &payload).unwrap();
        assert!(matches!(
            hub.handle_delivery("apiary/h2/telemetry", &payload),
            Err(HubError::TopicMismatch { .. })
        ));
        assert!(hub.handle_delivery("apiary/h1/telemetry", b"{").is_err());
        let status = hub.status();
        assert_eq!(status.malformed, 2);
        assert_eq!(status.hive("h1").unwrap().persisted, 1);
        assert!(status.to_text().contains("hive.h1.persisted 1\n"));
        assert_eq!(records.lock().unwrap().len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(HubConfig::default().validate().is_ok());
        let c = HubConfig {
            topic_filter: "a/#/b".into(),
            ..HubConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = HubConfig::default();
        c.geometry.insert("Bad".into(), PlatformGeometry::default());
        assert!(c.validate().is_err());
    }
}
