//! In-process broker with at-least-once delivery and fault injection.
//!
//! Every subscriber gets its own ordered stream. With faults enabled a
//! publish attempt may be rejected (the publisher sees an error and may
//! retry), a delivered message may be duplicated, and delivery order may be
//! permuted. A message is never delivered later than its publish position and
//! never more than `reorder_window` positions earlier.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Publisher, Topic, TopicFilter, TransportError};

/// Default bound on delivery reordering, in messages.
pub const DEFAULT_REORDER_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultConfig {
    /// Probability that a delivered message is delivered a second time.
    pub duplicate_rate: f64,
    /// Maximum displacement of a message from its publish position.
    /// Zero disables reordering.
    pub reorder_window: usize,
    /// Probability that a publish attempt is rejected without being queued.
    pub drop_rate: f64,
    pub seed: u64,
}

impl FaultConfig {
    pub fn none() -> Self {
        Self {
            duplicate_rate: 0.0,
            reorder_window: 0,
            drop_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        for (name, rate) in [("duplicate_rate", self.duplicate_rate), ("drop_rate", self.drop_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(TransportError::InvalidConfig(format!("{name} must lie in [0, 1], got {rate}")));
            }
        }
        Ok(())
    }
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self::none()
    }
}

/// A message as seen by a subscriber.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub topic: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub publish_attempts: u64,
    pub rejected: u64,
    pub accepted: u64,
    pub duplicated: u64,
    pub delivered: u64,
}

struct Slot {
    filter: TopicFilter,
    tx: Sender<Delivery>,
    pending: VecDeque<(u64, Delivery)>,
    pushed: u64,
}

struct Inner {
    closed: bool,
    rng: ChaCha8Rng,
    slots: Vec<Slot>,
    stats: ChannelStats,
}

pub struct Broker {
    faults: FaultConfig,
    inner: Mutex<Inner>,
}

impl Broker {
    pub fn new(faults: FaultConfig) -> Result<Self, TransportError> {
        faults.validate()?;
        Ok(Self {
            inner: Mutex::new(Inner {
                closed: false,
                rng: ChaCha8Rng::seed_from_u64(faults.seed),
                slots: Vec::new(),
                stats: ChannelStats::default(),
            }),
            faults,
        })
    }

    pub fn reliable() -> Self {
        Self::new(FaultConfig::none()).expect("fault-free config is valid")
    }

    pub fn faults(&self) -> &FaultConfig {
        &self.faults
    }

    /// Registers a subscriber. Only messages published afterwards are seen.
    pub fn subscribe(&self, filter: TopicFilter) -> Result<Subscription, TransportError> {
        let mut inner = self.inner.lock().expect("broker lock poisoned");
        if inner.closed {
            return Err(TransportError::ChannelClosed);
        }
        let (tx, rx) = mpsc::channel();
        inner.slots.push(Slot {
            filter,
            tx,
            pending: VecDeque::new(),
            pushed: 0,
        });
        Ok(Subscription { rx })
    }

    /// Flushes held messages in publish order and disconnects all subscribers.
    pub fn close(&self) {
        let mut inner = self.inner.lock().expect("broker lock poisoned");
        if inner.closed {
            return;
        }
        inner.closed = true;
        let mut delivered = 0;
        for mut slot in inner.slots.drain(..) {
            for (_, d) in slot.pending.drain(..) {
                if slot.tx.send(d).is_ok() {
                    delivered += 1;
                }
            }
        }
        inner.stats.delivered += delivered;
    }

    pub fn stats(&self) -> ChannelStats {
        self.inner.lock().expect("broker lock poisoned").stats
    }
}

impl Publisher for Broker {
    fn publish(&self, topic: &Topic, payload: &[u8]) -> Result<(), TransportError> {
        let topic = topic.to_string();
        let mut guard = self.inner.lock().expect("broker lock poisoned");
        let inner = &mut *guard;
        if inner.closed {
            return Err(TransportError::ChannelClosed);
        }
        inner.stats.publish_attempts += 1;
        if self.faults.drop_rate > 0.0 && inner.rng.random_bool(self.faults.drop_rate) {
            inner.stats.rejected += 1;
            return Err(TransportError::Rejected);
        }
        inner.stats.accepted += 1;

        let window = self.faults.reorder_window;
        for slot in inner.slots.iter_mut().filter(|s| s.filter.matches(&topic)) {
            let copies = if self.faults.duplicate_rate > 0.0 && inner.rng.random_bool(self.faults.duplicate_rate) {
                inner.stats.duplicated += 1;
                2
            } else {
                1
            };
            for _ in 0..copies {
                let delivery = Delivery {
                    topic: topic.clone(),
                    payload: payload.to_vec(),
                };
                let index = slot.pushed;
                slot.pushed += 1;
                slot.pending.push_back((index, delivery));
                while slot.pending.len() > window {
                    let oldest = slot.pending.front().map(|(i, _)| *i).unwrap_or(index);
                    let pick = if oldest + window as u64 <= index {
                        0
                    } else {
                        inner.rng.random_range(0..slot.pending.len())
                    };
                    let (_, d) = slot.pending.remove(pick).expect("index in range");
                    // A dropped receiver just stops listening.
                    if slot.tx.send(d).is_ok() {
                        inner.stats.delivered += 1;
                    }
                }
            }
        }
        Ok(())
    }
}

pub struct Subscription {
    rx: Receiver<Delivery>,
}

impl Subscription {
    /// Blocks for the next delivery; `ChannelClosed` once the broker is closed
    /// and every held message has been received.
    pub fn recv(&self) -> Result<Delivery, TransportError> {
        self.rx.recv().map_err(|_| TransportError::ChannelClosed)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Delivery>, TransportError> {
        match self.rx.recv_timeout(timeout) {
            Ok(d) => Ok(Some(d)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::ChannelClosed),
        }
    }

    pub fn try_iter(&self) -> impl Iterator<Item = Delivery> + '_ {
        self.rx.try_iter()
    }
}

impl Iterator for Subscription {
    type Item = Delivery;

    fn next(&mut self) -> Option<Delivery> {
        self.rx.recv().ok()
    }
}
