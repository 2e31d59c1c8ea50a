//! Telemetry schema and delivery between sensor nodes and the hub.
//!
//! Messages travel on `apiary/<hive_id>/telemetry` as canonical JSON. The
//! in-process [`Broker`] and the TCP transport both implement [`Publisher`], so
//! a real MQTT client can take their place at the edges.

mod channel;
mod message;
pub mod tcp;
mod topic;

use thiserror::Error;

pub use channel::{Broker, ChannelStats, Delivery, FaultConfig, Subscription, DEFAULT_REORDER_WINDOW};
pub use message::{decode_message, encode_message, HiveId, TelemetryMessage, HIVE_ID_MAX_LEN};
pub use topic::{Topic, TopicFilter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
    #[error("channel closed")]
    ChannelClosed,
    #[error("publish rejected")]
    Rejected,
    #[error("invalid transport config: {0}")]
    InvalidConfig(String),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
    #[error("bad frame: {0}")]
    BadFrame(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

/// Sink for published telemetry. Must accept concurrent publishes.
///
/// `Ok(())` is an acknowledgement: the message will be delivered at least once.
pub trait Publisher: Send + Sync {
    fn publish(&self, topic: &Topic, payload: &[u8]) -> Result<(), TransportError>;
}

impl<P: Publisher + ?Sized> Publisher for std::sync::Arc<P> {
    fn publish(&self, topic: &Topic, payload: &[u8]) -> Result<(), TransportError> {
        (**self).publish(topic, payload)
    }
}

impl<P: Publisher + ?Sized> Publisher for &P {
    fn publish(&self, topic: &Topic, payload: &[u8]) -> Result<(), TransportError> {
        (**self).publish(topic, payload)
    }
}
