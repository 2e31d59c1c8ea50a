//! Weighing-platform hive monitor: load-cell physics, a simulated sensor
//! node, a faulty telemetry transport, the ingesting hub, an append-only
//! store and trajectory analysis.

pub mod analysis;
pub mod hub;
pub mod node;
pub mod physics;
pub mod pipeline;
pub mod scenario;
pub mod store;
pub mod transport;
