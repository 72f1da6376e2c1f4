//! Userspace multipath IP engine plus a deterministic discrete-event
//! network simulator that exercises it.
//!
//! The engine lets one transport session spread its packets over every
//! usable interface pair between two multihomed hosts. Per-packet control
//! data rides piggybacked on ordinary packets, one-way delay feedback
//! drives a weighted path scheduler, and a receive-side reorder buffer
//! shields the transport from multipath reordering. The simulator runs
//! whole host pairs (links, NAT boxes, traffic sources) under a single
//! seeded event loop so every run is reproducible byte for byte.

pub mod handshake;
pub mod metrics;
pub mod path;
pub mod router;
pub mod scenario;
pub mod sim;
pub mod tables;
pub mod transport;
pub mod wire;

pub use metrics::MetricsLog;
pub use scenario::Scenario;
pub use sim::world::World;
