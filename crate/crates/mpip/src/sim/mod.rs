//! Deterministic discrete-event network simulator the engine runs in.

pub mod link;
pub mod nat;
pub mod node;
pub mod packet;
pub mod traffic;
pub mod world;
