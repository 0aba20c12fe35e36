//! Deterministic simulator of online multi-AGV scheduling in a grid smart
//! factory: an SA+LNS task-assignment solver and a congestion-aware
//! spatiotemporal A* router coupled to a slotted, retransmission-free
//! multi-link contention channel, driven by a closed uplink/downlink loop.

pub mod agv;
pub mod assignment;
pub mod config;
pub mod grid;
pub mod mrta;
pub mod netsim;
pub mod rng;
pub mod router;
pub mod sim;
pub mod task;
pub mod timing;
