//! OpenFlow-driven active network measurement.
//!
//! A controller injects ICMP probes through OpenFlow switches with PacketOut,
//! collects replies delivered as PacketIn, and subtracts the controller to
//! switch round trip (sampled with echo heartbeats) from each probe's elapsed
//! time. The crate is sans-IO: sessions, the probe engine and the simulated
//! switch consume bytes and timestamps and produce bytes, so the same code runs
//! over TCP or inside the deterministic [`testbed`].

pub mod calibration;
pub mod controller;
pub mod netsim;
pub mod ofwire;
pub mod pktlab;
pub mod probeengine;
pub mod report;
pub mod session;
pub mod testbed;
pub mod time;

pub use time::{Clock, MonotonicClock, Timestamp, Timestamped, VirtualClock};
