//! Simulated OpenFlow switch and virtual IP network.
//!
//! [`SimSwitch`] is a discrete-event model of one switch plus its control
//! link: it consumes controller bytes and injected frames with the times they
//! were sent, and produces bytes for the controller stamped with the time
//! they arrive. Delays come from [`DelayModel`]s drawn with a seeded RNG, so a
//! run under a virtual clock is reproducible bit for bit.

mod dataplane;
mod delay;
mod switch;
mod topology;

use std::net::Ipv4Addr;

use thiserror::Error;

use crate::ofwire::WireError;

pub use dataplane::dataplane_process;
pub use delay::{DelayModel, MixtureComponent};
pub use switch::{EgressFrame, LogKind, SimSwitch, SwitchLogEntry, SwitchStats};
pub use topology::{
    HopSpec, RouterIdHost, SimTopology, TargetSpec, DEFAULT_BUNDLING_PENALTY, DEFAULT_LINK_COHERENCE, SEED_ENV,
    TOPOLOGY_FORMAT,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("{0} is not a target in the topology")]
    UnknownTarget(Ipv4Addr),
    #[error("could not connect to controller: {0}")]
    ConnectFailed(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}
