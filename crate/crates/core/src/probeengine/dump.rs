//! Serializable snapshots of engine state, as served by the dump endpoints.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::{ProbeRecord, Termination};

/// `[t_out_us, t_in_us | null, responder | null]` for one probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeEntry(pub u64, pub Option<u64>, pub Option<Ipv4Addr>);

impl ProbeEntry {
    pub fn t_out_us(&self) -> u64 {
        self.0
    }

    pub fn t_in_us(&self) -> Option<u64> {
        self.1
    }

    pub fn responder(&self) -> Option<Ipv4Addr> {
        self.2
    }
}

impl From<&ProbeRecord> for ProbeEntry {
    fn from(r: &ProbeRecord) -> Self {
        ProbeEntry(r.t_out.as_micros(), r.t_in.map(|t| t.as_micros()), r.responder)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PingDump {
    pub target: Ipv4Addr,
    pub num: u32,
    /// Controller-to-switch round trip used to correct this task's probes.
    pub rtt_cs_us: Option<u64>,
    /// True once every probe has either been answered or timed out.
    pub complete: bool,
    /// Indexed by ICMP sequence number.
    pub probes: Vec<ProbeEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracerouteDump {
    pub target: Ipv4Addr,
    pub probes_per_ttl: u16,
    pub rtt_cs_us: Option<u64>,
    pub terminated: Termination,
    /// `hops[ttl - 1]` lists that TTL's probes in index order.
    pub hops: Vec<Vec<ProbeEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterIdDump {
    pub target: Ipv4Addr,
    pub t_out_us: u64,
    pub t_in_us: Option<u64>,
    pub responder: Option<Ipv4Addr>,
    pub asn: Option<u32>,
    pub ident: Option<String>,
    pub complete: bool,
}

/// Ping dump document: keyed by ICMP identifier.
pub type PingDocument = BTreeMap<u16, PingDump>;
pub type TracerouteDocument = BTreeMap<u16, TracerouteDump>;
pub type RouterIdDocument = BTreeMap<u16, RouterIdDump>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub ping: PingDocument,
    pub traceroute: TracerouteDocument,
    pub router_id: RouterIdDocument,
}

impl EngineSnapshot {
    pub fn is_empty(&self) -> bool {
        self.ping.is_empty() && self.traceroute.is_empty() && self.router_id.is_empty()
    }
}
