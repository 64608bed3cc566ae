//! Simulated network description and its TOML file format.
//!
//! ```toml
//! format = "ofprobe-topology/1"
//! switch_dpid = 1
//! ports = [1, 2]
//! seed = 7                    # optional; OFPROBE_SIM_SEED overrides
//! echo_processing_ms = 0.0    # optional
//! bundling_penalty_us = 17    # optional; absent disables the penalty
//! link_coherence_us = 1000    # optional; messages this close share one link delay
//!
//! [control_link_delay]        # one-way, each direction
//! kind = "constant"
//! ms = 5.0
//!
//! [pktout_delay]              # optional; defaults to the calibrated mixture
//! kind = "mixture"
//! components = [
//!   { p = 0.97, model = { kind = "uniform", lo_ms = 1.5, hi_ms = 2.0 } },
//!   { p = 0.03, model = { kind = "constant", ms = 23.0 } },
//! ]
//!
//! [[target]]
//! ip = "198.51.100.7"
//! base_rtt_ms = 50.0
//! loss_prob = 0.0             # optional
//! responds = true             # optional
//! hops = [{ ip = "10.0.0.1", delay_ms = 2.0 }, { ip = "10.0.1.1", delay_ms = 3.0 }]
//!
//! [[router_id_host]]
//! ip = "10.0.0.1"
//! asn = 65001
//! ident = "core-rtr-1"
//! rtt_ms = 1.0                # optional; a target's base RTT wins when both exist
//! ```

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DelayModel, SimError};
use crate::pktlab::RouterIdentity;

pub const TOPOLOGY_FORMAT: &str = "ofprobe-topology/1";
pub const SEED_ENV: &str = "OFPROBE_SIM_SEED";
pub const DEFAULT_BUNDLING_PENALTY: Duration = Duration::from_micros(17);
pub const DEFAULT_LINK_COHERENCE: Duration = Duration::from_millis(1);
const DEFAULT_ROUTER_ID_RTT: Duration = Duration::from_millis(1);

#[derive(Debug, Clone, PartialEq)]
pub struct HopSpec {
    pub ip: Ipv4Addr,
    /// One-way delay from the previous node.
    pub delay: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub base_rtt: Duration,
    pub loss_prob: f64,
    pub hops: Vec<HopSpec>,
    pub responds: bool,
}

impl TargetSpec {
    pub fn new(base_rtt: Duration) -> Self {
        TargetSpec { base_rtt, loss_prob: 0.0, hops: Vec::new(), responds: true }
    }

    pub fn with_hops(mut self, hops: impl IntoIterator<Item = (Ipv4Addr, Duration)>) -> Self {
        self.hops = hops.into_iter().map(|(ip, delay)| HopSpec { ip, delay }).collect();
        self
    }

    pub fn with_loss(mut self, p: f64) -> Self {
        self.loss_prob = p;
        self
    }

    pub fn silent(mut self) -> Self {
        self.responds = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterIdHost {
    pub identity: RouterIdentity,
    pub rtt: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTopology {
    pub switch_dpid: u64,
    pub ports: Vec<u32>,
    pub targets: BTreeMap<Ipv4Addr, TargetSpec>,
    /// One-way delay applied independently to each control-channel direction.
    pub control_link_delay: DelayModel,
    /// A message sent within this long of the previous one in the same
    /// direction reuses its delay sample: back-to-back writes on one TCP
    /// stream see the same queues. Zero samples every message.
    pub link_coherence: Duration,
    pub pktout_delay: DelayModel,
    pub pktin_delay: DelayModel,
    /// Extra time the switch takes to answer an echo request.
    pub echo_processing: Duration,
    /// Added to each PacketOut that arrived in a segment carrying several messages.
    pub bundling_penalty: Option<Duration>,
    pub router_id_hosts: BTreeMap<Ipv4Addr, RouterIdHost>,
    pub seed: Option<u64>,
}

impl Default for SimTopology {
    fn default() -> Self {
        SimTopology {
            switch_dpid: 1,
            ports: vec![1, 2],
            targets: BTreeMap::new(),
            control_link_delay: DelayModel::zero(),
            link_coherence: DEFAULT_LINK_COHERENCE,
            pktout_delay: DelayModel::default_packet_out(),
            pktin_delay: DelayModel::default_packet_in(),
            echo_processing: Duration::ZERO,
            bundling_penalty: None,
            router_id_hosts: BTreeMap::new(),
            seed: None,
        }
    }
}

impl SimTopology {
    pub fn validate(&self) -> Result<(), SimError> {
        self.control_link_delay.validate()?;
        self.pktout_delay.validate()?;
        self.pktin_delay.validate()?;
        for (ip, t) in &self.targets {
            if !(0.0..=1.0).contains(&t.loss_prob) {
                return Err(SimError::InvalidTopology(format!("{ip}: loss_prob {} outside [0, 1]", t.loss_prob)));
            }
            let path: Duration = t.hops.iter().map(|h| h.delay).sum();
            if path > t.base_rtt / 2 {
                return Err(SimError::InvalidTopology(format!(
                    "{ip}: hop delays sum to {path:?}, more than half the base RTT {:?}",
                    t.base_rtt
                )));
            }
            if t.hops.len() >= 255 {
                return Err(SimError::InvalidTopology(format!("{ip}: too many hops")));
            }
        }
        for (ip, h) in &self.router_id_hosts {
            RouterIdentity::new(h.identity.asn, h.identity.ident.clone())
                .map_err(|e| SimError::InvalidTopology(format!("{ip}: {e}")))?;
        }
        Ok(())
    }

    /// The simulator's oracle: the configured base RTT of `target`.
    pub fn ground_truth_rtt(&self, target: Ipv4Addr) -> Result<Duration, SimError> {
        self.targets.get(&target).map(|t| t.base_rtt).ok_or(SimError::UnknownTarget(target))
    }

    pub(crate) fn router_id_rtt(&self, host: Ipv4Addr) -> Option<Duration> {
        let h = self.router_id_hosts.get(&host)?;
        Some(match self.targets.get(&host) {
            Some(t) => t.base_rtt,
            None => h.rtt.unwrap_or(DEFAULT_ROUTER_ID_RTT),
        })
    }

    /// Seed from `OFPROBE_SIM_SEED` if set, else the topology's, else 0.
    pub fn resolve_seed(&self) -> Result<u64, SimError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| SimError::InvalidTopology(format!("{SEED_ENV}={v:?} is not a u64"))),
            Err(_) => Ok(self.seed.unwrap_or(0)),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let file: TopologyFile = toml::from_str(text).map_err(|e| SimError::InvalidTopology(e.to_string()))?;
        file.try_into()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&TopologyFile::from(self)).expect("topology serializes")
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn from_ms(what: &str, v: f64) -> Result<Duration, SimError> {
    if v.is_finite() && v >= 0.0 {
        Ok(Duration::from_micros((v * 1e3).round() as u64))
    } else {
        Err(SimError::InvalidTopology(format!("{what}: {v} ms is not a valid delay")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    format: String,
    #[serde(default = "default_dpid")]
    switch_dpid: u64,
    #[serde(default = "default_ports")]
    ports: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default)]
    echo_processing_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bundling_penalty_us: Option<u64>,
    #[serde(default = "default_coherence_us")]
    link_coherence_us: u64,
    #[serde(default = "DelayModel::zero")]
    control_link_delay: DelayModel,
    #[serde(default = "DelayModel::default_packet_out")]
    pktout_delay: DelayModel,
    #[serde(default = "DelayModel::default_packet_in")]
    pktin_delay: DelayModel,
    #[serde(default, rename = "target")]
    targets: Vec<TargetEntry>,
    #[serde(default, rename = "router_id_host")]
    router_id_hosts: Vec<RouterIdEntry>,
}

fn default_coherence_us() -> u64 {
    DEFAULT_LINK_COHERENCE.as_micros() as u64
}

fn default_dpid() -> u64 {
    1
}

fn default_ports() -> Vec<u32> {
    vec![1, 2]
}

fn yes() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetEntry {
    ip: Ipv4Addr,
    base_rtt_ms: f64,
    #[serde(default)]
    loss_prob: f64,
    #[serde(default = "yes")]
    responds: bool,
    #[serde(default)]
    hops: Vec<HopEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HopEntry {
    ip: Ipv4Addr,
    delay_ms: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouterIdEntry {
    ip: Ipv4Addr,
    asn: u32,
    ident: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rtt_ms: Option<f64>,
}

impl TryFrom<TopologyFile> for SimTopology {
    type Error = SimError;

    fn try_from(f: TopologyFile) -> Result<Self, SimError> {
        if f.format != TOPOLOGY_FORMAT {
            return Err(SimError::InvalidTopology(format!(
                "unsupported format {:?}, expected {TOPOLOGY_FORMAT:?}",
                f.format
            )));
        }
        let mut targets = BTreeMap::new();
        for t in f.targets {
            let hops = t
                .hops
                .iter()
                .map(|h| Ok(HopSpec { ip: h.ip, delay: from_ms("hop delay", h.delay_ms)? }))
                .collect::<Result<_, SimError>>()?;
            let spec = TargetSpec {
                base_rtt: from_ms("base_rtt_ms", t.base_rtt_ms)?,
                loss_prob: t.loss_prob,
                hops,
                responds: t.responds,
            };
            if targets.insert(t.ip, spec).is_some() {
                return Err(SimError::InvalidTopology(format!("target {} listed twice", t.ip)));
            }
        }
        let mut router_id_hosts = BTreeMap::new();
        for h in f.router_id_hosts {
            let identity =
                RouterIdentity::new(h.asn, h.ident).map_err(|e| SimError::InvalidTopology(format!("{}: {e}", h.ip)))?;
            let rtt = h.rtt_ms.map(|v| from_ms("rtt_ms", v)).transpose()?;
            router_id_hosts.insert(h.ip, RouterIdHost { identity, rtt });
        }
        let topo = SimTopology {
            switch_dpid: f.switch_dpid,
            ports: f.ports,
            targets,
            control_link_delay: f.control_link_delay,
            link_coherence: Duration::from_micros(f.link_coherence_us),
            pktout_delay: f.pktout_delay,
            pktin_delay: f.pktin_delay,
            echo_processing: from_ms("echo_processing_ms", f.echo_processing_ms)?,
            bundling_penalty: f.bundling_penalty_us.map(Duration::from_micros),
            router_id_hosts,
            seed: f.seed,
        };
        topo.validate()?;
        Ok(topo)
    }
}

impl From<&SimTopology> for TopologyFile {
    fn from(t: &SimTopology) -> Self {
        TopologyFile {
            format: TOPOLOGY_FORMAT.to_string(),
            switch_dpid: t.switch_dpid,
            ports: t.ports.clone(),
            seed: t.seed,
            echo_processing_ms: ms(t.echo_processing),
            bundling_penalty_us: t.bundling_penalty.map(|d| d.as_micros() as u64),
            link_coherence_us: t.link_coherence.as_micros() as u64,
            control_link_delay: t.control_link_delay.clone(),
            pktout_delay: t.pktout_delay.clone(),
            pktin_delay: t.pktin_delay.clone(),
            targets: t
                .targets
                .iter()
                .map(|(ip, s)| TargetEntry {
                    ip: *ip,
                    base_rtt_ms: ms(s.base_rtt),
                    loss_prob: s.loss_prob,
                    responds: s.responds,
                    hops: s.hops.iter().map(|h| HopEntry { ip: h.ip, delay_ms: ms(h.delay) }).collect(),
                })
                .collect(),
            router_id_hosts: t
                .router_id_hosts
                .iter()
                .map(|(ip, h)| RouterIdEntry {
                    ip: *ip,
                    asn: h.identity.asn,
                    ident: h.identity.ident.clone(),
                    rtt_ms: h.rtt.map(ms),
                })
                .collect(),
        }
    }
}
