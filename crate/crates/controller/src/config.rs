//! Daemon configuration file (TOML).
//!
//! ```toml
//! [listen]
//! openflow = "0.0.0.0:6633"
//! http = "0.0.0.0:8080"
//!
//! [probe]
//! src_ip = "192.0.2.10"
//! src_mac = "02:00:00:00:00:01"
//! next_hop_mac = "02:00:00:00:00:fe"
//! default_out_port = 1
//! ewma_alpha = 0.5
//! timeout_ms = 3000
//! max_probes_per_task = 1000
//!
//! [policy]
//! max_probe_rate = 1000.0
//! allowed_tasks = ["ping", "traceroute", "router_id_query", "router_id_serve"]
//! # bucket_depth = 1000.0
//! # auth_token = "secret"
//!
//! [router_id]
//! asn = 65001
//! ident = "edge-1"
//! serve = true
//! ```
//!
//! Every key is optional; omitted keys take the values shown.

use std::net::{Ipv4Addr, SocketAddr};
use std::path::Path;
use std::time::Duration;

use ofprobe_core::controller::{ControllerConfig, DEFAULT_FLOW_PRIORITY};
use ofprobe_core::ofwire::DEFAULT_OPENFLOW_PORT;
use ofprobe_core::pktlab::{MacAddr, RouterIdentity, DEFAULT_PROBE_TTL};
use ofprobe_core::probeengine::{ArpMode, EngineConfig, DEFAULT_ALPHA, DEFAULT_PROBE_TIMEOUT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyConfig, TaskClass};

pub const DEFAULT_HTTP_PORT: u16 = 8080;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaemonConfig {
    pub listen: ListenConfig,
    pub probe: ProbeConfig,
    pub policy: PolicyConfig,
    pub router_id: RouterIdConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ListenConfig {
    pub openflow: SocketAddr,
    pub http: SocketAddr,
}

impl Default for ListenConfig {
    fn default() -> Self {
        ListenConfig {
            openflow: SocketAddr::from(([0, 0, 0, 0], DEFAULT_OPENFLOW_PORT)),
            http: SocketAddr::from(([0, 0, 0, 0], DEFAULT_HTTP_PORT)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub src_ip: Ipv4Addr,
    pub src_mac: MacAddr,
    pub next_hop_mac: MacAddr,
    pub ttl: u8,
    pub default_out_port: u32,
    pub ewma_alpha: f64,
    pub timeout_ms: u64,
    /// Spacing between traceroute probes; 0 sends all TTLs at once.
    pub traceroute_gap_ms: u64,
    pub flow_priority: u16,
    pub max_probes_per_task: u32,
    pub gratuitous_arp: ArpMode,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        ProbeConfig {
            src_ip: engine.probe_src_ip,
            src_mac: engine.probe_src_mac,
            next_hop_mac: engine.next_hop_mac,
            ttl: DEFAULT_PROBE_TTL,
            default_out_port: 1,
            ewma_alpha: DEFAULT_ALPHA,
            timeout_ms: DEFAULT_PROBE_TIMEOUT.as_millis() as u64,
            traceroute_gap_ms: 0,
            flow_priority: DEFAULT_FLOW_PRIORITY,
            max_probes_per_task: 1000,
            gratuitous_arp: ArpMode::PerTask,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterIdConfig {
    pub asn: Option<u32>,
    pub ident: Option<String>,
    pub serve: bool,
}

impl RouterIdConfig {
    pub fn identity(&self) -> Result<Option<RouterIdentity>, ConfigError> {
        match (self.asn, &self.ident) {
            (Some(asn), Some(ident)) => {
                RouterIdentity::new(asn, ident.clone()).map(Some).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
            (None, None) => Ok(None),
            _ => Err(ConfigError::Invalid("router_id needs both asn and ident".into())),
        }
    }
}

impl DaemonConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: DaemonConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.probe;
        if !(p.ewma_alpha > 0.0 && p.ewma_alpha <= 1.0) {
            return Err(ConfigError::Invalid(format!("ewma_alpha must be in (0, 1], got {}", p.ewma_alpha)));
        }
        if p.ttl == 0 {
            return Err(ConfigError::Invalid("probe ttl must be at least 1".into()));
        }
        if p.max_probes_per_task == 0 {
            return Err(ConfigError::Invalid("max_probes_per_task must be at least 1".into()));
        }
        self.policy.validate().map_err(ConfigError::Invalid)?;
        let identity = self.router_id.identity()?;
        if self.router_id.serve {
            if identity.is_none() {
                return Err(ConfigError::Invalid("router_id.serve needs asn and ident".into()));
            }
            if !self.policy.allows(TaskClass::RouterIdServe) {
                return Err(ConfigError::Invalid(
                    "router_id.serve is set but policy does not allow router_id_serve".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn controller_config(&self) -> Result<ControllerConfig, ConfigError> {
        let p = &self.probe;
        Ok(ControllerConfig {
            engine: EngineConfig {
                probe_src_ip: p.src_ip,
                probe_src_mac: p.src_mac,
                next_hop_mac: p.next_hop_mac,
                probe_ttl: p.ttl,
                ewma_alpha: p.ewma_alpha,
                probe_timeout: Duration::from_millis(p.timeout_ms),
                traceroute_gap: Duration::from_millis(p.traceroute_gap_ms),
                router_identity: self.router_id.identity()?,
                serve_router_id: self.router_id.serve,
                gratuitous_arp: p.gratuitous_arp,
            },
            flow_priority: p.flow_priority,
            default_out_port: p.default_out_port,
        })
    }
}
