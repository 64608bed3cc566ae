use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::time::Duration;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dataplane_process, SimError, SimTopology};
use crate::ofwire::{
    encode_message, Body, FlowMod, FlowModCommand, Match, MatchField, Message, PacketIn, PacketOut, StreamFramer,
    SwitchFeatures, PORT_CONTROLLER,
};
use crate::pktlab::{self, HeaderFields};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    PacketOut,
    PacketIn,
}

/// One switch-side timing observation. For a PacketOut, `received` is when
/// the message reached the switch and `emitted` when its frame left on the
/// dataplane; for a PacketIn, `received` is when the frame entered the switch
/// and `emitted` when the PacketIn was sent to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchLogEntry {
    pub kind: LogKind,
    pub received_us: u64,
    pub emitted_us: u64,
    pub port: u32,
    /// ICMP type of the frame, when it is ICMP.
    pub icmp_type: Option<u8>,
}

impl SwitchLogEntry {
    pub fn delay(&self) -> Duration {
        Duration::from_micros(self.emitted_us.saturating_sub(self.received_us))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgressFrame {
    pub at: Timestamp,
    pub port: u32,
    pub frame: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwitchStats {
    pub packet_outs: u64,
    pub packet_ins: u64,
    pub table_misses: u64,
    pub echo_replies: u64,
    pub undecodable: u64,
}

#[derive(Debug)]
enum Event {
    Control { bytes: Vec<u8> },
    Emit { port: u32, frame: Vec<u8> },
    Ingress { port: u32, frame: Vec<u8> },
}

#[derive(Debug)]
struct Scheduled {
    at: Timestamp,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap pops the earliest event, ties in scheduling order
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Clone)]
struct FlowEntry {
    priority: u16,
    matches: Match,
    to_controller: bool,
    out_ports: Vec<u32>,
    cookie: u64,
    installed: u64,
}

fn field_matches(f: &MatchField, h: &HeaderFields) -> bool {
    match *f {
        MatchField::EthType(v) => h.eth_type == Some(v),
        MatchField::IpProto(v) => h.ip_proto == Some(v),
        MatchField::Ipv4Dst(v) => h.ipv4_dst == Some(v),
        MatchField::Icmpv4Type(v) => h.icmpv4_type == Some(v),
        MatchField::Icmpv4Code(v) => h.icmpv4_code == Some(v),
    }
}

/// One direction of the control link: FIFO, with delay samples shared by
/// messages sent close together.
#[derive(Debug, Default)]
struct LinkDirection {
    last_sent: Option<Timestamp>,
    last_delay: Duration,
    last_arrival: Timestamp,
}

impl LinkDirection {
    fn arrival(&mut self, sent: Timestamp, topo: &SimTopology, rng: &mut ChaCha8Rng) -> Timestamp {
        let coherent =
            self.last_sent.is_some_and(|prev| sent >= prev && sent.saturating_since(prev) < topo.link_coherence);
        if !coherent {
            self.last_delay = topo.control_link_delay.sample(rng);
        }
        self.last_sent = Some(sent);
        self.last_arrival = (sent + self.last_delay).max(self.last_arrival);
        self.last_arrival
    }
}

/// Simulated switch with its control link. See the module docs.
#[derive(Debug)]
pub struct SimSwitch {
    topo: SimTopology,
    rng: ChaCha8Rng,
    framer: StreamFramer,
    queue: BinaryHeap<Scheduled>,
    next_seq: u64,
    uplink: VecDeque<(Timestamp, Vec<u8>)>,
    down: LinkDirection,
    up: LinkDirection,
    last_emit: Timestamp,
    last_packet_in: Timestamp,
    flows: Vec<FlowEntry>,
    flow_serial: u64,
    next_xid: u32,
    closed: bool,
    log: Vec<SwitchLogEntry>,
    logging: bool,
    egress: Vec<EgressFrame>,
    capture_egress: bool,
    stats: SwitchStats,
}

impl SimSwitch {
    pub fn new(topo: SimTopology, seed: u64) -> Result<Self, SimError> {
        topo.validate()?;
        Ok(SimSwitch {
            topo,
            rng: ChaCha8Rng::seed_from_u64(seed),
            framer: StreamFramer::new(),
            queue: BinaryHeap::new(),
            next_seq: 0,
            uplink: VecDeque::new(),
            down: LinkDirection::default(),
            up: LinkDirection::default(),
            last_emit: Timestamp::ZERO,
            last_packet_in: Timestamp::ZERO,
            flows: Vec::new(),
            flow_serial: 0,
            next_xid: 1,
            closed: false,
            log: Vec::new(),
            logging: true,
            egress: Vec::new(),
            capture_egress: false,
            stats: SwitchStats::default(),
        })
    }

    pub fn topology(&self) -> &SimTopology {
        &self.topo
    }

    pub fn stats(&self) -> SwitchStats {
        self.stats
    }

    pub fn flow_count(&self) -> usize {
        self.flows.len()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn set_logging(&mut self, on: bool) {
        self.logging = on;
    }

    pub fn event_log(&self) -> &[SwitchLogEntry] {
        &self.log
    }

    pub fn take_event_log(&mut self) -> Vec<SwitchLogEntry> {
        std::mem::take(&mut self.log)
    }

    /// Keep a copy of every frame the switch emits on the dataplane.
    pub fn set_capture_egress(&mut self, on: bool) {
        self.capture_egress = on;
    }

    pub fn egress(&self) -> &[EgressFrame] {
        &self.egress
    }

    pub fn take_egress(&mut self) -> Vec<EgressFrame> {
        std::mem::take(&mut self.egress)
    }

    fn schedule(&mut self, at: Timestamp, event: Event) {
        self.next_seq += 1;
        self.queue.push(Scheduled { at, seq: self.next_seq, event });
    }

    /// Sends a message up the control link, generated at `at`.
    fn send_up(&mut self, body: Body, xid: Option<u32>, at: Timestamp) {
        let xid = xid.unwrap_or_else(|| {
            let x = self.next_xid;
            self.next_xid = self.next_xid.wrapping_add(1).max(1);
            x
        });
        let bytes = match encode_message(&Message::new(xid, body)) {
            Ok(b) => b,
            Err(e) => {
                warn!("sim switch cannot encode message: {e}");
                return;
            }
        };
        let arrive = self.up.arrival(at, &self.topo, &mut self.rng);
        self.uplink.push_back((arrive, bytes));
    }

    /// Opens the session by sending Hello to the controller.
    pub fn connect(&mut self, now: Timestamp) {
        self.send_up(Body::Hello, None, now);
    }

    /// Accepts one segment the controller wrote at `sent_at`. Messages
    /// sharing a segment count as bundled.
    pub fn from_controller(&mut self, bytes: Vec<u8>, sent_at: Timestamp) {
        if bytes.is_empty() || self.closed {
            return;
        }
        let arrive = self.down.arrival(sent_at, &self.topo, &mut self.rng);
        self.schedule(arrive, Event::Control { bytes });
    }

    /// A frame arriving on a dataplane port at `at`, as from an external host.
    pub fn inject_frame(&mut self, port: u32, frame: Vec<u8>, at: Timestamp) {
        self.schedule(at, Event::Ingress { port, frame });
    }

    pub fn next_event_time(&self) -> Option<Timestamp> {
        let queued = self.queue.peek().map(|s| s.at);
        let up = self.uplink.front().map(|(t, _)| *t);
        match (queued, up) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Processes every event due at or before `now`.
    pub fn advance(&mut self, now: Timestamp) {
        while self.queue.peek().is_some_and(|s| s.at <= now) {
            let Scheduled { at, event, .. } = self.queue.pop().expect("peeked");
            match event {
                Event::Control { bytes } => self.on_control(bytes, at),
                Event::Emit { port, frame } => self.on_emit(port, frame, at),
                Event::Ingress { port, frame } => self.on_ingress(port, frame, at),
            }
        }
    }

    /// Bytes that have reached the controller by `now`, with arrival times.
    pub fn take_to_controller(&mut self, now: Timestamp) -> Vec<(Timestamp, Vec<u8>)> {
        let mut out = Vec::new();
        while self.uplink.front().is_some_and(|(t, _)| *t <= now) {
            out.push(self.uplink.pop_front().expect("checked"));
        }
        out
    }

    fn on_control(&mut self, bytes: Vec<u8>, at: Timestamp) {
        let messages = match self.framer.push(&bytes) {
            Ok(m) => m,
            Err(e) => {
                warn!("sim switch: control stream desynchronised: {e}");
                self.closed = true;
                return;
            }
        };
        let bundled = messages.len() > 1;
        for msg in messages {
            match msg.body {
                Body::Hello => {}
                Body::FeaturesRequest => {
                    let features = SwitchFeatures {
                        datapath_id: self.topo.switch_dpid,
                        n_buffers: 0,
                        n_tables: 1,
                        auxiliary_id: 0,
                        capabilities: 0,
                    };
                    self.send_up(Body::FeaturesReply(features), Some(msg.xid), at);
                }
                Body::EchoRequest(data) => {
                    self.stats.echo_replies += 1;
                    self.send_up(Body::EchoReply(data), Some(msg.xid), at + self.topo.echo_processing);
                }
                Body::EchoReply(_) => {}
                Body::FlowMod(fm) => self.apply_flow_mod(fm),
                Body::PacketOut(po) => self.on_packet_out(po, bundled, at),
                other => debug!("sim switch ignores {:?}", Message::new(msg.xid, other).msg_type()),
            }
        }
    }

    fn on_packet_out(&mut self, po: PacketOut, bundled: bool, at: Timestamp) {
        self.stats.packet_outs += 1;
        let mut delay = self.topo.pktout_delay.sample(&mut self.rng);
        if bundled {
            delay += self.topo.bundling_penalty.unwrap_or_default();
        }
        // frames leave in arrival order: a slow message holds back later ones
        let emit = (at + delay).max(self.last_emit);
        self.last_emit = emit;
        let port = po.actions.first().map_or(0, |a| a.port);
        if self.logging {
            self.log.push(SwitchLogEntry {
                kind: LogKind::PacketOut,
                received_us: at.as_micros(),
                emitted_us: emit.as_micros(),
                port,
                icmp_type: icmp_type(&po.frame),
            });
        }
        self.schedule(emit, Event::Emit { port, frame: po.frame });
    }

    fn on_emit(&mut self, port: u32, frame: Vec<u8>, at: Timestamp) {
        let replies = dataplane_process(&self.topo, &mut self.rng, &frame, at);
        for (reply, arrive) in replies {
            self.schedule(arrive, Event::Ingress { port, frame: reply });
        }
        if self.capture_egress {
            self.egress.push(EgressFrame { at, port, frame });
        }
    }

    fn on_ingress(&mut self, port: u32, frame: Vec<u8>, at: Timestamp) {
        let fields = pktlab::header_fields(&frame);
        let Some(entry) = self
            .flows
            .iter()
            .filter(|f| f.matches.fields().iter().all(|m| field_matches(m, &fields)))
            .max_by_key(|f| (f.priority, f.installed))
        else {
            self.stats.table_misses += 1;
            return;
        };
        let (to_controller, out_ports, cookie) = (entry.to_controller, entry.out_ports.clone(), entry.cookie);
        for p in out_ports {
            self.schedule(at, Event::Emit { port: p, frame: frame.clone() });
        }
        if to_controller {
            self.stats.packet_ins += 1;
            let sent = (at + self.topo.pktin_delay.sample(&mut self.rng)).max(self.last_packet_in);
            self.last_packet_in = sent;
            if self.logging {
                self.log.push(SwitchLogEntry {
                    kind: LogKind::PacketIn,
                    received_us: at.as_micros(),
                    emitted_us: sent.as_micros(),
                    port,
                    icmp_type: icmp_type(&frame),
                });
            }
            let mut pi = PacketIn::new(port, cookie, frame);
            pi.reason = crate::ofwire::PacketInReason::Action;
            self.send_up(Body::PacketIn(pi), None, sent);
        }
    }

    fn apply_flow_mod(&mut self, fm: FlowMod) {
        let to_controller = fm.actions.iter().any(|a| a.port == PORT_CONTROLLER);
        let out_ports: Vec<u32> = fm.actions.iter().map(|a| a.port).filter(|&p| p != PORT_CONTROLLER).collect();
        let same_rule = |e: &FlowEntry| e.priority == fm.priority && e.matches == fm.matches;
        // non-strict commands cover every rule whose match includes all of the given fields
        let covered = |e: &FlowEntry| fm.matches.fields().iter().all(|f| e.matches.fields().contains(f));
        match fm.command {
            FlowModCommand::Add => {
                self.flows.retain(|e| !same_rule(e));
                self.flow_serial += 1;
                self.flows.push(FlowEntry {
                    priority: fm.priority,
                    matches: fm.matches,
                    to_controller,
                    out_ports,
                    cookie: fm.cookie,
                    installed: self.flow_serial,
                });
            }
            FlowModCommand::Modify | FlowModCommand::ModifyStrict => {
                let strict = fm.command == FlowModCommand::ModifyStrict;
                for e in self.flows.iter_mut().filter(|e| if strict { same_rule(e) } else { covered(e) }) {
                    e.to_controller = to_controller;
                    e.out_ports = out_ports.clone();
                }
            }
            FlowModCommand::Delete => self.flows.retain(|e| !covered(e)),
            FlowModCommand::DeleteStrict => self.flows.retain(|e| !same_rule(e)),
        }
    }
}

fn icmp_type(frame: &[u8]) -> Option<u8> {
    pktlab::header_fields(frame).icmpv4_type
}
