//! Encoder and decoder for the OpenFlow 1.3 messages the controller exchanges
//! with switches: the handshake, echo heartbeats, flow installation and the
//! PacketOut/PacketIn pair that carries probes and replies.
//!
//! All multi-byte integers are big-endian. Only eight message types are
//! understood; anything else is reported as [`WireError::UnsupportedType`]
//! together with its length so a stream reader can skip over it.

mod framing;
mod oxm;

use bytes::BufMut;
use thiserror::Error;

pub use framing::{frame_stream, StreamFramer};
pub use oxm::{Match, MatchField, MatchFieldKind};

pub const OFP_VERSION: u8 = 0x04;
pub const HEADER_LEN: usize = 8;
pub const DEFAULT_OPENFLOW_PORT: u16 = 6633;

pub const NO_BUFFER: u32 = 0xffff_ffff;
pub const PORT_CONTROLLER: u32 = 0xffff_fffd;
pub const PORT_ANY: u32 = 0xffff_ffff;
pub const GROUP_ANY: u32 = 0xffff_ffff;
/// `max_len` value asking the switch to send the whole frame to the controller.
pub const CML_NO_BUFFER: u16 = 0xffff;

const PACKET_OUT_FIXED: usize = 16;
const PACKET_IN_FIXED: usize = 16;
const FEATURES_REPLY_BODY: usize = 24;
const FLOW_MOD_FIXED: usize = 40;
const ACTION_OUTPUT_LEN: usize = 16;
const OFPAT_OUTPUT: u16 = 0;
const OFPIT_APPLY_ACTIONS: u16 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated message: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported message type {msg_type} ({length} bytes)")]
    UnsupportedType { msg_type: u8, length: usize },
    #[error("bad protocol version 0x{0:02x}")]
    BadVersion(u8),
    #[error("header length {0} is shorter than the header itself")]
    BadLength(u16),
    #[error("malformed {what}")]
    Malformed { what: &'static str },
    #[error("message cannot be encoded: {0}")]
    Unencodable(&'static str),
    #[error("match field {0} appears more than once")]
    DuplicateMatchField(MatchFieldKind),
    #[error("unsupported match field (class {class:#06x}, field {field})")]
    UnsupportedMatchField { class: u16, field: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    EchoRequest = 2,
    EchoReply = 3,
    FeaturesRequest = 5,
    FeaturesReply = 6,
    PacketIn = 10,
    PacketOut = 13,
    FlowMod = 14,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => MsgType::Hello,
            2 => MsgType::EchoRequest,
            3 => MsgType::EchoReply,
            5 => MsgType::FeaturesRequest,
            6 => MsgType::FeaturesReply,
            10 => MsgType::PacketIn,
            13 => MsgType::PacketOut,
            14 => MsgType::FlowMod,
            _ => return None,
        })
    }
}

/// One OpenFlow message. The version byte is implied: always [`OFP_VERSION`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub xid: u32,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Hello,
    EchoRequest(Vec<u8>),
    EchoReply(Vec<u8>),
    FeaturesRequest,
    FeaturesReply(SwitchFeatures),
    FlowMod(FlowMod),
    PacketOut(PacketOut),
    PacketIn(PacketIn),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchFeatures {
    pub datapath_id: u64,
    pub n_buffers: u32,
    pub n_tables: u8,
    pub auxiliary_id: u8,
    pub capabilities: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputAction {
    pub port: u32,
    pub max_len: u16,
}

impl OutputAction {
    pub fn to_port(port: u32) -> Self {
        OutputAction { port, max_len: 0 }
    }

    pub fn to_controller() -> Self {
        OutputAction { port: PORT_CONTROLLER, max_len: CML_NO_BUFFER }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketOut {
    pub buffer_id: u32,
    pub in_port: u32,
    pub actions: Vec<OutputAction>,
    pub frame: Vec<u8>,
}

impl PacketOut {
    /// Unbuffered PacketOut emitting `frame` on `out_port`.
    pub fn new(out_port: u32, frame: Vec<u8>) -> Self {
        PacketOut {
            buffer_id: NO_BUFFER,
            in_port: PORT_CONTROLLER,
            actions: vec![OutputAction::to_port(out_port)],
            frame,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketInReason {
    NoMatch,
    Action,
    InvalidTtl,
}

impl PacketInReason {
    fn to_u8(self) -> u8 {
        match self {
            PacketInReason::NoMatch => 0,
            PacketInReason::Action => 1,
            PacketInReason::InvalidTtl => 2,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(PacketInReason::NoMatch),
            1 => Some(PacketInReason::Action),
            2 => Some(PacketInReason::InvalidTtl),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketIn {
    pub buffer_id: u32,
    pub total_len: u16,
    pub reason: PacketInReason,
    pub table_id: u8,
    pub cookie: u64,
    pub in_port: u32,
    pub frame: Vec<u8>,
}

impl PacketIn {
    pub fn new(in_port: u32, cookie: u64, frame: Vec<u8>) -> Self {
        PacketIn {
            buffer_id: NO_BUFFER,
            total_len: frame.len().min(u16::MAX as usize) as u16,
            reason: PacketInReason::Action,
            table_id: 0,
            cookie,
            in_port,
            frame,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowModCommand {
    Add,
    Modify,
    ModifyStrict,
    Delete,
    DeleteStrict,
}

impl FlowModCommand {
    fn to_u8(self) -> u8 {
        match self {
            FlowModCommand::Add => 0,
            FlowModCommand::Modify => 1,
            FlowModCommand::ModifyStrict => 2,
            FlowModCommand::Delete => 3,
            FlowModCommand::DeleteStrict => 4,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => FlowModCommand::Add,
            1 => FlowModCommand::Modify,
            2 => FlowModCommand::ModifyStrict,
            3 => FlowModCommand::Delete,
            4 => FlowModCommand::DeleteStrict,
            _ => return None,
        })
    }
}

/// A flow-table modification. Actions, when present, are carried in a single
/// apply-actions instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowMod {
    pub cookie: u64,
    pub cookie_mask: u64,
    pub table_id: u8,
    pub command: FlowModCommand,
    pub idle_timeout: u16,
    pub hard_timeout: u16,
    pub priority: u16,
    pub buffer_id: u32,
    pub out_port: u32,
    pub out_group: u32,
    pub flags: u16,
    pub matches: Match,
    pub actions: Vec<OutputAction>,
}

impl FlowMod {
    /// Permanent rule in table 0 sending matching frames to the controller.
    pub fn to_controller(cookie: u64, priority: u16, matches: Match) -> Self {
        FlowMod {
            cookie,
            cookie_mask: 0,
            table_id: 0,
            command: FlowModCommand::Add,
            idle_timeout: 0,
            hard_timeout: 0,
            priority,
            buffer_id: NO_BUFFER,
            out_port: PORT_ANY,
            out_group: GROUP_ANY,
            flags: 0,
            matches,
            actions: vec![OutputAction::to_controller()],
        }
    }
}

impl Message {
    pub fn new(xid: u32, body: Body) -> Self {
        Message { xid, body }
    }

    pub fn version(&self) -> u8 {
        OFP_VERSION
    }

    pub fn msg_type(&self) -> MsgType {
        match self.body {
            Body::Hello => MsgType::Hello,
            Body::EchoRequest(_) => MsgType::EchoRequest,
            Body::EchoReply(_) => MsgType::EchoReply,
            Body::FeaturesRequest => MsgType::FeaturesRequest,
            Body::FeaturesReply(_) => MsgType::FeaturesReply,
            Body::FlowMod(_) => MsgType::FlowMod,
            Body::PacketOut(_) => MsgType::PacketOut,
            Body::PacketIn(_) => MsgType::PacketIn,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode_message(self)
    }
}

/// Encodes `msg` into its wire form.
pub fn encode_message(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(64);
    out.put_u8(OFP_VERSION);
    out.put_u8(msg.msg_type() as u8);
    out.put_u16(0); // patched below
    out.put_u32(msg.xid);

    match &msg.body {
        Body::Hello | Body::FeaturesRequest => {}
        Body::EchoRequest(data) | Body::EchoReply(data) => out.put_slice(data),
        Body::FeaturesReply(f) => {
            out.put_u64(f.datapath_id);
            out.put_u32(f.n_buffers);
            out.put_u8(f.n_tables);
            out.put_u8(f.auxiliary_id);
            out.put_u16(0);
            out.put_u32(f.capabilities);
            out.put_u32(0);
        }
        Body::PacketOut(po) => {
            if po.buffer_id == NO_BUFFER && po.frame.is_empty() {
                return Err(WireError::Unencodable("unbuffered packet-out without a frame"));
            }
            let actions_len = po.actions.len() * ACTION_OUTPUT_LEN;
            if actions_len > u16::MAX as usize {
                return Err(WireError::Unencodable("packet-out action list too long"));
            }
            out.put_u32(po.buffer_id);
            out.put_u32(po.in_port);
            out.put_u16(actions_len as u16);
            out.put_bytes(0, 6);
            for a in &po.actions {
                put_output_action(&mut out, a);
            }
            out.put_slice(&po.frame);
        }
        Body::PacketIn(pi) => {
            if pi.frame.len() > pi.total_len as usize {
                return Err(WireError::Unencodable("packet-in frame longer than total_len"));
            }
            out.put_u32(pi.buffer_id);
            out.put_u16(pi.total_len);
            out.put_u8(pi.reason.to_u8());
            out.put_u8(pi.table_id);
            out.put_u64(pi.cookie);
            oxm::encode_in_port_match(&mut out, pi.in_port);
            out.put_u16(0);
            out.put_slice(&pi.frame);
        }
        Body::FlowMod(fm) => {
            out.put_u64(fm.cookie);
            out.put_u64(fm.cookie_mask);
            out.put_u8(fm.table_id);
            out.put_u8(fm.command.to_u8());
            out.put_u16(fm.idle_timeout);
            out.put_u16(fm.hard_timeout);
            out.put_u16(fm.priority);
            out.put_u32(fm.buffer_id);
            out.put_u32(fm.out_port);
            out.put_u32(fm.out_group);
            out.put_u16(fm.flags);
            out.put_u16(0);
            fm.matches.encode(&mut out);
            if !fm.actions.is_empty() {
                let len = 8 + fm.actions.len() * ACTION_OUTPUT_LEN;
                if len > u16::MAX as usize {
                    return Err(WireError::Unencodable("flow-mod action list too long"));
                }
                out.put_u16(OFPIT_APPLY_ACTIONS);
                out.put_u16(len as u16);
                out.put_u32(0);
                for a in &fm.actions {
                    put_output_action(&mut out, a);
                }
            }
        }
    }

    let len = out.len();
    if len > u16::MAX as usize {
        return Err(WireError::Unencodable("message longer than 65535 bytes"));
    }
    out[2..4].copy_from_slice(&(len as u16).to_be_bytes());
    Ok(out)
}

fn put_output_action(out: &mut Vec<u8>, a: &OutputAction) {
    out.put_u16(OFPAT_OUTPUT);
    out.put_u16(ACTION_OUTPUT_LEN as u16);
    out.put_u32(a.port);
    out.put_u16(a.max_len);
    out.put_bytes(0, 6);
}

/// Decodes the first message in `bytes`, returning it with the number of bytes
/// it occupied.
pub fn decode_message(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated { needed: HEADER_LEN, available: bytes.len() });
    }
    let version = bytes[0];
    if version != OFP_VERSION {
        return Err(WireError::BadVersion(version));
    }
    let raw_type = bytes[1];
    let length = u16::from_be_bytes([bytes[2], bytes[3]]);
    if (length as usize) < HEADER_LEN {
        return Err(WireError::BadLength(length));
    }
    let length = length as usize;
    if bytes.len() < length {
        return Err(WireError::Truncated { needed: length, available: bytes.len() });
    }
    let xid = u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let Some(msg_type) = MsgType::from_u8(raw_type) else {
        return Err(WireError::UnsupportedType { msg_type: raw_type, length });
    };
    let payload = &bytes[HEADER_LEN..length];

    let body = match msg_type {
        // Hello elements (version bitmaps) are accepted and ignored.
        MsgType::Hello => Body::Hello,
        MsgType::FeaturesRequest => Body::FeaturesRequest,
        MsgType::EchoRequest => Body::EchoRequest(payload.to_vec()),
        MsgType::EchoReply => Body::EchoReply(payload.to_vec()),
        MsgType::FeaturesReply => Body::FeaturesReply(decode_features(payload)?),
        MsgType::PacketOut => Body::PacketOut(decode_packet_out(payload)?),
        MsgType::PacketIn => Body::PacketIn(decode_packet_in(payload)?),
        MsgType::FlowMod => Body::FlowMod(decode_flow_mod(payload)?),
    };
    Ok((Message { xid, body }, length))
}

fn decode_features(payload: &[u8]) -> Result<SwitchFeatures, WireError> {
    if payload.len() != FEATURES_REPLY_BODY {
        return Err(WireError::Malformed { what: "features reply length" });
    }
    let mut r = Reader::new(payload, "features reply");
    let datapath_id = r.u64()?;
    let n_buffers = r.u32()?;
    let n_tables = r.u8()?;
    let auxiliary_id = r.u8()?;
    r.skip(2)?;
    let capabilities = r.u32()?;
    Ok(SwitchFeatures { datapath_id, n_buffers, n_tables, auxiliary_id, capabilities })
}

fn decode_packet_out(payload: &[u8]) -> Result<PacketOut, WireError> {
    let mut r = Reader::new(payload, "packet-out");
    if payload.len() < PACKET_OUT_FIXED {
        return Err(WireError::Malformed { what: "packet-out length" });
    }
    let buffer_id = r.u32()?;
    let in_port = r.u32()?;
    let actions_len = r.u16()? as usize;
    r.skip(6)?;
    let actions = decode_actions(r.bytes(actions_len)?)?;
    let frame = r.rest().to_vec();
    Ok(PacketOut { buffer_id, in_port, actions, frame })
}

fn decode_packet_in(payload: &[u8]) -> Result<PacketIn, WireError> {
    if payload.len() < PACKET_IN_FIXED {
        return Err(WireError::Malformed { what: "packet-in length" });
    }
    let mut r = Reader::new(payload, "packet-in");
    let buffer_id = r.u32()?;
    let total_len = r.u16()?;
    let reason = PacketInReason::from_u8(r.u8()?).ok_or(WireError::Malformed { what: "packet-in reason" })?;
    let table_id = r.u8()?;
    let cookie = r.u64()?;
    let in_port = oxm::decode_in_port_match(&mut r)?;
    r.skip(2)?;
    let frame = r.rest().to_vec();
    if frame.len() > total_len as usize {
        return Err(WireError::Malformed { what: "packet-in frame longer than total_len" });
    }
    Ok(PacketIn { buffer_id, total_len, reason, table_id, cookie, in_port, frame })
}

fn decode_flow_mod(payload: &[u8]) -> Result<FlowMod, WireError> {
    if payload.len() < FLOW_MOD_FIXED {
        return Err(WireError::Malformed { what: "flow-mod length" });
    }
    let mut r = Reader::new(payload, "flow-mod");
    let cookie = r.u64()?;
    let cookie_mask = r.u64()?;
    let table_id = r.u8()?;
    let command = FlowModCommand::from_u8(r.u8()?).ok_or(WireError::Malformed { what: "flow-mod command" })?;
    let idle_timeout = r.u16()?;
    let hard_timeout = r.u16()?;
    let priority = r.u16()?;
    let buffer_id = r.u32()?;
    let out_port = r.u32()?;
    let out_group = r.u32()?;
    let flags = r.u16()?;
    r.skip(2)?;
    let matches = Match::decode(&mut r)?;

    let mut actions = Vec::new();
    let mut seen_apply = false;
    while r.remaining() > 0 {
        let ty = r.u16()?;
        let len = r.u16()? as usize;
        if ty != OFPIT_APPLY_ACTIONS || len < 8 || seen_apply {
            return Err(WireError::Malformed { what: "flow-mod instruction" });
        }
        r.skip(4)?;
        actions = decode_actions(r.bytes(len - 8)?)?;
        seen_apply = true;
    }
    Ok(FlowMod {
        cookie,
        cookie_mask,
        table_id,
        command,
        idle_timeout,
        hard_timeout,
        priority,
        buffer_id,
        out_port,
        out_group,
        flags,
        matches,
        actions,
    })
}

fn decode_actions(raw: &[u8]) -> Result<Vec<OutputAction>, WireError> {
    let mut r = Reader::new(raw, "action");
    let mut actions = Vec::new();
    while r.remaining() > 0 {
        let ty = r.u16()?;
        let len = r.u16()? as usize;
        if ty != OFPAT_OUTPUT || len != ACTION_OUTPUT_LEN {
            return Err(WireError::Malformed { what: "action (only output is supported)" });
        }
        let port = r.u32()?;
        let max_len = r.u16()?;
        r.skip(6)?;
        actions.push(OutputAction { port, max_len });
    }
    Ok(actions)
}

/// Bounds-checked big-endian reader over a message body.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, what }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Malformed { what: self.what });
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn skip(&mut self, n: usize) -> Result<(), WireError> {
        self.bytes(n).map(|_| ())
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.bytes(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, WireError> {
        let b = self.bytes(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_be_bytes(a))
    }
}
