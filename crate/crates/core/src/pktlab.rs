//! Ethernet/ARP/IPv4/ICMP frame construction and parsing for measurement probes
//! and their replies, including the router-identity query (ICMP type 200).

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ETH_HEADER_LEN: usize = 14;
pub const IPV4_HEADER_LEN: usize = 20;
pub const ICMP_HEADER_LEN: usize = 8;
pub const IP_MTU: usize = 1500;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const IPPROTO_ICMP: u8 = 1;

pub const ICMP_ECHO_REPLY: u8 = 0;
pub const ICMP_ECHO_REQUEST: u8 = 8;
pub const ICMP_TIME_EXCEEDED: u8 = 11;
pub const ICMP_ROUTER_ID: u8 = 200;
pub const ROUTER_ID_QUERY_CODE: u8 = 0;
pub const ROUTER_ID_REPLY_CODE: u8 = 1;

pub const DEFAULT_PROBE_TTL: u8 = 64;
const REPLY_TTL: u8 = 64;
pub const MAX_IDENT_LEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("malformed frame: {0}")]
    MalformedFrame(&'static str),
    #[error("frame would carry a {size}-byte IP datagram, above the {IP_MTU}-byte MTU")]
    PayloadTooLarge { size: usize },
    #[error("ttl must be at least 1")]
    InvalidTtl,
    #[error("invalid router identity: {0}")]
    InvalidIdentity(&'static str),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const BROADCAST: MacAddr = MacAddr([0xff; 6]);

    pub fn octets(&self) -> [u8; 6] {
        self.0
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.0;
        write!(f, "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", o[0], o[1], o[2], o[3], o[4], o[5])
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid MAC address {0:?}")]
pub struct ParseMacError(String);

impl FromStr for MacAddr {
    type Err = ParseMacError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split([':', '-']);
        for byte in out.iter_mut() {
            let part = parts.next().ok_or_else(|| ParseMacError(s.to_string()))?;
            if part.len() != 2 {
                return Err(ParseMacError(s.to_string()));
            }
            *byte = u8::from_str_radix(part, 16).map_err(|_| ParseMacError(s.to_string()))?;
        }
        if parts.next().is_some() {
            return Err(ParseMacError(s.to_string()));
        }
        Ok(MacAddr(out))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Source and destination addressing for a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Addressing {
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoProbe {
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub ttl: u8,
    pub icmp_id: u16,
    pub icmp_seq: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RouterIdentity {
    pub asn: u32,
    pub ident: String,
}

impl RouterIdentity {
    pub fn new(asn: u32, ident: impl Into<String>) -> Result<Self, PacketError> {
        let ident = ident.into();
        if ident.is_empty() {
            return Err(PacketError::InvalidIdentity("identifier is empty"));
        }
        if ident.len() > MAX_IDENT_LEN {
            return Err(PacketError::InvalidIdentity("identifier longer than 64 bytes"));
        }
        Ok(RouterIdentity { asn, ident })
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.ident.len());
        out.extend_from_slice(&self.asn.to_be_bytes());
        out.push(self.ident.len() as u8);
        out.extend_from_slice(self.ident.as_bytes());
        out
    }

    fn decode(raw: &[u8]) -> Option<Self> {
        if raw.len() < 5 {
            return None;
        }
        let asn = u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]);
        let len = raw[4] as usize;
        let ident = std::str::from_utf8(raw.get(5..5 + len)?).ok()?;
        RouterIdentity::new(asn, ident).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplyKind {
    EchoReply,
    TimeExceeded,
    RouterIdReply(RouterIdentity),
    Other,
}

/// A dataplane frame delivered to the controller, classified for correlation
/// with outstanding probes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub kind: ReplyKind,
    /// IPv4 source of the reply; unspecified for non-IPv4 frames.
    pub responder_ip: Ipv4Addr,
    /// For Time Exceeded these come from the quoted probe.
    pub icmp_id: u16,
    pub icmp_seq: u16,
    pub payload: Vec<u8>,
}

impl ParsedReply {
    fn other(responder_ip: Ipv4Addr) -> Self {
        ParsedReply { kind: ReplyKind::Other, responder_ip, icmp_id: 0, icmp_seq: 0, payload: Vec::new() }
    }
}

/// Header fields of an ICMP-over-IPv4 frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcmpPacket {
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub ttl: u8,
    pub icmp_type: u8,
    pub icmp_code: u8,
    pub icmp_id: u16,
    pub icmp_seq: u16,
    pub payload: Vec<u8>,
}

/// Classic ones-complement Internet checksum.
pub fn internet_checksum(data: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u16::from_be_bytes([c[0], c[1]]) as u32;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u32) << 8;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn put_eth(out: &mut Vec<u8>, dst: MacAddr, src: MacAddr, ethertype: u16) {
    out.extend_from_slice(&dst.0);
    out.extend_from_slice(&src.0);
    out.extend_from_slice(&ethertype.to_be_bytes());
}

#[allow(clippy::too_many_arguments)]
fn build_icmp_frame(
    addr: &Addressing,
    ttl: u8,
    ip_id: u16,
    icmp_type: u8,
    icmp_code: u8,
    rest: [u8; 4],
    payload: &[u8],
) -> Result<Vec<u8>, PacketError> {
    if ttl == 0 {
        return Err(PacketError::InvalidTtl);
    }
    let ip_len = IPV4_HEADER_LEN + ICMP_HEADER_LEN + payload.len();
    if ip_len > IP_MTU {
        return Err(PacketError::PayloadTooLarge { size: ip_len });
    }
    let mut out = Vec::with_capacity(ETH_HEADER_LEN + ip_len);
    put_eth(&mut out, addr.dst_mac, addr.src_mac, ETHERTYPE_IPV4);

    let ip_start = out.len();
    out.push(0x45);
    out.push(0);
    out.extend_from_slice(&(ip_len as u16).to_be_bytes());
    out.extend_from_slice(&ip_id.to_be_bytes());
    out.extend_from_slice(&[0, 0]);
    out.push(ttl);
    out.push(IPPROTO_ICMP);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&addr.src_ip.octets());
    out.extend_from_slice(&addr.dst_ip.octets());
    let csum = internet_checksum(&out[ip_start..]);
    out[ip_start + 10..ip_start + 12].copy_from_slice(&csum.to_be_bytes());

    let icmp_start = out.len();
    out.push(icmp_type);
    out.push(icmp_code);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&rest);
    out.extend_from_slice(payload);
    let csum = internet_checksum(&out[icmp_start..]);
    out[icmp_start + 2..icmp_start + 4].copy_from_slice(&csum.to_be_bytes());
    Ok(out)
}

fn id_seq(icmp_id: u16, icmp_seq: u16) -> [u8; 4] {
    let [a, b] = icmp_id.to_be_bytes();
    let [c, d] = icmp_seq.to_be_bytes();
    [a, b, c, d]
}

pub fn build_echo_request(p: &EchoProbe) -> Result<Vec<u8>, PacketError> {
    let addr = Addressing { src_mac: p.src_mac, dst_mac: p.dst_mac, src_ip: p.src_ip, dst_ip: p.dst_ip };
    build_icmp_frame(&addr, p.ttl, p.icmp_seq, ICMP_ECHO_REQUEST, 0, id_seq(p.icmp_id, p.icmp_seq), &p.payload)
}

/// The reply a target host would send for an echo request frame.
pub fn build_echo_reply(request: &[u8]) -> Result<Vec<u8>, PacketError> {
    let req = inspect_icmp(request)?.ok_or(PacketError::MalformedFrame("not an ICMP over IPv4 frame"))?;
    if req.icmp_type != ICMP_ECHO_REQUEST {
        return Err(PacketError::MalformedFrame("not an echo request"));
    }
    let addr = Addressing { src_mac: req.dst_mac, dst_mac: req.src_mac, src_ip: req.dst_ip, dst_ip: req.src_ip };
    build_icmp_frame(
        &addr,
        REPLY_TTL,
        req.icmp_seq,
        ICMP_ECHO_REPLY,
        0,
        id_seq(req.icmp_id, req.icmp_seq),
        &req.payload,
    )
}

/// ICMP Time Exceeded sent by `router_ip` for `original_frame`, quoting the
/// original IPv4 header and the first 8 bytes of its payload.
pub fn build_time_exceeded(router_ip: Ipv4Addr, original_frame: &[u8]) -> Result<Vec<u8>, PacketError> {
    let ip = ipv4_slice(original_frame)?;
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    let quote_len = (ihl + 8).min(ip.len());
    let quote = &ip[..quote_len];
    let addr = Addressing {
        src_mac: mac_at(original_frame, 0),
        dst_mac: mac_at(original_frame, 6),
        src_ip: router_ip,
        dst_ip: Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
    };
    build_icmp_frame(&addr, REPLY_TTL, 0, ICMP_TIME_EXCEEDED, 0, [0; 4], quote)
}

/// Unsolicited ARP reply announcing `ip` at `mac`.
pub fn build_gratuitous_arp(ip: Ipv4Addr, mac: MacAddr) -> Vec<u8> {
    let mut out = Vec::with_capacity(42);
    put_eth(&mut out, MacAddr::BROADCAST, mac, ETHERTYPE_ARP);
    out.extend_from_slice(&1u16.to_be_bytes()); // ethernet
    out.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    out.push(6);
    out.push(4);
    out.extend_from_slice(&2u16.to_be_bytes()); // reply
    out.extend_from_slice(&mac.0);
    out.extend_from_slice(&ip.octets());
    out.extend_from_slice(&MacAddr::BROADCAST.0);
    out.extend_from_slice(&ip.octets());
    out
}

pub fn build_router_id_query(addr: &Addressing, icmp_id: u16, icmp_seq: u16) -> Vec<u8> {
    build_icmp_frame(addr, REPLY_TTL, icmp_seq, ICMP_ROUTER_ID, ROUTER_ID_QUERY_CODE, id_seq(icmp_id, icmp_seq), &[])
        .expect("fixed-size query always fits")
}

/// Answers a router-ID query frame with `identity`, addressed back to the querier.
pub fn build_router_id_reply(query_frame: &[u8], identity: &RouterIdentity) -> Result<Vec<u8>, PacketError> {
    let q = parse_router_id_query(query_frame)?;
    let addr = Addressing { src_mac: q.dst_mac, dst_mac: q.src_mac, src_ip: q.dst_ip, dst_ip: q.src_ip };
    build_icmp_frame(
        &addr,
        REPLY_TTL,
        q.icmp_seq,
        ICMP_ROUTER_ID,
        ROUTER_ID_REPLY_CODE,
        id_seq(q.icmp_id, q.icmp_seq),
        &identity.encode(),
    )
}

/// Parses a router-ID query (type 200, code 0) with valid checksums.
pub fn parse_router_id_query(frame: &[u8]) -> Result<IcmpPacket, PacketError> {
    match inspect_icmp(frame)? {
        Some(p) if p.icmp_type == ICMP_ROUTER_ID && p.icmp_code == ROUTER_ID_QUERY_CODE => Ok(p),
        _ => Err(PacketError::MalformedFrame("not a router-id query")),
    }
}

/// Classifies a frame received from the switch.
pub fn parse_reply(frame: &[u8]) -> Result<ParsedReply, PacketError> {
    // too short to hold any reply we could correlate
    if frame.len() < ETH_HEADER_LEN + IPV4_HEADER_LEN {
        return Err(PacketError::MalformedFrame("shorter than ethernet plus IPv4 headers"));
    }
    let Some(p) = inspect_icmp(frame)? else {
        let responder =
            ipv4_slice(frame).map(|ip| Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15])).unwrap_or(Ipv4Addr::UNSPECIFIED);
        return Ok(ParsedReply::other(responder));
    };
    let reply = match (p.icmp_type, p.icmp_code) {
        (ICMP_ECHO_REPLY, 0) => ParsedReply {
            kind: ReplyKind::EchoReply,
            responder_ip: p.src_ip,
            icmp_id: p.icmp_id,
            icmp_seq: p.icmp_seq,
            payload: p.payload,
        },
        (ICMP_TIME_EXCEEDED, 0) => match quoted_echo_ids(&p.payload) {
            Some((id, seq)) => ParsedReply {
                kind: ReplyKind::TimeExceeded,
                responder_ip: p.src_ip,
                icmp_id: id,
                icmp_seq: seq,
                payload: p.payload,
            },
            None => ParsedReply::other(p.src_ip),
        },
        (ICMP_ROUTER_ID, ROUTER_ID_REPLY_CODE) => match RouterIdentity::decode(&p.payload) {
            Some(identity) => ParsedReply {
                kind: ReplyKind::RouterIdReply(identity),
                responder_ip: p.src_ip,
                icmp_id: p.icmp_id,
                icmp_seq: p.icmp_seq,
                payload: p.payload,
            },
            None => ParsedReply::other(p.src_ip),
        },
        _ => ParsedReply::other(p.src_ip),
    };
    Ok(reply)
}

/// Recovers (id, seq) of the echo request quoted inside a Time Exceeded body.
fn quoted_echo_ids(quote: &[u8]) -> Option<(u16, u16)> {
    let first = *quote.first()?;
    if first >> 4 != 4 {
        return None;
    }
    let ihl = ((first & 0x0f) as usize) * 4;
    if ihl < IPV4_HEADER_LEN || quote.get(9) != Some(&IPPROTO_ICMP) {
        return None;
    }
    let inner = quote.get(ihl..ihl + 8)?;
    if inner[0] != ICMP_ECHO_REQUEST {
        return None;
    }
    Some((u16::from_be_bytes([inner[4], inner[5]]), u16::from_be_bytes([inner[6], inner[7]])))
}

fn mac_at(frame: &[u8], offset: usize) -> MacAddr {
    let mut m = [0u8; 6];
    m.copy_from_slice(&frame[offset..offset + 6]);
    MacAddr(m)
}

fn ethertype(frame: &[u8]) -> u16 {
    u16::from_be_bytes([frame[12], frame[13]])
}

/// The IPv4 datagram inside an Ethernet frame, trimmed to its total length.
fn ipv4_slice(frame: &[u8]) -> Result<&[u8], PacketError> {
    if frame.len() < ETH_HEADER_LEN {
        return Err(PacketError::MalformedFrame("shorter than an ethernet header"));
    }
    if ethertype(frame) != ETHERTYPE_IPV4 {
        return Err(PacketError::MalformedFrame("not IPv4"));
    }
    let ip = &frame[ETH_HEADER_LEN..];
    if ip.len() < IPV4_HEADER_LEN {
        return Err(PacketError::MalformedFrame("truncated IPv4 header"));
    }
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    let total = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    if ip[0] >> 4 != 4 || ihl < IPV4_HEADER_LEN || total < ihl || total > ip.len() {
        return Err(PacketError::MalformedFrame("inconsistent IPv4 header"));
    }
    Ok(&ip[..total])
}

/// Decodes an ICMP-over-IPv4 frame with valid checksums.
///
/// Returns `Ok(None)` for frames that are well formed but outside what the
/// measurements use: non-IPv4, IPv4 options, fragments, non-ICMP, bad checksums.
pub fn inspect_icmp(frame: &[u8]) -> Result<Option<IcmpPacket>, PacketError> {
    if frame.len() < ETH_HEADER_LEN {
        return Err(PacketError::MalformedFrame("shorter than an ethernet header"));
    }
    if ethertype(frame) != ETHERTYPE_IPV4 {
        return Ok(None);
    }
    let ip = ipv4_slice(frame)?;
    if ip[0] != 0x45 {
        return Ok(None);
    }
    let frag = u16::from_be_bytes([ip[6], ip[7]]);
    if frag & 0x3fff != 0 || ip[9] != IPPROTO_ICMP {
        return Ok(None);
    }
    if internet_checksum(&ip[..IPV4_HEADER_LEN]) != 0 {
        return Ok(None);
    }
    let icmp = &ip[IPV4_HEADER_LEN..];
    if icmp.len() < ICMP_HEADER_LEN {
        return Err(PacketError::MalformedFrame("truncated ICMP header"));
    }
    if internet_checksum(icmp) != 0 {
        return Ok(None);
    }
    Ok(Some(IcmpPacket {
        src_mac: mac_at(frame, 6),
        dst_mac: mac_at(frame, 0),
        src_ip: Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
        dst_ip: Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]),
        ttl: ip[8],
        icmp_type: icmp[0],
        icmp_code: icmp[1],
        icmp_id: u16::from_be_bytes([icmp[4], icmp[5]]),
        icmp_seq: u16::from_be_bytes([icmp[6], icmp[7]]),
        payload: icmp[ICMP_HEADER_LEN..].to_vec(),
    }))
}

/// Header values a flow table can match on. Fields absent from the frame are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeaderFields {
    pub eth_type: Option<u16>,
    pub ip_proto: Option<u8>,
    pub ipv4_dst: Option<Ipv4Addr>,
    pub icmpv4_type: Option<u8>,
    pub icmpv4_code: Option<u8>,
}

pub fn header_fields(frame: &[u8]) -> HeaderFields {
    let mut f = HeaderFields::default();
    if frame.len() < ETH_HEADER_LEN {
        return f;
    }
    f.eth_type = Some(ethertype(frame));
    let Ok(ip) = ipv4_slice(frame) else {
        return f;
    };
    f.ip_proto = Some(ip[9]);
    f.ipv4_dst = Some(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]));
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    let first_fragment = u16::from_be_bytes([ip[6], ip[7]]) & 0x1fff == 0;
    if ip[9] == IPPROTO_ICMP && first_fragment && ip.len() >= ihl + 2 {
        f.icmpv4_type = Some(ip[ihl]);
        f.icmpv4_code = Some(ip[ihl + 1]);
    }
    f
}
