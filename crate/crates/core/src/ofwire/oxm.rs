//! OXM match encoding, restricted to the fields the measurement rules use.

use std::fmt;
use std::net::Ipv4Addr;

use bytes::BufMut;

use super::{Reader, WireError};

const OFPMT_OXM: u16 = 1;
const OFPXMC_OPENFLOW_BASIC: u16 = 0x8000;

const OXM_IN_PORT: u8 = 0;
const OXM_ETH_TYPE: u8 = 5;
const OXM_IP_PROTO: u8 = 10;
const OXM_IPV4_DST: u8 = 12;
const OXM_ICMPV4_TYPE: u8 = 19;
const OXM_ICMPV4_CODE: u8 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatchFieldKind {
    EthType,
    IpProto,
    Ipv4Dst,
    Icmpv4Type,
    Icmpv4Code,
}

impl fmt::Display for MatchFieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MatchFieldKind::EthType => "eth_type",
            MatchFieldKind::IpProto => "ip_proto",
            MatchFieldKind::Ipv4Dst => "ipv4_dst",
            MatchFieldKind::Icmpv4Type => "icmpv4_type",
            MatchFieldKind::Icmpv4Code => "icmpv4_code",
        };
        f.write_str(name)
    }
}

/// A single exact-match OXM field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchField {
    EthType(u16),
    IpProto(u8),
    Ipv4Dst(Ipv4Addr),
    Icmpv4Type(u8),
    Icmpv4Code(u8),
}

impl MatchField {
    pub fn kind(&self) -> MatchFieldKind {
        match self {
            MatchField::EthType(_) => MatchFieldKind::EthType,
            MatchField::IpProto(_) => MatchFieldKind::IpProto,
            MatchField::Ipv4Dst(_) => MatchFieldKind::Ipv4Dst,
            MatchField::Icmpv4Type(_) => MatchFieldKind::Icmpv4Type,
            MatchField::Icmpv4Code(_) => MatchFieldKind::Icmpv4Code,
        }
    }

    fn oxm_field(&self) -> u8 {
        match self {
            MatchField::EthType(_) => OXM_ETH_TYPE,
            MatchField::IpProto(_) => OXM_IP_PROTO,
            MatchField::Ipv4Dst(_) => OXM_IPV4_DST,
            MatchField::Icmpv4Type(_) => OXM_ICMPV4_TYPE,
            MatchField::Icmpv4Code(_) => OXM_ICMPV4_CODE,
        }
    }

    fn payload_len(&self) -> u8 {
        match self {
            MatchField::EthType(_) => 2,
            MatchField::IpProto(_) | MatchField::Icmpv4Type(_) | MatchField::Icmpv4Code(_) => 1,
            MatchField::Ipv4Dst(_) => 4,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        put_oxm_header(out, self.oxm_field(), self.payload_len());
        match *self {
            MatchField::EthType(v) => out.put_u16(v),
            MatchField::IpProto(v) | MatchField::Icmpv4Type(v) | MatchField::Icmpv4Code(v) => out.put_u8(v),
            MatchField::Ipv4Dst(ip) => out.put_slice(&ip.octets()),
        }
    }
}

fn put_oxm_header(out: &mut Vec<u8>, field: u8, len: u8) {
    out.put_u16(OFPXMC_OPENFLOW_BASIC);
    out.put_u8(field << 1);
    out.put_u8(len);
}

/// Set of match fields for a flow rule. Each field kind appears at most once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Match {
    fields: Vec<MatchField>,
}

impl Match {
    pub fn new(fields: impl IntoIterator<Item = MatchField>) -> Result<Self, WireError> {
        let mut out: Vec<MatchField> = Vec::new();
        for field in fields {
            if out.iter().any(|f| f.kind() == field.kind()) {
                return Err(WireError::DuplicateMatchField(field.kind()));
            }
            out.push(field);
        }
        Ok(Match { fields: out })
    }

    pub fn fields(&self) -> &[MatchField] {
        &self.fields
    }

    pub fn get(&self, kind: MatchFieldKind) -> Option<&MatchField> {
        self.fields.iter().find(|f| f.kind() == kind)
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub(crate) fn encode(&self, out: &mut Vec<u8>) {
        let mut oxm = Vec::with_capacity(self.fields.len() * 8);
        for f in &self.fields {
            f.encode(&mut oxm);
        }
        put_ofp_match(out, &oxm);
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let oxm = read_ofp_match(r)?;
        let mut fields = Vec::new();
        let mut o = Reader::new(oxm, "oxm field");
        while o.remaining() > 0 {
            let (class, field, has_mask, len) = read_oxm_header(&mut o)?;
            if class != OFPXMC_OPENFLOW_BASIC || has_mask {
                return Err(WireError::UnsupportedMatchField { class, field });
            }
            let value = o.bytes(len as usize)?;
            let parsed = match (field, len) {
                (OXM_ETH_TYPE, 2) => MatchField::EthType(u16::from_be_bytes([value[0], value[1]])),
                (OXM_IP_PROTO, 1) => MatchField::IpProto(value[0]),
                (OXM_IPV4_DST, 4) => MatchField::Ipv4Dst(Ipv4Addr::new(value[0], value[1], value[2], value[3])),
                (OXM_ICMPV4_TYPE, 1) => MatchField::Icmpv4Type(value[0]),
                (OXM_ICMPV4_CODE, 1) => MatchField::Icmpv4Code(value[0]),
                (OXM_ETH_TYPE | OXM_IP_PROTO | OXM_IPV4_DST | OXM_ICMPV4_TYPE | OXM_ICMPV4_CODE, _) => {
                    return Err(WireError::Malformed { what: "oxm field length" })
                }
                _ => return Err(WireError::UnsupportedMatchField { class, field }),
            };
            fields.push(parsed);
        }
        Match::new(fields)
    }
}

fn read_oxm_header(r: &mut Reader<'_>) -> Result<(u16, u8, bool, u8), WireError> {
    let class = r.u16()?;
    let fm = r.u8()?;
    let len = r.u8()?;
    Ok((class, fm >> 1, fm & 1 == 1, len))
}

/// Writes an `ofp_match` header around pre-encoded OXM TLVs, padded to 8 bytes.
fn put_ofp_match(out: &mut Vec<u8>, oxm: &[u8]) {
    let len = 4 + oxm.len();
    out.put_u16(OFPMT_OXM);
    out.put_u16(len as u16);
    out.put_slice(oxm);
    out.put_bytes(0, padding(len));
}

/// Reads an `ofp_match` (including padding) and returns the raw OXM bytes.
fn read_ofp_match<'a>(r: &mut Reader<'a>) -> Result<&'a [u8], WireError> {
    let ty = r.u16()?;
    let len = r.u16()? as usize;
    if ty != OFPMT_OXM {
        return Err(WireError::Malformed { what: "match type" });
    }
    if len < 4 {
        return Err(WireError::Malformed { what: "match length" });
    }
    let oxm = r.bytes(len - 4)?;
    r.skip(padding(len))?;
    Ok(oxm)
}

pub(crate) fn padding(len: usize) -> usize {
    (8 - len % 8) % 8
}

/// The single-field match a switch attaches to PacketIn messages.
pub(crate) fn encode_in_port_match(out: &mut Vec<u8>, in_port: u32) {
    let mut oxm = Vec::with_capacity(8);
    put_oxm_header(&mut oxm, OXM_IN_PORT, 4);
    oxm.put_u32(in_port);
    put_ofp_match(out, &oxm);
}

/// Extracts the ingress port from a PacketIn match. Other OXM fields a switch
/// may add (physical port, metadata) are skipped.
pub(crate) fn decode_in_port_match(r: &mut Reader<'_>) -> Result<u32, WireError> {
    let oxm = read_ofp_match(r)?;
    let mut o = Reader::new(oxm, "packet-in match");
    let mut in_port = None;
    while o.remaining() > 0 {
        let (class, field, has_mask, len) = read_oxm_header(&mut o)?;
        let value = o.bytes(len as usize)?;
        if class == OFPXMC_OPENFLOW_BASIC && field == OXM_IN_PORT && !has_mask && len == 4 {
            in_port = Some(u32::from_be_bytes([value[0], value[1], value[2], value[3]]));
        }
    }
    in_port.ok_or(WireError::Malformed { what: "packet-in match without in_port" })
}
