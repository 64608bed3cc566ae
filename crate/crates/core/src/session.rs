//! Controller side of one OpenFlow switch connection.
//!
//! [`SwitchSession`] is a sans-IO state machine: the owner feeds it received
//! bytes with [`SwitchSession::receive`], drains bytes to write with
//! [`SwitchSession::take_outgoing`] and drives timeouts with
//! [`SwitchSession::poll`]. Every method takes the current controller
//! timestamp so one monotonic clock stamps all sends and receives.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use crate::ofwire::{
    encode_message, Body, FlowMod, Match, MatchField, Message, PacketOut, StreamFramer, SwitchFeatures, WireError,
};
use crate::pktlab::{ETHERTYPE_IPV4, ICMP_ECHO_REPLY, ICMP_ROUTER_ID, ICMP_TIME_EXCEEDED, IPPROTO_ICMP};
use crate::time::{Timestamp, Timestamped};

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
pub const ECHO_TIMEOUT: Duration = Duration::from_secs(2);

/// ICMP types sent to the controller by [`SwitchSession::install_reply_flows`].
pub const REPLY_ICMP_TYPES: [u8; 3] = [ICMP_ECHO_REPLY, ICMP_TIME_EXCEEDED, ICMP_ROUTER_ID];
const REPLY_FLOW_COOKIE: u64 = 0x6f66_7072_6f62_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "session-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    HandshakePending,
    Active,
    Closed,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("switch did not complete the handshake within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("peer speaks OpenFlow version 0x{0:02x}, expected 0x04")]
    BadVersion(u8),
    #[error("session is closed")]
    SessionClosed,
    #[error("session handshake has not completed")]
    NotActive,
    #[error("echo reply not received within {0:?}")]
    EchoTimeout(Duration),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEvent {
    Activated { datapath_id: u64 },
    PacketIn { frame: Timestamped<Vec<u8>>, in_port: u32 },
    EchoSample { xid: u32, rtt: Duration },
    EchoTimeout { xid: u32 },
}

#[derive(Debug)]
pub struct SwitchSession {
    id: SessionId,
    datapath_id: Option<u64>,
    state: SessionState,
    next_xid: u32,
    pending_echoes: HashMap<u32, Timestamp>,
    framer: StreamFramer,
    outbox: Vec<u8>,
    opened_at: Timestamp,
    hello_received: bool,
    last_send: Option<Timestamp>,
    stale_echo_replies: u64,
}

impl SwitchSession {
    /// Starts the handshake for a freshly accepted connection by queueing Hello.
    pub fn new(id: SessionId, now: Timestamp) -> Self {
        let mut s = SwitchSession {
            id,
            datapath_id: None,
            state: SessionState::HandshakePending,
            next_xid: 1,
            pending_echoes: HashMap::new(),
            framer: StreamFramer::new(),
            outbox: Vec::new(),
            opened_at: now,
            hello_received: false,
            last_send: None,
            stale_echo_replies: 0,
        };
        s.queue(Body::Hello).expect("hello always encodes");
        s
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn datapath_id(&self) -> Option<u64> {
        self.datapath_id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn is_active(&self) -> bool {
        self.state == SessionState::Active
    }

    pub fn stale_echo_replies(&self) -> u64 {
        self.stale_echo_replies
    }

    pub fn close(&mut self) {
        self.state = SessionState::Closed;
        self.pending_echoes.clear();
    }

    fn fresh_xid(&mut self) -> u32 {
        let xid = self.next_xid;
        self.next_xid = self.next_xid.wrapping_add(1);
        if self.next_xid == 0 {
            self.next_xid = 1;
        }
        xid
    }

    fn queue(&mut self, body: Body) -> Result<u32, SessionError> {
        let xid = self.fresh_xid();
        self.queue_with_xid(xid, body)?;
        Ok(xid)
    }

    fn queue_with_xid(&mut self, xid: u32, body: Body) -> Result<(), SessionError> {
        let bytes = encode_message(&Message::new(xid, body))?;
        self.outbox.extend_from_slice(&bytes);
        Ok(())
    }

    fn require_active(&self) -> Result<(), SessionError> {
        match self.state {
            SessionState::Active => Ok(()),
            SessionState::Closed => Err(SessionError::SessionClosed),
            SessionState::HandshakePending => Err(SessionError::NotActive),
        }
    }

    /// Feeds bytes read from the connection.
    pub fn receive(&mut self, bytes: &[u8], now: Timestamp) -> Result<Vec<SessionEvent>, SessionError> {
        if self.state == SessionState::Closed {
            return Err(SessionError::SessionClosed);
        }
        let messages = match self.framer.push(bytes) {
            Ok(m) => m,
            Err(WireError::BadVersion(v)) => {
                self.close();
                return Err(SessionError::BadVersion(v));
            }
            Err(e) => {
                self.close();
                return Err(e.into());
            }
        };
        let mut events = Vec::new();
        for msg in messages {
            match msg.body {
                Body::Hello => {
                    if !self.hello_received {
                        self.hello_received = true;
                        self.queue(Body::FeaturesRequest)?;
                    }
                }
                Body::FeaturesReply(SwitchFeatures { datapath_id, .. }) => {
                    if self.state == SessionState::HandshakePending && self.hello_received {
                        self.state = SessionState::Active;
                        self.datapath_id = Some(datapath_id);
                        debug!("{}: active, datapath {datapath_id:#018x}", self.id);
                        events.push(SessionEvent::Activated { datapath_id });
                    }
                }
                Body::EchoRequest(data) => self.queue_with_xid(msg.xid, Body::EchoReply(data))?,
                Body::EchoReply(_) => match self.pending_echoes.remove(&msg.xid) {
                    Some(sent) => events.push(SessionEvent::EchoSample { xid: msg.xid, rtt: now - sent }),
                    None => self.stale_echo_replies += 1,
                },
                Body::PacketIn(pi) => {
                    if self.state == SessionState::Active {
                        events.push(SessionEvent::PacketIn {
                            frame: Timestamped { frame: pi.frame, at: now },
                            in_port: pi.in_port,
                        });
                    }
                }
                other => debug!("{}: ignoring unexpected {:?}", self.id, Message::new(msg.xid, other).msg_type()),
            }
        }
        Ok(events)
    }

    /// Expires the handshake and outstanding echo requests.
    pub fn poll(&mut self, now: Timestamp) -> Result<Vec<SessionEvent>, SessionError> {
        match self.state {
            SessionState::Closed => return Err(SessionError::SessionClosed),
            SessionState::HandshakePending if now - self.opened_at >= HANDSHAKE_TIMEOUT => {
                warn!("{}: handshake timed out", self.id);
                self.close();
                return Err(SessionError::HandshakeTimeout(HANDSHAKE_TIMEOUT));
            }
            _ => {}
        }
        let mut expired: Vec<u32> =
            self.pending_echoes.iter().filter(|(_, &sent)| now - sent >= ECHO_TIMEOUT).map(|(&xid, _)| xid).collect();
        expired.sort_unstable();
        Ok(expired
            .into_iter()
            .map(|xid| {
                self.pending_echoes.remove(&xid);
                SessionEvent::EchoTimeout { xid }
            })
            .collect())
    }

    /// Earliest time at which [`poll`](Self::poll) has work to do.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        match self.state {
            SessionState::Closed => None,
            SessionState::HandshakePending => Some(self.opened_at + HANDSHAKE_TIMEOUT),
            SessionState::Active => self.pending_echoes.values().min().map(|&t| t + ECHO_TIMEOUT),
        }
    }

    /// Queues a PacketOut emitting `frame` on `out_port` and returns its send
    /// timestamp. Timestamps are strictly increasing within a session; two
    /// sends in the same microsecond are stamped one microsecond apart.
    pub fn send_packet_out(
        &mut self,
        out_port: u32,
        frame: Vec<u8>,
        now: Timestamp,
    ) -> Result<Timestamp, SessionError> {
        self.require_active()?;
        let at = match self.last_send {
            Some(prev) if prev >= now => Timestamp::from_micros(prev.as_micros() + 1),
            _ => now,
        };
        self.queue(Body::PacketOut(PacketOut::new(out_port, frame)))?;
        self.last_send = Some(at);
        Ok(at)
    }

    /// Sends an echo request; its round trip is reported as
    /// [`SessionEvent::EchoSample`] with the returned xid.
    pub fn begin_echo(&mut self, now: Timestamp) -> Result<u32, SessionError> {
        self.require_active()?;
        let xid = self.queue(Body::EchoRequest(Vec::new()))?;
        self.pending_echoes.insert(xid, now);
        Ok(xid)
    }

    /// Installs one rule per reply type sending ICMP addressed to
    /// `probe_src_ip` to the controller.
    pub fn install_reply_flows(&mut self, probe_src_ip: Ipv4Addr, priority: u16) -> Result<(), SessionError> {
        self.require_active()?;
        for icmp_type in REPLY_ICMP_TYPES {
            let m = Match::new([
                MatchField::EthType(ETHERTYPE_IPV4),
                MatchField::IpProto(IPPROTO_ICMP),
                MatchField::Ipv4Dst(probe_src_ip),
                MatchField::Icmpv4Type(icmp_type),
            ])?;
            let fm = FlowMod::to_controller(REPLY_FLOW_COOKIE | icmp_type as u64, priority, m);
            self.queue(Body::FlowMod(fm))?;
        }
        Ok(())
    }

    pub fn has_outgoing(&self) -> bool {
        !self.outbox.is_empty()
    }

    /// Drains bytes queued for the connection, in write order.
    pub fn take_outgoing(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.outbox)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofwire::{decode_message, frame_stream, PacketIn};

    fn t(ms: u64) -> Timestamp {
        Timestamp::from_micros(ms * 1000)
    }

    fn encode(xid: u32, body: Body) -> Vec<u8> {
        encode_message(&Message::new(xid, body)).unwrap()
    }

    fn drain(s: &mut SwitchSession) -> Vec<Message> {
        let mut acc = Vec::new();
        frame_stream(&mut acc, &s.take_outgoing()).unwrap()
    }

    fn features(dpid: u64) -> Body {
        Body::FeaturesReply(SwitchFeatures {
            datapath_id: dpid,
            n_buffers: 0,
            n_tables: 1,
            auxiliary_id: 0,
            capabilities: 0,
        })
    }

    fn active_session() -> SwitchSession {
        let mut s = SwitchSession::new(SessionId(1), t(0));
        s.receive(&encode(1, Body::Hello), t(0)).unwrap();
        s.receive(&encode(2, features(0xabc)), t(0)).unwrap();
        s.take_outgoing();
        s
    }

    #[test]
    fn handshake_reaches_active() {
        let mut s = SwitchSession::new(SessionId(1), t(0));
        let sent = drain(&mut s);
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0].body, Body::Hello);

        assert!(s.receive(&encode(9, Body::Hello), t(1)).unwrap().is_empty());
        let sent = drain(&mut s);
        assert_eq!(sent[0].body, Body::FeaturesRequest);

        let ev = s.receive(&encode(sent[0].xid, features(0x42)), t(2)).unwrap();
        assert_eq!(ev, vec![SessionEvent::Activated { datapath_id: 0x42 }]);
        assert_eq!(s.state(), SessionState::Active);
        assert_eq!(s.datapath_id(), Some(0x42));
    }

    #[test]
    fn old_version_hello_closes() {
        let mut s = SwitchSession::new(SessionId(1), t(0));
        let err = s.receive(&[0x01, 0, 0, 8, 0, 0, 0, 1], t(0)).unwrap_err();
        assert_eq!(err, SessionError::BadVersion(1));
        assert_eq!(s.state(), SessionState::Closed);
    }

    #[test]
    fn silent_peer_times_out() {
        let mut s = SwitchSession::new(SessionId(1), t(0));
        s.receive(&encode(1, Body::Hello), t(0)).unwrap();
        assert_eq!(s.next_deadline(), Some(t(5000)));
        assert!(s.poll(t(4999)).unwrap().is_empty());
        assert_eq!(s.poll(t(5000)), Err(SessionError::HandshakeTimeout(HANDSHAKE_TIMEOUT)));
        assert_eq!(s.state(), SessionState::Closed);
    }

    #[test]
    fn three_reply_flows() {
        let mut s = active_session();
        s.install_reply_flows(Ipv4Addr::new(192, 0, 2, 10), 100).unwrap();
        let sent = drain(&mut s);
        assert_eq!(sent.len(), 3);
        let mut types = Vec::new();
        for m in sent {
            let Body::FlowMod(fm) = m.body else { panic!("expected flow-mod") };
            assert_eq!(fm.priority, 100);
            let Some(MatchField::Icmpv4Type(ty)) = fm.matches.get(crate::ofwire::MatchFieldKind::Icmpv4Type) else {
                panic!("missing icmp type")
            };
            types.push(*ty);
        }
        assert_eq!(types, vec![0, 11, 200]);
    }

    #[test]
    fn packet_out_timestamps_strictly_increase() {
        let mut s = active_session();
        let a = s.send_packet_out(1, vec![1; 42], t(10)).unwrap();
        let b = s.send_packet_out(1, vec![2; 42], t(10)).unwrap();
        let c = s.send_packet_out(1, vec![3; 42], t(11)).unwrap();
        assert!(a < b && b < c);
        assert_eq!(a, t(10));
        let sent = drain(&mut s);
        let frames: Vec<u8> = sent
            .into_iter()
            .map(|m| match m.body {
                Body::PacketOut(po) => po.frame[0],
                _ => panic!(),
            })
            .collect();
        assert_eq!(frames, vec![1, 2, 3]);
    }

    #[test]
    fn closed_session_rejects_sends() {
        let mut s = active_session();
        s.close();
        assert_eq!(s.send_packet_out(1, vec![0; 42], t(1)), Err(SessionError::SessionClosed));
        assert_eq!(s.begin_echo(t(1)), Err(SessionError::SessionClosed));
    }

    #[test]
    fn echo_sample_filters_xid() {
        let mut s = active_session();
        let xid = s.begin_echo(t(100)).unwrap();
        let req = drain(&mut s);
        assert_eq!(req[0].xid, xid);
        // unmatched reply is ignored
        let ev = s.receive(&encode(xid + 1000, Body::EchoReply(vec![])), t(105)).unwrap();
        assert!(ev.is_empty());
        assert_eq!(s.stale_echo_replies(), 1);
        let ev = s.receive(&encode(xid, Body::EchoReply(vec![])), t(110)).unwrap();
        assert_eq!(ev, vec![SessionEvent::EchoSample { xid, rtt: Duration::from_millis(10) }]);
        // a second reply with the same xid does not produce another sample
        let ev = s.receive(&encode(xid, Body::EchoReply(vec![])), t(120)).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn echo_timeout_expires_request() {
        let mut s = active_session();
        let xid = s.begin_echo(t(0)).unwrap();
        assert_eq!(s.next_deadline(), Some(t(2000)));
        assert_eq!(s.poll(t(2000)).unwrap(), vec![SessionEvent::EchoTimeout { xid }]);
        let ev = s.receive(&encode(xid, Body::EchoReply(vec![])), t(2500)).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn switch_echo_requests_are_answered() {
        let mut s = active_session();
        s.receive(&encode(77, Body::EchoRequest(vec![1, 2])), t(1)).unwrap();
        let out = s.take_outgoing();
        assert_eq!(decode_message(&out).unwrap().0, Message::new(77, Body::EchoReply(vec![1, 2])));
    }

    #[test]
    fn packet_ins_are_stamped_in_order() {
        let mut s = active_session();
        let mut bytes = Vec::new();
        for i in 0..100u8 {
            bytes.extend(encode(0, Body::PacketIn(PacketIn::new(3, 0, vec![i; 42]))));
        }
        let ev = s.receive(&bytes, t(7)).unwrap();
        assert_eq!(ev.len(), 100);
        for (i, e) in ev.iter().enumerate() {
            let SessionEvent::PacketIn { frame, in_port } = e else { panic!() };
            assert_eq!(frame.frame[0], i as u8);
            assert_eq!(frame.at, t(7));
            assert_eq!(*in_port, 3);
        }
    }
}
