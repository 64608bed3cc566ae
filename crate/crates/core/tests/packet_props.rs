use std::net::Ipv4Addr;

use ofprobe_core::pktlab::{
    build_echo_reply, build_echo_request, build_gratuitous_arp, build_router_id_query, build_router_id_reply,
    build_time_exceeded, header_fields, inspect_icmp, internet_checksum, parse_reply, parse_router_id_query,
    Addressing, EchoProbe, MacAddr, PacketError, ReplyKind, RouterIdentity, ETHERTYPE_ARP, ETH_HEADER_LEN,
    ICMP_HEADER_LEN, IPV4_HEADER_LEN,
};
use proptest::prelude::*;

fn ip(s: &str) -> Ipv4Addr {
    s.parse().unwrap()
}

fn arb_probe() -> impl Strategy<Value = EchoProbe> {
    (
        any::<[u8; 6]>(),
        any::<[u8; 6]>(),
        any::<u32>(),
        any::<u32>(),
        1u8..=255,
        any::<u16>(),
        any::<u16>(),
        prop::collection::vec(any::<u8>(), 0..200),
    )
        .prop_map(|(s, d, si, di, ttl, id, seq, payload)| EchoProbe {
            src_mac: MacAddr(s),
            dst_mac: MacAddr(d),
            src_ip: si.into(),
            dst_ip: di.into(),
            ttl,
            icmp_id: id,
            icmp_seq: seq,
            payload,
        })
}

fn ip_header(frame: &[u8]) -> &[u8] {
    &frame[ETH_HEADER_LEN..ETH_HEADER_LEN + IPV4_HEADER_LEN]
}

fn icmp(frame: &[u8]) -> &[u8] {
    &frame[ETH_HEADER_LEN + IPV4_HEADER_LEN..]
}

proptest! {
    #[test]
    fn checksum_self_verifies(mut data in prop::collection::vec(any::<u8>(), 2..300)) {
        data[0] = 0;
        data[1] = 0;
        let c = internet_checksum(&data);
        data[..2].copy_from_slice(&c.to_be_bytes());
        prop_assert_eq!(internet_checksum(&data), 0);
    }

    #[test]
    fn echo_request_fields_round_trip(p in arb_probe()) {
        let frame = build_echo_request(&p).unwrap();
        prop_assert_eq!(frame.len(), 42 + p.payload.len());
        prop_assert_eq!(internet_checksum(ip_header(&frame)), 0);
        prop_assert_eq!(internet_checksum(icmp(&frame)), 0);
        let seen = inspect_icmp(&frame).unwrap().unwrap();
        prop_assert_eq!(seen.ttl, p.ttl);
        prop_assert_eq!((seen.src_ip, seen.dst_ip), (p.src_ip, p.dst_ip));
        prop_assert_eq!((seen.icmp_id, seen.icmp_seq), (p.icmp_id, p.icmp_seq));
        prop_assert_eq!(&seen.payload, &p.payload);
    }

    #[test]
    fn echo_reply_parses_back(p in arb_probe()) {
        let reply = build_echo_reply(&build_echo_request(&p).unwrap()).unwrap();
        prop_assert_eq!(internet_checksum(icmp(&reply)), 0);
        let r = parse_reply(&reply).unwrap();
        prop_assert_eq!(r.kind, ReplyKind::EchoReply);
        prop_assert_eq!(r.responder_ip, p.dst_ip);
        prop_assert_eq!((r.icmp_id, r.icmp_seq), (p.icmp_id, p.icmp_seq));
        prop_assert_eq!(r.payload, p.payload);
    }

    #[test]
    fn time_exceeded_quote_recovers_id_and_seq(p in arb_probe(), router in any::<u32>()) {
        let router = Ipv4Addr::from(router);
        let te = build_time_exceeded(router, &build_echo_request(&p).unwrap()).unwrap();
        prop_assert_eq!(internet_checksum(icmp(&te)), 0);
        let r = parse_reply(&te).unwrap();
        prop_assert_eq!(r.kind, ReplyKind::TimeExceeded);
        prop_assert_eq!(r.responder_ip, router);
        prop_assert_eq!((r.icmp_id, r.icmp_seq), (p.icmp_id, p.icmp_seq));
    }

    #[test]
    fn parsers_never_panic(frame in prop::collection::vec(any::<u8>(), 0..120)) {
        let _ = parse_reply(&frame);
        let _ = inspect_icmp(&frame);
        let _ = header_fields(&frame);
        let _ = parse_router_id_query(&frame);
    }

    #[test]
    fn router_identity_round_trips(asn in any::<u32>(), ident in "[a-z0-9.-]{1,64}") {
        let id = RouterIdentity::new(asn, ident).unwrap();
        let q = build_router_id_query(&addressing(), 3, 4);
        let r = parse_reply(&build_router_id_reply(&q, &id).unwrap()).unwrap();
        prop_assert_eq!(r.kind, ReplyKind::RouterIdReply(id));
    }
}

fn addressing() -> Addressing {
    Addressing {
        src_mac: "02:00:00:00:00:55".parse().unwrap(),
        dst_mac: "02:00:00:00:00:01".parse().unwrap(),
        src_ip: ip("198.51.100.5"),
        dst_ip: ip("192.0.2.10"),
    }
}

fn probe(payload: usize, ttl: u8) -> EchoProbe {
    EchoProbe {
        src_mac: "02:00:00:00:00:01".parse().unwrap(),
        dst_mac: "02:00:00:00:00:fe".parse().unwrap(),
        src_ip: ip("192.0.2.10"),
        dst_ip: ip("198.51.100.7"),
        ttl,
        icmp_id: 9,
        icmp_seq: 1,
        payload: vec![0xab; payload],
    }
}

#[test]
fn checksum_examples() {
    assert_eq!(internet_checksum(&[]), 0xffff);
    assert_eq!(internet_checksum(&[0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7]), 0x220d);
}

#[test]
fn echo_request_examples() {
    assert_eq!(build_echo_request(&probe(0, 64)).unwrap().len(), 42);
    assert_eq!(ip_header(&build_echo_request(&probe(0, 1)).unwrap())[8], 1);
    assert_eq!(build_echo_request(&probe(0, 0)), Err(PacketError::InvalidTtl));
    assert!(matches!(build_echo_request(&probe(1500, 64)), Err(PacketError::PayloadTooLarge { .. })));
    let reply = build_echo_reply(&build_echo_request(&probe(56, 64)).unwrap()).unwrap();
    let r = parse_reply(&reply).unwrap();
    assert_eq!((r.icmp_id, r.icmp_seq, r.payload.len()), (9, 1, 56));
}

#[test]
fn short_frame_is_malformed() {
    assert!(matches!(parse_reply(&[0u8; 20]), Err(PacketError::MalformedFrame(_))));
}

#[test]
fn time_exceeded_examples() {
    let te = build_time_exceeded(ip("10.0.0.1"), &build_echo_request(&probe(0, 1)).unwrap()).unwrap();
    let r = parse_reply(&te).unwrap();
    assert_eq!((r.kind, r.responder_ip, r.icmp_id, r.icmp_seq), (ReplyKind::TimeExceeded, ip("10.0.0.1"), 9, 1));
    // minimum quote: inner IP header plus the 8 ICMP header bytes
    assert_eq!(icmp(&te).len(), ICMP_HEADER_LEN + IPV4_HEADER_LEN + 8);
}

#[test]
fn gratuitous_arp_layout() {
    let f = build_gratuitous_arp(ip("192.0.2.10"), "aa:bb:cc:dd:ee:ff".parse().unwrap());
    assert_eq!(f.len(), 42);
    assert_eq!(u16::from_be_bytes([f[12], f[13]]), ETHERTYPE_ARP);
    assert_eq!(&f[20..22], &[0x00, 0x02]);
    assert_eq!(&f[0..6], &[0xff; 6]);
    // sender and target protocol addresses are both the announced IP
    assert_eq!(&f[28..32], &[192, 0, 2, 10]);
    assert_eq!(&f[38..42], &[192, 0, 2, 10]);
}

#[test]
fn router_id_examples() {
    let id = RouterIdentity::new(65001, "core-rtr-1").unwrap();
    let q = build_router_id_query(&addressing(), 1, 0);
    let reply = build_router_id_reply(&q, &id).unwrap();
    assert_eq!(&icmp(&reply)[8..13], &[0x00, 0x00, 0xfd, 0xe9, 0x0a]);
    assert_eq!(inspect_icmp(&reply).unwrap().unwrap().dst_ip, ip("198.51.100.5"));
    assert_eq!(parse_reply(&reply).unwrap().kind, ReplyKind::RouterIdReply(id.clone()));
    // a reply is not a query, so it cannot be answered again
    assert!(parse_router_id_query(&reply).is_err());
    assert!(RouterIdentity::new(1, "").is_err());
    assert!(RouterIdentity::new(1, "x".repeat(65)).is_err());
}
