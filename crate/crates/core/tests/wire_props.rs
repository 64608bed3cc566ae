mod common;

use common::{arb_message, hex};
use ofprobe_core::ofwire::{
    decode_message, encode_message, frame_stream, Body, Message, PacketOut, StreamFramer, WireError, HEADER_LEN,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn round_trip_is_identity(msg in arb_message()) {
        let bytes = encode_message(&msg).unwrap();
        let (back, used) = decode_message(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(encode_message(&back).unwrap(), bytes);
    }

    #[test]
    fn header_length_matches_encoding(msg in arb_message()) {
        let bytes = encode_message(&msg).unwrap();
        prop_assert_eq!(u16::from_be_bytes([bytes[2], bytes[3]]) as usize, bytes.len());
        prop_assert_eq!(bytes[0], 0x04);
        prop_assert_eq!(bytes[1], msg.msg_type() as u8);
        prop_assert_eq!(u32::from_be_bytes(bytes[4..8].try_into().unwrap()), msg.xid);
    }

    #[test]
    fn every_strict_prefix_is_truncated(msg in arb_message()) {
        let bytes = encode_message(&msg).unwrap();
        for cut in [0, 1, 4, HEADER_LEN - 1, bytes.len() / 2, bytes.len() - 1] {
            let is_truncated = matches!(decode_message(&bytes[..cut]), Err(WireError::Truncated { .. }));
            prop_assert!(is_truncated, "prefix {} of {}", cut, bytes.len());
        }
    }

    #[test]
    fn trailing_bytes_are_left_alone(msg in arb_message(), tail in prop::collection::vec(any::<u8>(), 0..20)) {
        let mut bytes = encode_message(&msg).unwrap();
        let len = bytes.len();
        bytes.extend(&tail);
        let (back, used) = decode_message(&bytes).unwrap();
        prop_assert_eq!(used, len);
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn framing_conserves_messages(
        msgs in prop::collection::vec(arb_message(), 1..20),
        cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..30),
    ) {
        let stream: Vec<u8> = msgs.iter().flat_map(|m| encode_message(m).unwrap()).collect();
        let mut points: Vec<usize> = cuts.iter().map(|i| i.index(stream.len() + 1)).collect();
        points.push(0);
        points.push(stream.len());
        points.sort_unstable();
        points.dedup();
        let mut framer = StreamFramer::new();
        let mut got = Vec::new();
        for w in points.windows(2) {
            got.extend(framer.push(&stream[w[0]..w[1]]).unwrap());
        }
        prop_assert_eq!(framer.pending(), 0);
        prop_assert_eq!(got, msgs);
    }
}

#[test]
fn spec_byte_examples() {
    assert_eq!(encode_message(&Message::new(1, Body::Hello)).unwrap(), hex("04 00 00 08 00 00 00 01"));
    assert_eq!(encode_message(&Message::new(7, Body::EchoRequest(vec![]))).unwrap(), hex("04 02 00 08 00 00 00 07"));
    let po = encode_message(&Message::new(3, Body::PacketOut(PacketOut::new(2, vec![0; 64])))).unwrap();
    assert_eq!(u16::from_be_bytes([po[2], po[3]]), 8 + 16 + 16 + 64);
}

#[test]
fn decode_reports_consumed_length() {
    let bytes = encode_message(&Message::new(1, Body::Hello)).unwrap();
    assert_eq!(decode_message(&bytes).unwrap(), (Message::new(1, Body::Hello), 8));
    assert!(matches!(decode_message(&bytes[..4]), Err(WireError::Truncated { .. })));
}

#[test]
fn two_concatenated_echo_replies() {
    let a = encode_message(&Message::new(1, Body::EchoReply(vec![]))).unwrap();
    let b = encode_message(&Message::new(2, Body::EchoReply(b"x".to_vec()))).unwrap();
    let both = [a.clone(), b].concat();
    let (first, used) = decode_message(&both).unwrap();
    assert_eq!((first, used), (Message::new(1, Body::EchoReply(vec![])), 8));
    assert_eq!(decode_message(&both[used..]).unwrap().0, Message::new(2, Body::EchoReply(b"x".to_vec())));
}

#[test]
fn bad_version_and_length_are_errors() {
    assert_eq!(decode_message(&hex("01 00 0008 00000001")), Err(WireError::BadVersion(1)));
    assert_eq!(decode_message(&hex("04 00 0004 00000001")), Err(WireError::BadLength(4)));
    assert!(matches!(
        decode_message(&hex("04 12 0008 00000001")),
        Err(WireError::UnsupportedType { msg_type: 0x12, length: 8 })
    ));
}

#[test]
fn framing_reassembles_and_skips_unsupported() {
    let mut acc = Vec::new();
    assert!(frame_stream(&mut acc, &[]).unwrap().is_empty());
    let hello = encode_message(&Message::new(5, Body::Hello)).unwrap();
    let barrier = hex("04 14 0008 00000009");
    let stream = [barrier, hello.clone()].concat();
    assert!(frame_stream(&mut acc, &stream[..11]).unwrap().is_empty());
    assert_eq!(frame_stream(&mut acc, &stream[11..]).unwrap(), vec![Message::new(5, Body::Hello)]);
    assert!(acc.is_empty());

    let mut framer = StreamFramer::new();
    framer.push(&hex("04 14 0008 00000009")).unwrap();
    assert_eq!(framer.skipped(), 1);
}

#[test]
fn five_packet_outs_in_one_segment() {
    let msgs: Vec<Message> =
        (0..5u32).map(|i| Message::new(i, Body::PacketOut(PacketOut::new(1, vec![i as u8; 60])))).collect();
    let seg: Vec<u8> = msgs.iter().flat_map(|m| encode_message(m).unwrap()).collect();
    assert_eq!(frame_stream(&mut Vec::new(), &seg).unwrap(), msgs);
}
