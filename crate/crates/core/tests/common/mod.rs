#![allow(dead_code)]

use std::net::Ipv4Addr;

use ofprobe_core::ofwire::{
    Body, FlowMod, FlowModCommand, Match, MatchField, Message, OutputAction, PacketIn, PacketInReason, PacketOut,
    SwitchFeatures, NO_BUFFER,
};
use proptest::prelude::*;

pub fn arb_frame(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 1..=max)
}

fn arb_action() -> impl Strategy<Value = OutputAction> {
    (any::<u32>(), any::<u16>()).prop_map(|(port, max_len)| OutputAction { port, max_len })
}

pub fn arb_match() -> impl Strategy<Value = Match> {
    (
        prop::option::of(any::<u16>()),
        prop::option::of(any::<u8>()),
        prop::option::of(any::<u32>().prop_map(Ipv4Addr::from)),
        prop::option::of(any::<u8>()),
        prop::option::of(any::<u8>()),
        any::<u64>(),
    )
        .prop_map(|(et, proto, dst, ty, code, order)| {
            let mut fields: Vec<MatchField> = [
                et.map(MatchField::EthType),
                proto.map(MatchField::IpProto),
                dst.map(MatchField::Ipv4Dst),
                ty.map(MatchField::Icmpv4Type),
                code.map(MatchField::Icmpv4Code),
            ]
            .into_iter()
            .flatten()
            .collect();
            // field order on the wire is the caller's; shuffle deterministically
            if !fields.is_empty() {
                let n = fields.len();
                fields.rotate_left((order % n as u64) as usize);
            }
            Match::new(fields).expect("kinds are distinct")
        })
}

fn arb_command() -> impl Strategy<Value = FlowModCommand> {
    prop_oneof![
        Just(FlowModCommand::Add),
        Just(FlowModCommand::Modify),
        Just(FlowModCommand::ModifyStrict),
        Just(FlowModCommand::Delete),
        Just(FlowModCommand::DeleteStrict),
    ]
}

fn arb_flow_mod() -> impl Strategy<Value = FlowMod> {
    (
        (any::<u64>(), any::<u64>(), any::<u8>(), arb_command()),
        (any::<u16>(), any::<u16>(), any::<u16>(), any::<u32>()),
        (any::<u32>(), any::<u32>(), any::<u16>()),
        arb_match(),
        prop::collection::vec(arb_action(), 0..3),
    )
        .prop_map(
            |(
                (cookie, cookie_mask, table_id, command),
                (idle, hard, priority, buffer_id),
                (out_port, out_group, flags),
                matches,
                actions,
            )| FlowMod {
                cookie,
                cookie_mask,
                table_id,
                command,
                idle_timeout: idle,
                hard_timeout: hard,
                priority,
                buffer_id,
                out_port,
                out_group,
                flags,
                matches,
                actions,
            },
        )
}

fn arb_packet_out() -> impl Strategy<Value = PacketOut> {
    (any::<u32>(), prop::collection::vec(arb_action(), 0..3), arb_frame(300))
        .prop_map(|(in_port, actions, frame)| PacketOut { buffer_id: NO_BUFFER, in_port, actions, frame })
}

fn arb_packet_in() -> impl Strategy<Value = PacketIn> {
    (
        any::<u32>(),
        0u16..64,
        prop_oneof![Just(PacketInReason::NoMatch), Just(PacketInReason::Action), Just(PacketInReason::InvalidTtl)],
        any::<u8>(),
        any::<u64>(),
        any::<u32>(),
        arb_frame(300),
    )
        .prop_map(|(buffer_id, extra, reason, table_id, cookie, in_port, frame)| PacketIn {
            buffer_id,
            total_len: frame.len() as u16 + extra,
            reason,
            table_id,
            cookie,
            in_port,
            frame,
        })
}

pub fn arb_body() -> impl Strategy<Value = Body> {
    prop_oneof![
        Just(Body::Hello),
        prop::collection::vec(any::<u8>(), 0..64).prop_map(Body::EchoRequest),
        prop::collection::vec(any::<u8>(), 0..64).prop_map(Body::EchoReply),
        Just(Body::FeaturesRequest),
        (any::<u64>(), any::<u32>(), any::<u8>(), any::<u8>(), any::<u32>()).prop_map(|(d, b, t, a, c)| {
            Body::FeaturesReply(SwitchFeatures {
                datapath_id: d,
                n_buffers: b,
                n_tables: t,
                auxiliary_id: a,
                capabilities: c,
            })
        }),
        arb_flow_mod().prop_map(Body::FlowMod),
        arb_packet_out().prop_map(Body::PacketOut),
        arb_packet_in().prop_map(Body::PacketIn),
    ]
}

pub fn arb_message() -> impl Strategy<Value = Message> {
    (any::<u32>(), arb_body()).prop_map(|(xid, body)| Message::new(xid, body))
}

pub fn hex(s: &str) -> Vec<u8> {
    let digits: String = s.chars().filter(|c| c.is_ascii_hexdigit()).collect();
    (0..digits.len()).step_by(2).map(|i| u8::from_str_radix(&digits[i..i + 2], 16).unwrap()).collect()
}
