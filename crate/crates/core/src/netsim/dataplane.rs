use std::time::Duration;

use rand::Rng;

use super::SimTopology;
use crate::pktlab::{
    self, build_echo_reply, build_router_id_reply, build_time_exceeded, ICMP_ECHO_REQUEST, ICMP_ROUTER_ID,
    ROUTER_ID_QUERY_CODE,
};
use crate::time::Timestamp;

/// What the virtual network sends back for a frame the switch emitted at
/// `emit`: each reply with the time it reaches the switch again.
///
/// Echo requests to a responding target come back after its base RTT, or as
/// Time Exceeded from the hop where the TTL runs out. Router-ID queries to a
/// configured host are answered. Everything else vanishes, as does any reply
/// lost to the target's loss probability.
pub fn dataplane_process<R: Rng + ?Sized>(
    topo: &SimTopology,
    rng: &mut R,
    frame: &[u8],
    emit: Timestamp,
) -> Vec<(Vec<u8>, Timestamp)> {
    let Ok(Some(pkt)) = pktlab::inspect_icmp(frame) else {
        return Vec::new();
    };
    match (pkt.icmp_type, pkt.icmp_code) {
        (ICMP_ECHO_REQUEST, 0) => {
            let Some(target) = topo.targets.get(&pkt.dst_ip) else {
                return Vec::new();
            };
            if target.loss_prob > 0.0 && rng.random::<f64>() < target.loss_prob {
                return Vec::new();
            }
            let ttl = pkt.ttl as usize;
            if ttl <= target.hops.len() {
                let one_way: Duration = target.hops[..ttl].iter().map(|h| h.delay).sum();
                build_time_exceeded(target.hops[ttl - 1].ip, frame)
                    .map(|r| vec![(r, emit + one_way * 2)])
                    .unwrap_or_default()
            } else if target.responds {
                build_echo_reply(frame).map(|r| vec![(r, emit + target.base_rtt)]).unwrap_or_default()
            } else {
                Vec::new()
            }
        }
        (ICMP_ROUTER_ID, ROUTER_ID_QUERY_CODE) => {
            let (Some(host), Some(rtt)) = (topo.router_id_hosts.get(&pkt.dst_ip), topo.router_id_rtt(pkt.dst_ip))
            else {
                return Vec::new();
            };
            build_router_id_reply(frame, &host.identity).map(|r| vec![(r, emit + rtt)]).unwrap_or_default()
        }
        _ => Vec::new(),
    }
}
