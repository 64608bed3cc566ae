//! Daemon and simulated switch over real loopback sockets and wall-clock time.

use std::net::{Ipv4Addr, SocketAddr};
use std::time::Duration;

use ofprobe_controller::simswitch::{run_sim_switch, SimSwitchOptions};
use ofprobe_controller::DaemonConfig;
use ofprobe_core::calibration::read_event_log;
use ofprobe_core::netsim::{DelayModel, LogKind, SimTopology, TargetSpec};
use ofprobe_core::probeengine::{PingDump, TracerouteDump};
use serde_json::Value;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::oneshot;

const TARGET: &str = "198.51.100.20";
const PATHED: &str = "198.51.100.30";

fn topology() -> SimTopology {
    let mut topo = SimTopology {
        control_link_delay: DelayModel::constant_ms(2.0),
        pktout_delay: DelayModel::constant_ms(2.0),
        pktin_delay: DelayModel::constant_ms(0.5),
        ..SimTopology::default()
    };
    topo.targets.insert(TARGET.parse().unwrap(), TargetSpec::new(Duration::from_millis(20)));
    let hops = vec![
        (Ipv4Addr::new(10, 0, 1, 1), Duration::from_millis(1)),
        (Ipv4Addr::new(10, 0, 2, 1), Duration::from_millis(1)),
    ];
    topo.targets.insert(PATHED.parse().unwrap(), TargetSpec::new(Duration::from_millis(10)).with_hops(hops));
    topo
}

/// Minimal HTTP/1.1 client: one request per connection.
async fn http(addr: SocketAddr, method: &str, path: &str, body: &str) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).await.unwrap();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8(raw).unwrap();
    let status: u16 = text[9..12].parse().unwrap();
    let (_, body) = text.split_once("\r\n\r\n").unwrap();
    (status, serde_json::from_str(body).unwrap_or(Value::Null))
}

async fn wait_for<T>(mut f: impl AsyncFnMut() -> Option<T>) -> T {
    for _ in 0..100 {
        if let Some(v) = f().await {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("condition not reached within 5 s");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn ping_and_traceroute_over_tcp() {
    let mut config = DaemonConfig::default();
    config.listen.openflow = "127.0.0.1:0".parse().unwrap();
    config.listen.http = "127.0.0.1:0".parse().unwrap();
    let bound = ofprobe_controller::bind(config).await.unwrap();
    let (of_addr, http_addr) = (bound.openflow_addr().unwrap(), bound.http_addr().unwrap());
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(bound.serve(async {
        let _ = stop_rx.await;
    }));

    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("events.csv");
    let (sw_stop_tx, sw_stop_rx) = oneshot::channel::<()>();
    let opts =
        SimSwitchOptions { topology: topology(), seed: 3, controller: of_addr, event_log: Some(log_path.clone()) };
    let switch = tokio::spawn(run_sim_switch(opts, async {
        let _ = sw_stop_rx.await;
    }));

    wait_for(async || {
        let (_, d) = http(http_addr, "GET", "/diagnostics", "").await;
        (d["sessions"][0]["active"] == true).then_some(())
    })
    .await;

    let (s, v) = http(http_addr, "PUT", "/ping/", &format!(r#"{{"tgt":"{TARGET}","num":3}}"#)).await;
    assert_eq!((s, v["icmp_id"].as_u64()), (200, Some(0)));
    let dump: PingDump = wait_for(async || {
        let (_, d) = http(http_addr, "GET", "/ping/dump", "").await;
        let dump: PingDump = serde_json::from_value(d["0"].clone()).ok()?;
        (dump.complete && dump.probes.len() == 3).then_some(dump)
    })
    .await;
    let rtt_cs = dump.rtt_cs_us.unwrap();
    assert!(rtt_cs >= 4_000, "rtt_cs {rtt_cs}");
    for p in &dump.probes {
        assert_eq!(p.responder(), Some(TARGET.parse().unwrap()));
        let corrected = (p.t_in_us().unwrap() - p.t_out_us()).saturating_sub(rtt_cs);
        // 20 ms truth plus 2.5 ms switch residual, plus scheduling slack on a loaded host
        assert!((20_000..40_000).contains(&corrected), "corrected {corrected}");
    }

    let (s, v) = http(http_addr, "PUT", "/traceroute/", &format!(r#"{{"tgt":"{PATHED}","probes_per_ttl":1}}"#)).await;
    assert_eq!(s, 200, "{v}");
    let id = v["icmp_id"].as_u64().unwrap().to_string();
    let tr: TracerouteDump = wait_for(async || {
        let (_, d) = http(http_addr, "GET", "/traceroute/dump", "").await;
        let tr: TracerouteDump = serde_json::from_value(d[&id].clone()).ok()?;
        (tr.terminated != ofprobe_core::probeengine::Termination::InProgress).then_some(tr)
    })
    .await;
    let path: Vec<_> = tr.hops.iter().map(|h| h[0].responder()).collect();
    assert_eq!(
        path,
        vec![Some("10.0.1.1".parse().unwrap()), Some("10.0.2.1".parse().unwrap()), Some(PATHED.parse().unwrap())]
    );

    sw_stop_tx.send(()).unwrap();
    let stats = switch.await.unwrap().unwrap();
    assert!(stats.packet_ins >= 6);
    let log = read_event_log(std::fs::File::open(&log_path).unwrap()).unwrap();
    let outs: Vec<_> = log.iter().filter(|e| e.kind == LogKind::PacketOut).collect();
    assert!(!outs.is_empty());
    assert!(outs.iter().all(|e| e.delay() == Duration::from_millis(2)));

    stop_tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}

#[tokio::test]
async fn unreachable_controller_is_connect_failed() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let opts = SimSwitchOptions { topology: SimTopology::default(), seed: 0, controller: addr, event_log: None };
    let err = run_sim_switch(opts, std::future::pending()).await.unwrap_err();
    assert!(matches!(err, ofprobe_core::netsim::SimError::ConnectFailed(_)), "{err}");
}
