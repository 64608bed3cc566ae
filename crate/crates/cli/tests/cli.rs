use std::io::{Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener};
use std::path::PathBuf;
use std::process::{Command, Output};
use std::thread;
use std::time::Duration;

use ofprobe_controller::simswitch::{run_sim_switch, SimSwitchOptions};
use ofprobe_controller::DaemonConfig;
use ofprobe_core::controller::ControllerConfig;
use ofprobe_core::netsim::{DelayModel, SimTopology, TargetSpec};
use ofprobe_core::probeengine::PingRequest;
use ofprobe_core::report::ErrorReport;
use ofprobe_core::testbed::Testbed;
use tempfile::TempDir;
use tokio::sync::oneshot;

const NEAR: &str = "198.51.100.50";
const LOSSY: &str = "198.51.100.66";
const PATHED: &str = "198.51.100.30";
const UNROUTED: &str = "203.0.113.99";

fn topology() -> SimTopology {
    let mut topo = SimTopology {
        control_link_delay: DelayModel::constant_ms(1.0),
        pktout_delay: DelayModel::constant_ms(2.0),
        pktin_delay: DelayModel::constant_ms(0.5),
        ..SimTopology::default()
    };
    topo.targets.insert(NEAR.parse().unwrap(), TargetSpec::new(Duration::from_millis(50)));
    topo.targets.insert(LOSSY.parse().unwrap(), TargetSpec::new(Duration::from_millis(20)).with_loss(1.0));
    let hops = vec![
        (Ipv4Addr::new(10, 0, 1, 1), Duration::from_millis(1)),
        (Ipv4Addr::new(10, 0, 2, 1), Duration::from_millis(2)),
    ];
    topo.targets.insert(PATHED.parse().unwrap(), TargetSpec::new(Duration::from_millis(12)).with_hops(hops));
    topo
}

/// A controller and realtime simulated switch on loopback, torn down on drop.
struct Live {
    url: String,
    event_log: PathBuf,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
    _dir: TempDir,
}

impl Live {
    fn start(edit: impl FnOnce(&mut DaemonConfig)) -> Live {
        let dir = tempfile::tempdir().unwrap();
        let event_log = dir.path().join("events.csv");
        let mut config = DaemonConfig::default();
        config.listen.openflow = "127.0.0.1:0".parse().unwrap();
        config.listen.http = "127.0.0.1:0".parse().unwrap();
        config.probe.timeout_ms = 500;
        edit(&mut config);
        let token = config.policy.auth_token.clone();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop, stop_rx) = oneshot::channel::<()>();
        let log = event_log.clone();
        let thread = thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
            rt.block_on(async move {
                let bound = ofprobe_controller::bind(config).await.unwrap();
                let (of, http) = (bound.openflow_addr().unwrap(), bound.http_addr().unwrap());
                let (sw_stop, sw_stop_rx) = oneshot::channel::<()>();
                let server = tokio::spawn(bound.serve(async {
                    let _ = stop_rx.await;
                }));
                let opts = SimSwitchOptions { topology: topology(), seed: 9, controller: of, event_log: Some(log) };
                let switch = tokio::spawn(run_sim_switch(opts, async {
                    let _ = sw_stop_rx.await;
                }));
                addr_tx.send(http).unwrap();
                server.await.unwrap().unwrap();
                let _ = sw_stop.send(());
                let _ = switch.await;
            });
        });
        let http: SocketAddr = addr_rx.recv().unwrap();
        let live = Live { url: format!("http://{http}"), event_log, stop: Some(stop), thread: Some(thread), _dir: dir };
        live.wait_for_switch(token.as_deref());
        live
    }

    /// Polls until the switch session is up; dumps answer before it is.
    fn wait_for_switch(&self, token: Option<&str>) {
        for _ in 0..100 {
            let mut cmd = Command::new(env!("CARGO_BIN_EXE_ofprobe"));
            cmd.args(["--controller", &self.url, "ping", "--target", NEAR, "--probe-timeout-ms", "500"]);
            match token {
                Some(t) => cmd.env("OFPROBE_TOKEN", t),
                None => cmd.env_remove("OFPROBE_TOKEN"),
            };
            if cmd.output().unwrap().status.success() {
                return;
            }
            thread::sleep(Duration::from_millis(50));
        }
        panic!("switch never connected");
    }
}

impl Drop for Live {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn ofprobe(url: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofprobe"))
        .arg("--controller")
        .arg(url)
        .args(args)
        .env_remove("OFPROBE_TOKEN")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn rtt_ms(line: &str) -> f64 {
    let v = line.split("rtt=").nth(1).unwrap().trim_end_matches(" ms");
    v.parse().unwrap()
}

#[test]
fn ping_traceroute_dump_and_report_against_a_live_controller() {
    let live = Live::start(|_| {});

    let o = ofprobe(&live.url, &["ping", "--target", NEAR, "--num", "1", "--probe-timeout-ms", "500"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("seq=0")).unwrap();
    assert!(line.contains(&format!("from={NEAR}")), "{text}");
    // truth 50 ms plus the 2.5 ms the correction cannot remove, plus host scheduling
    let rtt = rtt_ms(line);
    assert!((50.0..65.0).contains(&rtt), "{text}");

    let o = ofprobe(&live.url, &["ping", "--target", LOSSY, "--num", "2", "--probe-timeout-ms", "500"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o).matches(" lost").count(), 2, "{}", stdout(&o));

    let o =
        ofprobe(&live.url, &["traceroute", "--target", PATHED, "--probes-per-ttl", "2", "--probe-timeout-ms", "500"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows[0].starts_with(" 1  10.0.1.1  "), "{text}");
    assert!(rows[1].starts_with(" 2  10.0.2.1  "), "{text}");
    assert!(rows[2].starts_with(&format!(" 3  {PATHED}  ")), "{text}");
    assert_eq!(rows[2].matches(" ms").count(), 2, "two RTT columns: {text}");
    assert_eq!(rows[3], format!("reached {PATHED}"));

    let o = ofprobe(&live.url, &["traceroute", "--target", UNROUTED, "--probe-timeout-ms", "500"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.ends_with("  *")).count(), 30, "{text}");
    assert_eq!(text.lines().last(), Some("target unreachable"));

    // report straight from the controller's dump URL, against the sim's own topology
    let dir = tempfile::tempdir().unwrap();
    let topo_path = dir.path().join("topo.toml");
    std::fs::write(&topo_path, topology().to_toml_string()).unwrap();
    let csv = dir.path().join("rows.csv");
    let o = ofprobe(
        &live.url,
        &[
            "report",
            "--dump",
            &format!("{}/ping/dump", live.url),
            "--topology",
            topo_path.to_str().unwrap(),
            "-k",
            "1",
            "--csv",
            csv.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{o:?}");
    let report = ErrorReport::read_csv(std::fs::File::open(&csv).unwrap(), 1).unwrap();
    // the lossy target answers nothing and is left out
    assert!(!report.rows.is_empty());
    assert!(report.rows.iter().all(|r| r.target == NEAR.parse::<Ipv4Addr>().unwrap()));

    let saved = dir.path().join("dump.json");
    let o = ofprobe(&live.url, &["dump", "ping", "--out", saved.to_str().unwrap(), "--clear"]);
    assert!(o.status.success(), "{o:?}");
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&saved).unwrap()).unwrap();
    assert!(doc.as_object().unwrap().len() >= 3);
    assert_eq!(stdout(&ofprobe(&live.url, &["dump", "ping"])).trim(), "{}");
}

#[test]
fn calibrate_from_the_live_switch_event_log() {
    let live = Live::start(|c| c.probe.gratuitous_arp = ofprobe_core::probeengine::ArpMode::OnConnect);
    let log = live.event_log.to_str().unwrap().to_owned();
    let o = ofprobe(
        &live.url,
        &["calibrate", "--event-log", &log, "--target", NEAR, "--samples", "5", "--probe-timeout-ms", "500"],
    );
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.contains("PacketOut delay in [1.5, 2.0] ms: 100.00%"), "{text}");
    assert!(text.contains("PacketIn delay <= 1.0 ms: 100.00%"), "{text}");
    assert!(text.contains("reordered emissions: 0"), "{text}");
}

#[test]
fn bearer_token_comes_from_the_environment() {
    let live = Live::start(|c| c.policy.auth_token = Some("t0ken".into()));
    let o = ofprobe(&live.url, &["dump", "ping"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("403"));
    let o = Command::new(env!("CARGO_BIN_EXE_ofprobe"))
        .args(["--controller", &live.url, "dump", "ping"])
        .env("OFPROBE_TOKEN", "t0ken")
        .output()
        .unwrap();
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn unreachable_controller_exits_nonzero() {
    let o = ofprobe("http://127.0.0.1:1", &["ping", "--target", NEAR]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot reach controller"));
    let o = ofprobe("not a url", &["dump"]);
    assert_eq!(o.status.code(), Some(1));
}

/// Serves one canned HTTP response.
fn canned(status: &str, body: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let status = status.to_owned();
    thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut buf = [0u8; 4096];
        let _ = s.read(&mut buf);
        let resp = format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        );
        s.write_all(resp.as_bytes()).unwrap();
    });
    format!("http://{addr}")
}

#[test]
fn state_full_has_its_own_exit_code() {
    let url = canned("503 Service Unavailable", r#"{"error":"full","state_full":true,"hint":"dump then clear"}"#);
    let o = ofprobe(&url, &["ping", "--target", NEAR]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("dump then clear"));

    let url = canned("429 Too Many Requests", r#"{"error":"rate limit"}"#);
    let o = ofprobe(&url, &["ping", "--target", NEAR]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("429"));
}

#[test]
fn report_from_files_with_constant_delays() {
    let mut topo = SimTopology {
        control_link_delay: DelayModel::constant_ms(5.0),
        pktout_delay: DelayModel::constant_ms(2.0),
        pktin_delay: DelayModel::constant_ms(0.5),
        ..SimTopology::default()
    };
    for i in 0..20u8 {
        topo.targets
            .insert(Ipv4Addr::new(198, 51, 100, i + 1), TargetSpec::new(Duration::from_millis(10 + 7 * i as u64)));
    }
    let mut tb = Testbed::with_seed(topo.clone(), ControllerConfig::default(), 1).unwrap();
    for t in topo.targets.keys() {
        let id = tb.start_ping(&PingRequest { target: *t, num: 1, payload: vec![], out_port: 1 }).unwrap();
        tb.run_task(id);
    }
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump.json");
    let topo_path = dir.path().join("topo.toml");
    let (csv, cdf, rel) = (dir.path().join("rows.csv"), dir.path().join("cdf.csv"), dir.path().join("rel.csv"));
    std::fs::write(&dump, serde_json::to_string(&tb.controller().dump_state().ping).unwrap()).unwrap();
    std::fs::write(&topo_path, topo.to_toml_string()).unwrap();
    let p = |p: &PathBuf| p.to_str().unwrap().to_owned();
    let o = ofprobe(
        "http://unused",
        &[
            "report",
            "--dump",
            &p(&dump),
            "--topology",
            &p(&topo_path),
            "-k",
            "1",
            "--csv",
            &p(&csv),
            "--cdf",
            &p(&cdf),
            "--rel-cdf",
            &p(&rel),
        ],
    );
    assert!(o.status.success(), "{o:?}");
    let report = ErrorReport::read_csv(std::fs::File::open(&csv).unwrap(), 1).unwrap();
    assert_eq!(report.rows.len(), 20);
    // every estimate carries the 2.5 ms of switch delay, less the 1 us send-order bump
    assert!(report.rows.iter().all(|r| (2_490.0..=2_500.0).contains(&r.abs_error_us)), "{:?}", report.abs_errors_us());
    let cdf_text = std::fs::read_to_string(&cdf).unwrap();
    let points: Vec<(f64, f64)> = cdf_text
        .lines()
        .skip(1)
        .map(|l| {
            let (x, y) = l.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect();
    assert!(points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    assert_eq!(points.last().unwrap().1, 1.0);
    assert!(std::fs::read_to_string(&rel).unwrap().starts_with("rel_error,fraction"));

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "{}").unwrap();
    let o = ofprobe("http://unused", &["report", "--dump", &p(&empty), "--topology", &p(&topo_path)]);
    assert!(o.status.success(), "{o:?}");

    let other = dir.path().join("other.toml");
    std::fs::write(&other, SimTopology::default().to_toml_string()).unwrap();
    let o = ofprobe("http://unused", &["report", "--dump", &p(&dump), "--topology", &p(&other)]);
    assert!(!o.status.success());
}

#[test]
fn in_process_calibration_with_constant_model() {
    let dir = tempfile::tempdir().unwrap();
    let topo = SimTopology {
        pktout_delay: DelayModel::constant_ms(2.0),
        pktin_delay: DelayModel::constant_ms(0.5),
        ..SimTopology::default()
    };
    let path = dir.path().join("topo.toml");
    std::fs::write(&path, topo.to_toml_string()).unwrap();
    let csv = dir.path().join("delays.csv");
    let o = ofprobe(
        "http://unused",
        &["calibrate", "--samples", "200", "--topology", path.to_str().unwrap(), "--csv", csv.to_str().unwrap()],
    );
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.contains("PacketOut  n=200"), "{text}");
    assert!(text.contains("p50=2.000 p90=2.000 p95=2.000 p99=2.000 max=2.000 ms"), "{text}");
    assert!(text.contains("reordered emissions: 0"), "{text}");
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().filter(|l| *l == "packet_out,2000").count(), 200);
}
