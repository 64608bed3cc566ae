mod client;
mod render;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ofprobe_core::calibration::{read_event_log, run_calibration, CalibrationSummary};
use ofprobe_core::netsim::SimTopology;
use ofprobe_core::probeengine::{PingDocument, PingDump, Termination, TracerouteDump};
use ofprobe_core::report::{cdf_points, parse_ping_dump, write_cdf_csv, ErrorReport};
use serde::Deserialize;
use serde_json::json;

use client::{Client, ClientError};

/// Exit status when the controller refuses a task because its table is full.
const EXIT_STATE_FULL: u8 = 3;
const POLL_INTERVAL: Duration = Duration::from_millis(100);

/// Client for the OpenFlow measurement controller.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Base URL of the controller's HTTP API.
    #[arg(long, global = true, env = "OFPROBE_CONTROLLER", default_value = "http://127.0.0.1:8080")]
    controller: String,
    /// Bearer token for controllers configured with one.
    #[arg(long, global = true, env = "OFPROBE_TOKEN", hide_env_values = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ping a target through the controller and print corrected RTTs.
    Ping {
        #[arg(long)]
        target: Ipv4Addr,
        #[arg(long, default_value_t = 1)]
        num: u32,
        #[arg(long, default_value = "")]
        payload: String,
        #[arg(long)]
        out_port: Option<u32>,
        /// The controller's per-probe timeout; the client waits this plus 2 s.
        #[arg(long, default_value_t = 3000)]
        probe_timeout_ms: u64,
    },
    /// Trace the path to a target and print a hop table.
    Traceroute {
        #[arg(long)]
        target: Ipv4Addr,
        #[arg(long, default_value_t = 1)]
        probes_per_ttl: u16,
        #[arg(long)]
        out_port: Option<u32>,
        #[arg(long, default_value_t = 3000)]
        probe_timeout_ms: u64,
    },
    /// Print a state dump as JSON, optionally clearing it afterwards.
    Dump {
        #[arg(value_enum, default_value_t = Kind::Ping)]
        kind: Kind,
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Clear the table once the dump is saved.
        #[arg(long)]
        clear: bool,
    },
    /// Compare a ping dump against simulator ground truth.
    Report {
        /// Dump file, or an http(s) URL such as <controller>/ping/dump.
        #[arg(long)]
        dump: String,
        #[arg(long)]
        topology: PathBuf,
        /// Probes per target averaged for the k-probe estimate.
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        /// Per-target rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// CDF of absolute error (ms) as two-column CSV.
        #[arg(long)]
        cdf: Option<PathBuf>,
        /// CDF of relative error as two-column CSV.
        #[arg(long)]
        rel_cdf: Option<PathBuf>,
    },
    /// Measure switch PacketOut and PacketIn processing delays.
    ///
    /// By default runs the simulator in-process on a virtual clock. With
    /// --event-log, analyses the CSV written by a running ofprobe-simswitch
    /// instead, first driving --samples pings to --target through the
    /// controller when a target is given.
    Calibrate {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        event_log: Option<PathBuf>,
        #[arg(long, requires = "event_log")]
        target: Option<Ipv4Addr>,
        /// Raw delays as CSV (kind, delay_us).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 3000)]
        probe_timeout_ms: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Kind {
    Ping,
    Traceroute,
    Routerid,
}

impl Kind {
    fn path(self) -> &'static str {
        match self {
            Kind::Ping => "/ping",
            Kind::Traceroute => "/traceroute",
            Kind::Routerid => "/routerid",
        }
    }
}

#[derive(Deserialize)]
struct Accepted {
    icmp_id: u16,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ofprobe: {e:#}");
            match e.downcast_ref::<ClientError>() {
                Some(ClientError::StateFull(_)) => ExitCode::from(EXIT_STATE_FULL),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let client = Client::new(&cli.controller, cli.token.clone());
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Ping { target, num, payload, out_port, probe_timeout_ms } => {
            let dump = ping(&client, target, num, &payload, out_port, probe_timeout_ms)?;
            render::ping(&mut out, &dump.1, dump.0)?;
        }
        Command::Traceroute { target, probes_per_ttl, out_port, probe_timeout_ms } => {
            let mut body = json!({ "tgt": target, "probes_per_ttl": probes_per_ttl });
            if let Some(p) = out_port {
                body["out_port"] = p.into();
            }
            let Accepted { icmp_id } = client.put("/traceroute/", &body)?;
            let deadline = Instant::now() + Duration::from_millis(probe_timeout_ms) + Duration::from_secs(2);
            let dump = poll(&client, "/traceroute/dump", icmp_id, deadline, |d: &TracerouteDump| {
                d.terminated != Termination::InProgress && d.hops.iter().flatten().all(|p| p.t_in_us().is_some())
            })?;
            render::traceroute(&mut out, &dump, icmp_id)?;
        }
        Command::Dump { kind, out: path, clear } => {
            let doc: serde_json::Value = client.get(&format!("{}/dump", kind.path()))?;
            let text = serde_json::to_string_pretty(&doc)?;
            match path {
                Some(p) => std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => writeln!(out, "{text}")?,
            }
            if clear {
                let _: serde_json::Value = client.post(&format!("{}/clear", kind.path()))?;
            }
        }
        Command::Report { dump, topology, k, csv, cdf, rel_cdf } => {
            let doc = load_dump(&client, &dump)?;
            let topo = SimTopology::load(&topology).with_context(|| format!("loading {}", topology.display()))?;
            let report = ErrorReport::build(&doc, &topo, k)?;
            write!(out, "{report}")?;
            if let Some(path) = csv {
                report.write_csv(create(&path)?)?;
            }
            if let Some(path) = cdf {
                let ms: Vec<f64> = report.abs_errors_us().iter().map(|us| us / 1e3).collect();
                write_cdf_csv(create(&path)?, ("abs_error_ms", "fraction"), &cdf_points(&ms))?;
            }
            if let Some(path) = rel_cdf {
                write_cdf_csv(create(&path)?, ("rel_error", "fraction"), &cdf_points(&report.rel_errors()))?;
            }
        }
        Command::Calibrate { samples, topology, seed, event_log, target, csv, probe_timeout_ms } => {
            let summary = match event_log {
                None => {
                    let topo = match &topology {
                        Some(p) => SimTopology::load(p).with_context(|| format!("loading {}", p.display()))?,
                        None => SimTopology::default(),
                    };
                    run_calibration(topo, samples, seed)?
                }
                Some(path) => {
                    if let Some(target) = target {
                        for _ in 0..samples {
                            ping(&client, target, 1, "", None, probe_timeout_ms)?;
                        }
                        // let the switch flush its last log lines
                        thread::sleep(Duration::from_millis(200));
                    }
                    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                    CalibrationSummary::from_log(&read_event_log(file)?)
                }
            };
            summary.write_summary(&mut out)?;
            if let Some(path) = csv {
                render::calibration_csv(create(&path)?, &summary)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn ping(
    client: &Client,
    target: Ipv4Addr,
    num: u32,
    payload: &str,
    out_port: Option<u32>,
    probe_timeout_ms: u64,
) -> anyhow::Result<(u16, PingDump)> {
    let mut body = json!({ "tgt": target, "num": num, "payload": payload });
    if let Some(p) = out_port {
        body["out_port"] = p.into();
    }
    let Accepted { icmp_id } = client.put("/ping/", &body)?;
    let deadline = Instant::now() + Duration::from_millis(probe_timeout_ms) + Duration::from_secs(2);
    let dump = poll(client, "/ping/dump", icmp_id, deadline, |d: &PingDump| d.complete)?;
    Ok((icmp_id, dump))
}

/// Polls a dump until the task satisfies `done` or the deadline passes, and
/// returns the last state seen either way.
fn poll<T: for<'de> Deserialize<'de>>(
    client: &Client,
    path: &str,
    icmp_id: u16,
    deadline: Instant,
    done: impl Fn(&T) -> bool,
) -> anyhow::Result<T> {
    loop {
        let mut doc: std::collections::BTreeMap<u16, T> = client.get(path)?;
        let Some(task) = doc.remove(&icmp_id) else {
            bail!("task {icmp_id} vanished from {path}; was the state cleared?");
        };
        if done(&task) {
            return Ok(task);
        }
        if Instant::now() >= deadline {
            log::warn!("task {icmp_id} still unresolved at the client timeout");
            return Ok(task);
        }
        thread::sleep(POLL_INTERVAL);
    }
}

fn load_dump(client: &Client, source: &str) -> anyhow::Result<PingDocument> {
    if source.starts_with("http://") || source.starts_with("https://") {
        let base = source.trim_end_matches('/');
        // accept either the dump URL itself or a bare controller URL
        let url = if base.ends_with("/ping/dump") { base.to_owned() } else { format!("{base}/ping/dump") };
        let (root, path) = url.split_at(url.len() - "/ping/dump".len());
        let remote = Client::new(root, client.token().map(str::to_owned));
        return Ok(remote.get(path)?);
    }
    let text = std::fs::read_to_string(source).with_context(|| format!("reading {source}"))?;
    Ok(parse_ping_dump(&text)?)
}
