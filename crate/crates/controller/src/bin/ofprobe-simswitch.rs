use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use log::info;
use ofprobe_controller::simswitch::{run_sim_switch, SimSwitchOptions};
use ofprobe_core::netsim::SimTopology;

/// Simulated OpenFlow switch with a virtual dataplane, running in real time
/// against a controller.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Topology file; the default topology has no targets.
    #[arg(short, long)]
    topology: Option<PathBuf>,
    #[arg(short, long, default_value = "127.0.0.1:6633")]
    controller: SocketAddr,
    /// Append switch timing observations to this CSV file.
    #[arg(long)]
    event_log: Option<PathBuf>,
    /// RNG seed; otherwise OFPROBE_SIM_SEED, then the topology's seed, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let topology = match &args.topology {
        Some(path) => SimTopology::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => SimTopology::default(),
    };
    let seed = match args.seed {
        Some(s) => s,
        None => topology.resolve_seed()?,
    };
    info!("{} targets, seed {seed}", topology.targets.len());
    let opts = SimSwitchOptions { topology, seed, controller: args.controller, event_log: args.event_log };
    let stats = run_sim_switch(opts, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    info!("{} packet-outs, {} packet-ins", stats.packet_outs, stats.packet_ins);
    Ok(())
}
