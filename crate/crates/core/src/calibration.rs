//! Switch delay calibration: how long PacketOuts take to leave the switch and
//! how long replies take to come back as PacketIns, from the simulated
//! switch's event log.

use std::io::{Read, Write};
use std::net::Ipv4Addr;
use std::time::Duration;

use crate::controller::ControllerConfig;
use crate::netsim::{LogKind, SimTopology, SwitchLogEntry, TargetSpec};
use crate::pktlab::{ICMP_ECHO_REPLY, ICMP_ECHO_REQUEST};
use crate::probeengine::{ArpMode, EngineError, PingRequest, TaskKind};
use crate::report::{fraction_at_most, percentile, ReportError};
use crate::testbed::{Testbed, TestbedError};

pub const CALIBRATION_TARGET: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 1);

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSummary {
    /// T(probe) − R(pktout) per echo-request PacketOut, in arrival order, µs.
    pub pktout_delays_us: Vec<u64>,
    /// T(pktin) − R(response) per echo-reply PacketIn, µs.
    pub pktin_delays_us: Vec<u64>,
    /// Adjacent PacketOuts whose frames left in the opposite order.
    pub reordered: usize,
}

impl CalibrationSummary {
    pub fn from_log(log: &[SwitchLogEntry]) -> Self {
        let outs: Vec<&SwitchLogEntry> =
            log.iter().filter(|e| e.kind == LogKind::PacketOut && e.icmp_type == Some(ICMP_ECHO_REQUEST)).collect();
        let reordered = outs.windows(2).filter(|w| w[1].emitted_us < w[0].emitted_us).count();
        CalibrationSummary {
            pktout_delays_us: outs.iter().map(|e| e.delay().as_micros() as u64).collect(),
            pktin_delays_us: log
                .iter()
                .filter(|e| e.kind == LogKind::PacketIn && e.icmp_type == Some(ICMP_ECHO_REPLY))
                .map(|e| e.delay().as_micros() as u64)
                .collect(),
            reordered,
        }
    }

    fn ms(v: &[u64]) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|&us| us as f64 / 1e3).collect();
        out.sort_by(f64::total_cmp);
        out
    }

    /// Fraction of PacketOut delays within [lo, hi].
    pub fn pktout_fraction_within(&self, lo: Duration, hi: Duration) -> f64 {
        let (lo, hi) = (lo.as_micros() as u64, hi.as_micros() as u64);
        let n = self.pktout_delays_us.len();
        self.pktout_delays_us.iter().filter(|&&d| d >= lo && d <= hi).count() as f64 / n.max(1) as f64
    }

    pub fn pktin_fraction_at_most(&self, limit: Duration) -> f64 {
        fraction_at_most(&Self::ms(&self.pktin_delays_us), limit.as_secs_f64() * 1e3)
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (name, v) in [("PacketOut", &self.pktout_delays_us), ("PacketIn", &self.pktin_delays_us)] {
            let ms = Self::ms(v);
            write!(w, "{name:<10} n={:<6}", ms.len())?;
            if !ms.is_empty() {
                write!(w, " min={:.3}", ms[0])?;
                for p in [50, 90, 95, 99] {
                    write!(w, " p{p}={:.3}", percentile(&ms, p))?;
                }
                write!(w, " max={:.3} ms", ms[ms.len() - 1])?;
            }
            writeln!(w)?;
        }
        writeln!(
            w,
            "PacketOut delay in [1.5, 2.0] ms: {:.2}%",
            100.0 * self.pktout_fraction_within(Duration::from_micros(1500), Duration::from_micros(2000))
        )?;
        writeln!(w, "PacketIn delay <= 1.0 ms: {:.2}%", 100.0 * self.pktin_fraction_at_most(Duration::from_millis(1)))?;
        writeln!(w, "reordered emissions: {}", self.reordered)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Testbed(#[from] TestbedError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Runs `n` single-probe pings against the calibration target inside a
/// virtual-clock testbed and summarises the switch log. Each probe is sent
/// once the previous one has come back, so queueing never inflates a delay.
/// The probe source is announced once per session so ARP frames do not
/// share the switch queue with probes.
pub fn run_calibration(mut topo: SimTopology, n: usize, seed: u64) -> Result<CalibrationSummary, CalibrationError> {
    topo.targets.entry(CALIBRATION_TARGET).or_insert_with(|| TargetSpec::new(Duration::from_millis(1)));
    let mut config = ControllerConfig::default();
    config.engine.gratuitous_arp = ArpMode::OnConnect;
    let mut tb = Testbed::with_seed(topo, config, seed)?;
    tb.switch_mut().take_event_log();
    let req = PingRequest { target: CALIBRATION_TARGET, num: 1, payload: Vec::new(), out_port: 1 };
    for i in 0..n {
        let id = tb.start_ping(&req)?;
        tb.run_task(id);
        if i % 4096 == 4095 {
            tb.controller_mut().clear_state(TaskKind::Ping);
        }
    }
    tb.run_until_idle();
    Ok(CalibrationSummary::from_log(tb.switch().event_log()))
}

pub fn write_event_log<W: Write>(w: W, log: &[SwitchLogEntry]) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    for e in log {
        out.serialize(e)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_event_log<R: Read>(r: R) -> Result<Vec<SwitchLogEntry>, ReportError> {
    let mut reader = csv::Reader::from_reader(r);
    Ok(reader.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::DelayModel;

    #[test]
    fn constant_model_measures_exactly() {
        let topo = SimTopology {
            pktout_delay: DelayModel::constant_ms(2.0),
            pktin_delay: DelayModel::constant_ms(0.5),
            control_link_delay: DelayModel::constant_ms(1.0),
            ..SimTopology::default()
        };
        let s = run_calibration(topo, 50, 1).unwrap();
        assert_eq!(s.pktout_delays_us, vec![2000; 50]);
        assert_eq!(s.pktin_delays_us, vec![500; 50]);
        assert_eq!(s.reordered, 0);
    }

    #[test]
    fn event_log_csv_round_trip() {
        let log = vec![
            SwitchLogEntry { kind: LogKind::PacketOut, received_us: 5, emitted_us: 9, port: 1, icmp_type: Some(8) },
            SwitchLogEntry { kind: LogKind::PacketIn, received_us: 12, emitted_us: 20, port: 1, icmp_type: None },
        ];
        let mut buf = Vec::new();
        write_event_log(&mut buf, &log).unwrap();
        assert_eq!(read_event_log(&buf[..]).unwrap(), log);
    }

    #[test]
    fn reordering_detected_in_log() {
        let e = |r, t| SwitchLogEntry {
            kind: LogKind::PacketOut,
            received_us: r,
            emitted_us: t,
            port: 1,
            icmp_type: Some(8),
        };
        let s = CalibrationSummary::from_log(&[e(0, 10), e(1, 5), e(2, 12)]);
        assert_eq!(s.reordered, 1);
    }
}
