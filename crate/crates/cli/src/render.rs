//! Human-readable output.

use std::io::{self, Write};

use ofprobe_core::calibration::CalibrationSummary;
use ofprobe_core::probeengine::{PingDump, ProbeEntry, Termination, TracerouteDump};
use ofprobe_core::report::dump_estimates_us;

fn ms(us: u64) -> String {
    format!("{:.3} ms", us as f64 / 1e3)
}

fn corrected(p: &ProbeEntry, rtt_cs_us: u64) -> Option<u64> {
    p.t_in_us().map(|t_in| t_in.saturating_sub(p.t_out_us()).saturating_sub(rtt_cs_us))
}

pub fn ping(out: &mut impl Write, dump: &PingDump, icmp_id: u16) -> io::Result<()> {
    write!(out, "PING {} icmp_id={icmp_id} probes={}", dump.target, dump.num)?;
    match dump.rtt_cs_us {
        Some(us) => writeln!(out, " rtt_cs={}", ms(us))?,
        None => writeln!(out, " rtt_cs=unknown")?,
    }
    let estimates = dump_estimates_us(dump);
    for seq in 0..dump.num as usize {
        let responder = dump.probes.get(seq).and_then(ProbeEntry::responder);
        match (estimates.get(seq).copied().flatten(), responder) {
            (Some(us), Some(from)) => writeln!(out, "seq={seq} from={from} rtt={}", ms(us))?,
            (Some(us), None) => writeln!(out, "seq={seq} rtt={}", ms(us))?,
            _ => writeln!(out, "seq={seq} lost")?,
        }
    }
    let answered = estimates.iter().flatten().count();
    writeln!(out, "{answered}/{} answered", dump.num)
}

pub fn traceroute(out: &mut impl Write, dump: &TracerouteDump, icmp_id: u16) -> io::Result<()> {
    writeln!(out, "TRACEROUTE {} icmp_id={icmp_id} probes_per_ttl={}", dump.target, dump.probes_per_ttl)?;
    let rtt_cs = dump.rtt_cs_us.unwrap_or(0);
    for (i, probes) in dump.hops.iter().enumerate() {
        write!(out, "{:>2}", i + 1)?;
        let mut last_responder = None;
        for k in 0..dump.probes_per_ttl as usize {
            let Some(p) = probes.get(k) else {
                write!(out, "  *")?;
                continue;
            };
            match (p.responder(), corrected(p, rtt_cs)) {
                (Some(r), Some(us)) => {
                    if last_responder != Some(r) {
                        write!(out, "  {r}")?;
                        last_responder = Some(r);
                    }
                    write!(out, "  {}", ms(us))?;
                }
                _ => write!(out, "  *")?,
            }
        }
        writeln!(out)?;
    }
    match dump.terminated {
        Termination::DestinationReached => writeln!(out, "reached {}", dump.target),
        Termination::MaxTtl => writeln!(out, "target unreachable"),
        Termination::InProgress => writeln!(out, "incomplete (client timeout)"),
    }
}

pub fn calibration_csv(out: impl Write, summary: &CalibrationSummary) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "delay_us"])?;
    for (kind, v) in [("packet_out", &summary.pktout_delays_us), ("packet_in", &summary.pktin_delays_us)] {
        for d in v.iter() {
            w.write_record([kind, &d.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> String {
        let mut buf = Vec::new();
        f(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn ping_lines_show_corrected_rtt_or_lost() {
        let target = "198.51.100.7".parse().unwrap();
        let dump = PingDump {
            target,
            num: 3,
            rtt_cs_us: Some(10_000),
            complete: true,
            probes: vec![
                ProbeEntry(1_000, Some(63_500), Some(target)),
                ProbeEntry(1_001, None, None),
                ProbeEntry(1_002, Some(5_000), Some(target)),
            ],
        };
        let s = text(|o| ping(o, &dump, 4));
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "PING 198.51.100.7 icmp_id=4 probes=3 rtt_cs=10.000 ms");
        assert_eq!(lines[1], "seq=0 from=198.51.100.7 rtt=52.500 ms");
        assert_eq!(lines[2], "seq=1 lost");
        // negative corrections clamp to zero
        assert_eq!(lines[3], "seq=2 from=198.51.100.7 rtt=0.000 ms");
        assert_eq!(lines[4], "2/3 answered");
    }

    #[test]
    fn ping_lists_unsent_probes_as_lost() {
        let dump =
            PingDump { target: "192.0.2.1".parse().unwrap(), num: 2, rtt_cs_us: None, complete: false, probes: vec![] };
        let s = text(|o| ping(o, &dump, 0));
        assert!(s.contains("rtt_cs=unknown"));
        assert_eq!(s.matches(" lost").count(), 2);
    }

    #[test]
    fn traceroute_table_has_stars_and_footer() {
        let r1 = "10.0.1.1".parse().unwrap();
        let tgt = "198.51.100.9".parse().unwrap();
        let dump = TracerouteDump {
            target: tgt,
            probes_per_ttl: 2,
            rtt_cs_us: Some(1_000),
            terminated: Termination::DestinationReached,
            hops: vec![
                vec![ProbeEntry(0, Some(3_000), Some(r1)), ProbeEntry(1, Some(3_201), Some(r1))],
                vec![ProbeEntry(2, None, None), ProbeEntry(3, None, None)],
                vec![ProbeEntry(4, Some(11_004), Some(tgt)), ProbeEntry(5, None, None)],
            ],
        };
        let s = text(|o| traceroute(o, &dump, 1));
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[1], " 1  10.0.1.1  2.000 ms  2.200 ms");
        assert_eq!(lines[2], " 2  *  *");
        assert_eq!(lines[3], " 3  198.51.100.9  10.000 ms  *");
        assert_eq!(lines[4], "reached 198.51.100.9");

        let silent = TracerouteDump {
            terminated: Termination::MaxTtl,
            hops: vec![vec![ProbeEntry(0, None, None)]; 30],
            probes_per_ttl: 1,
            ..dump
        };
        let s = text(|o| traceroute(o, &silent, 1));
        assert_eq!(s.lines().filter(|l| l.ends_with("  *")).count(), 30);
        assert_eq!(s.lines().last(), Some("target unreachable"));
    }
}
