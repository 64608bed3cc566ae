//! Error statistics of corrected ping estimates against simulator ground truth.

use std::fmt;
use std::io::{Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::SimTopology;
use crate::probeengine::{PingDocument, PingDump};

pub const PERCENTILES: [u8; 4] = [50, 90, 95, 99];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("dump targets missing from the topology: {0:?}")]
    MismatchedTargets(Vec<Ipv4Addr>),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// One responsive target. Times are microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub icmp_id: u16,
    pub target: Ipv4Addr,
    pub truth_rtt_us: u64,
    /// Estimate from the first answered probe.
    pub est_rtt_us: u64,
    /// Mean estimate over the answered probes among the first k.
    pub est_rtt_mean_us: f64,
    pub answered: u32,
    /// |est_rtt_mean − truth|.
    pub abs_error_us: f64,
    /// abs_error / truth.
    pub rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub percentile: u8,
    pub abs_error_us: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub k: usize,
    pub rows: Vec<ErrorRow>,
    pub percentiles: Vec<PercentileRow>,
}

/// Corrected estimates of a dumped ping task, by sequence number; `None` for
/// unanswered probes.
pub fn dump_estimates_us(task: &PingDump) -> Vec<Option<u64>> {
    let rtt_cs = task.rtt_cs_us.unwrap_or(0);
    task.probes
        .iter()
        .map(|p| p.t_in_us().map(|t_in| t_in.saturating_sub(p.t_out_us()).saturating_sub(rtt_cs)))
        .collect()
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: u8) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p as f64 / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Empirical CDF as (value, cumulative fraction) pairs, both non-decreasing.
pub fn cdf_points(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(i, &x)| (x, (i + 1) as f64 / n)).collect()
}

/// Fraction of `values` at or below `threshold`.
pub fn fraction_at_most(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().filter(|&&v| v <= threshold).count() as f64 / values.len() as f64
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

impl ErrorReport {
    /// Builds the report from a ping dump. Targets without any answered
    /// probe among the first `k` are left out.
    pub fn build(dump: &PingDocument, topo: &SimTopology, k: usize) -> Result<Self, ReportError> {
        if k == 0 {
            return Err(ReportError::ZeroK);
        }
        let missing: Vec<Ipv4Addr> =
            dump.values().map(|t| t.target).filter(|t| !topo.targets.contains_key(t)).collect();
        if !missing.is_empty() {
            return Err(ReportError::MismatchedTargets(missing));
        }
        let mut rows = Vec::new();
        for (&icmp_id, task) in dump {
            let answered: Vec<u64> = dump_estimates_us(task).into_iter().take(k).flatten().collect();
            let Some(&first) = answered.first() else { continue };
            let truth = topo.targets[&task.target].base_rtt.as_micros() as u64;
            let mean = answered.iter().map(|&v| v as f64).sum::<f64>() / answered.len() as f64;
            let abs = (mean - truth as f64).abs();
            rows.push(ErrorRow {
                icmp_id,
                target: task.target,
                truth_rtt_us: truth,
                est_rtt_us: first,
                est_rtt_mean_us: mean,
                answered: answered.len() as u32,
                abs_error_us: abs,
                rel_error: if truth == 0 { f64::INFINITY } else { abs / truth as f64 },
            });
        }
        Ok(Self::from_rows(k, rows))
    }

    pub fn from_rows(k: usize, rows: Vec<ErrorRow>) -> Self {
        let abs = sorted(rows.iter().map(|r| r.abs_error_us));
        let rel = sorted(rows.iter().map(|r| r.rel_error));
        let percentiles = if rows.is_empty() {
            Vec::new()
        } else {
            PERCENTILES
                .iter()
                .map(|&p| PercentileRow {
                    percentile: p,
                    abs_error_us: percentile(&abs, p),
                    rel_error: percentile(&rel, p),
                })
                .collect()
        };
        ErrorReport { k, rows, percentiles }
    }

    pub fn abs_errors_us(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.abs_error_us).collect()
    }

    pub fn rel_errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.rel_error).collect()
    }

    pub fn median_abs_error_us(&self) -> f64 {
        percentile(&sorted(self.rows.iter().map(|r| r.abs_error_us)), 50)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ReportError> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Reads rows written by [`write_csv`](Self::write_csv); percentiles are
    /// recomputed.
    pub fn read_csv<R: Read>(r: R, k: usize) -> Result<Self, ReportError> {
        let mut reader = csv::Reader::from_reader(r);
        let rows = reader.deserialize().collect::<Result<Vec<ErrorRow>, _>>()?;
        Ok(Self::from_rows(k, rows))
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} responsive targets, k = {}", self.rows.len(), self.k)?;
        if self.rows.is_empty() {
            return Ok(());
        }
        writeln!(
            f,
            "{:>15}  {:>10}  {:>10}  {:>10}  {:>9}  {:>8}",
            "target", "truth ms", "est ms", "mean ms", "abs ms", "rel %"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>15}  {:>10.3}  {:>10.3}  {:>10.3}  {:>9.3}  {:>8.2}",
                r.target,
                r.truth_rtt_us as f64 / 1e3,
                r.est_rtt_us as f64 / 1e3,
                r.est_rtt_mean_us / 1e3,
                r.abs_error_us / 1e3,
                r.rel_error * 100.0
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:>5}  {:>9}  {:>8}", "pct", "abs ms", "rel %")?;
        for p in &self.percentiles {
            writeln!(f, "{:>5}  {:>9.3}  {:>8.2}", p.percentile, p.abs_error_us / 1e3, p.rel_error * 100.0)?;
        }
        Ok(())
    }
}

/// Writes CDF points as two-column CSV.
pub fn write_cdf_csv<W: Write>(w: W, header: (&str, &str), points: &[(f64, f64)]) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([header.0, header.1])?;
    for (x, y) in points {
        out.write_record([x.to_string(), y.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn parse_ping_dump(text: &str) -> Result<PingDocument, ReportError> {
    Ok(serde_json::from_str(text)?)
}

pub fn load_ping_dump(path: impl AsRef<Path>) -> Result<PingDocument, ReportError> {
    parse_ping_dump(&std::fs::read_to_string(path)?)
}
