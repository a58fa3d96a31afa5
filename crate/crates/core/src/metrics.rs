//! Summaries computed from an event log.

use std::collections::BTreeMap;
use std::io::Read;

use serde::Serialize;
use thiserror::Error;

use crate::model::Timestamp;
use crate::world::{LogKind, LogRecord, LOG_HEADER};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no samples in log")]
    NoSamples,
    #[error("log row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Reads a log written by [`crate::world::write_log_csv`].
pub fn read_log_csv<R: Read>(input: R) -> Result<Vec<LogRecord>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    if headers.iter().ne(LOG_HEADER.iter().copied()) {
        return Err(MetricsError::BadRow {
            row: 1,
            message: format!("expected header {}", LOG_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let bad = |message: &str| MetricsError::BadRow {
            row,
            message: message.to_string(),
        };
        let num = |idx: usize| rec[idx].parse::<u64>().map_err(|_| bad("bad number"));
        out.push(LogRecord {
            ts: Timestamp(num(0)?),
            tick: num(1)?,
            kind: LogKind::parse(&rec[2]).ok_or_else(|| bad("unknown kind"))?,
            link: rec[3].to_string(),
            scope: rec[4].to_string(),
            var: rec[5].to_string(),
            side: rec[6].to_string(),
            value: rec[7].to_string(),
            detail: rec[8].to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkMetrics {
    pub link: String,
    pub samples: usize,
    pub incoherent_samples: usize,
    pub noise_score: f64,
    pub updates: usize,
    /// Updates never followed by a coherent sample.
    pub unconverged: usize,
    pub latency_p50_ms: Option<u64>,
    pub latency_p95_ms: Option<u64>,
    pub latency_max_ms: Option<u64>,
    pub device_commands: usize,
    pub scene_commands: usize,
    pub failed_deliveries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub tick_ms: u64,
    pub grace_ms: u64,
    pub links: Vec<LinkMetrics>,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

fn config_value(records: &[LogRecord], key: &str) -> Option<u64> {
    records.iter().filter(|r| r.kind == LogKind::Config).find_map(|r| {
        r.detail
            .split(';')
            .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('=')?.parse().ok())
    })
}

/// Per-link time from each update to the first coherent sample at or after
/// it.
pub fn convergence_latencies(records: &[LogRecord], link: &str) -> (Vec<u64>, usize) {
    let coherent: Vec<u64> = records
        .iter()
        .filter(|r| r.kind == LogKind::Sample && r.link == link && r.detail == "coherent")
        .map(|r| r.ts.0)
        .collect();
    let mut lat = Vec::new();
    let mut unconverged = 0;
    for u in records.iter().filter(|r| r.kind == LogKind::Update && r.link == link) {
        let i = coherent.partition_point(|&t| t < u.ts.0);
        match coherent.get(i) {
            Some(t) => lat.push(t - u.ts.0),
            None => unconverged += 1,
        }
    }
    lat.sort_unstable();
    (lat, unconverged)
}

pub fn summarize(records: &[LogRecord]) -> Result<MetricsSummary, MetricsError> {
    let samples: Vec<&LogRecord> = records.iter().filter(|r| r.kind == LogKind::Sample).collect();
    if samples.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let tick_ms = config_value(records, "tick_ms").unwrap_or_else(|| {
        let mut ts: Vec<u64> = samples.iter().map(|r| r.ts.0).collect();
        ts.dedup();
        ts.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0).min().unwrap_or(1)
    });
    let grace_ms = config_value(records, "grace_ms").unwrap_or(0);

    let mut by_link: BTreeMap<&str, Vec<&LogRecord>> = BTreeMap::new();
    for r in &samples {
        by_link.entry(r.link.as_str()).or_default().push(r);
    }
    let mut links = Vec::new();
    for (link, rows) in by_link {
        let first = rows.iter().map(|r| r.ts.0).min().unwrap_or(0);
        let last = rows.iter().map(|r| r.ts.0).max().unwrap_or(0);
        let incoherent = rows.iter().filter(|r| r.detail == "incoherent").count();
        let span = last - first + tick_ms;
        let (lat, unconverged) = convergence_latencies(records, link);
        let count = |kind: LogKind, pred: &dyn Fn(&LogRecord) -> bool| {
            records
                .iter()
                .filter(|r| r.kind == kind && r.link == link && pred(r))
                .count()
        };
        links.push(LinkMetrics {
            link: link.to_string(),
            samples: rows.len(),
            incoherent_samples: incoherent,
            noise_score: (incoherent as u64 * tick_ms) as f64 / span as f64,
            updates: count(LogKind::Update, &|_| true),
            unconverged,
            latency_p50_ms: percentile(&lat, 0.50),
            latency_p95_ms: percentile(&lat, 0.95),
            latency_max_ms: lat.last().copied(),
            device_commands: count(LogKind::Command, &|r| r.side == "device"),
            scene_commands: count(LogKind::Command, &|r| r.side == "scene_clients"),
            failed_deliveries: count(LogKind::Delivery, &|r| r.detail.contains("failed")),
        });
    }
    Ok(MetricsSummary {
        tick_ms,
        grace_ms,
        links,
    })
}

/// CSV rendering of a summary, one row per link.
pub fn write_summary_csv<W: std::io::Write>(out: W, s: &MetricsSummary) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "link",
        "samples",
        "incoherent_samples",
        "noise_score",
        "updates",
        "unconverged",
        "latency_p50_ms",
        "latency_p95_ms",
        "latency_max_ms",
        "device_commands",
        "scene_commands",
        "failed_deliveries",
    ])?;
    let opt = |v: Option<u64>| v.map_or_else(String::new, |v| v.to_string());
    for l in &s.links {
        w.write_record([
            l.link.clone(),
            l.samples.to_string(),
            l.incoherent_samples.to_string(),
            format!("{:.6}", l.noise_score),
            l.updates.to_string(),
            l.unconverged.to_string(),
            opt(l.latency_p50_ms),
            opt(l.latency_p95_ms),
            opt(l.latency_max_ms),
            l.device_commands.to_string(),
            l.scene_commands.to_string(),
            l.failed_deliveries.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(ts: u64, kind: LogKind, link: &str, detail: &str) -> LogRecord {
        LogRecord {
            ts: Timestamp(ts),
            tick: ts / 50,
            kind,
            link: link.into(),
            scope: String::new(),
            var: String::new(),
            side: String::new(),
            value: String::new(),
            detail: detail.into(),
        }
    }

    #[test]
    fn empty_log_has_no_samples() {
        assert!(matches!(summarize(&[]), Err(MetricsError::NoSamples)));
    }

    #[test]
    fn nearest_rank() {
        let d = [10, 20, 30, 40];
        assert_eq!(percentile(&d, 0.5), Some(20));
        assert_eq!(percentile(&d, 0.95), Some(40));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn noise_and_latency() {
        let mut log = vec![row(0, LogKind::Config, "", "tick_ms=50;grace_ms=0")];
        log.push(row(100, LogKind::Update, "l", "seq=1"));
        for t in 0..10 {
            let d = if (2..4).contains(&t) { "incoherent" } else { "coherent" };
            log.push(row(t * 50, LogKind::Sample, "l", d));
        }
        let s = summarize(&log).unwrap();
        let l = &s.links[0];
        assert_eq!(l.samples, 10);
        assert!((l.noise_score - 0.2).abs() < 1e-12);
        assert_eq!(l.latency_max_ms, Some(100));

        let mut buf = Vec::new();
        crate::world::write_log_csv(&mut buf, &log).unwrap();
        assert_eq!(read_log_csv(buf.as_slice()).unwrap(), log);
    }
}
