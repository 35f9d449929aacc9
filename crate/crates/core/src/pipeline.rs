//! End-to-end wiring: replay -> parser workers -> aggregator -> collector.
//!
//! Stages run on their own threads and talk over bounded channels, so a slow
//! stage backs up the ones feeding it instead of growing a queue. Summaries
//! cross from the aggregator to the collector in their wire encoding.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::net::{SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crossbeam_channel::bounded;
use serde::Serialize;
use thiserror::Error;

use crate::aggregator::{
    decode_summary, encode_summary, Aggregator, AggregatorConfig, AggregatorError, FlowPair,
};
use crate::collector::{AnonymizerKey, KeyedAnonymizer, TrafficMatrix};
use crate::packet_model::RawPacket;
use crate::parser::{extract_pairs, parse_stream, ParseOutcome, ParseStats};
use crate::traffic_gen::{
    prepare_packets, replay_prepared, synthesize_uniform, CaptureError, CaptureFile, ChannelSink,
    DatagramSink, PacketSink, ReplayConfig, ReplayError, ReplayMode, ReplayStats, SendError,
    DEFAULT_SOCKET_ADDR,
};

/// Standard Ethernet frame-size ladder.
pub const DEFAULT_LADDER: [usize; 6] = [64, 128, 256, 512, 1024, 1518];
pub const REPORT_HEADER: &str = "size_bytes\tmbps\tpps";
pub const ACCOUNTING_NOTE: &str =
    "frame bytes only, no preamble or inter-frame gap; mbps = pps * size_bytes * 8 / 1e6";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error("replay failed: {0}")]
    Replay(#[from] ReplayError),
    #[error("capture: {0}")]
    Capture(#[from] CaptureError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("collector could not decode summary {index}: {source}")]
    SummaryDecode {
        index: u64,
        #[source]
        source: AggregatorError,
    },
    #[error("conservation violated: {0}")]
    Conservation(String),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error("pipeline stage `{0}` panicked")]
    StagePanic(&'static str),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RateError {
    #[error("measurement duration must be positive")]
    NonPositiveDuration,
}

/// `(mbps, pps)` from a packet count, a byte count and a duration in seconds.
pub fn compute_rates(packets: u64, bytes: u64, duration_secs: f64) -> Result<(f64, f64), RateError> {
    if duration_secs.is_nan() || duration_secs <= 0.0 {
        return Err(RateError::NonPositiveDuration);
    }
    let pps = packets as f64 / duration_secs;
    let mbps = bytes as f64 * 8.0 / duration_secs / 1e6;
    Ok((mbps, pps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateRow {
    /// Mean bytes per packet; exact for fixed-size traffic.
    pub packet_size: f64,
    pub mbps: f64,
    pub pps: f64,
}

impl RateRow {
    /// Relative error of `mbps` against `pps * size * 8 / 1e6`.
    pub fn identity_error(&self) -> f64 {
        let expect = self.pps * self.packet_size * 8.0 / 1e6;
        if expect == 0.0 {
            self.mbps.abs()
        } else {
            ((self.mbps - expect) / expect).abs()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub duration: Duration,
    pub mode: ReplayMode,
}

fn mode_name(mode: ReplayMode) -> &'static str {
    match mode {
        ReplayMode::InProcess => "in-process",
        ReplayMode::DatagramSocket => "socket",
    }
}

fn fmt_size(size: f64) -> String {
    if size.fract() == 0.0 {
        format!("{}", size as u64)
    } else {
        format!("{size:.3}")
    }
}

/// Groups digits in threes: `22428831` -> `22,428,831`.
pub fn thousands(v: f64) -> String {
    let digits = format!("{:.0}", v.max(0.0));
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl RateReport {
    /// Comment lines (`#`), the `size_bytes\tmbps\tpps` header, one row per size.
    pub fn write_tsv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "# mode: {}", mode_name(self.mode))?;
        writeln!(out, "# duration_s: {:.6}", self.duration.as_secs_f64())?;
        writeln!(out, "# accounting: {ACCOUNTING_NOTE}")?;
        writeln!(out, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{}\t{:.6}\t{:.3}", fmt_size(r.packet_size), r.mbps, r.pps)?;
        }
        Ok(())
    }

    /// Reads back the rows of [`RateReport::write_tsv`]; comments are skipped.
    pub fn parse_rows<R: BufRead>(src: R) -> io::Result<Vec<RateRow>> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut rows = Vec::new();
        let mut seen_header = false;
        for line in src.lines() {
            let line = line?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            if !seen_header {
                if line != REPORT_HEADER {
                    return Err(bad("missing report header"));
                }
                seen_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad("expected three columns"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            rows.push(RateRow {
                packet_size: num(cols[0])?,
                mbps: num(cols[1])?,
                pps: num(cols[2])?,
            });
        }
        if !seen_header {
            return Err(bad("missing report header"));
        }
        Ok(rows)
    }
}

impl fmt::Display for RateReport {
    /// Human-readable table in the column order of the hardware results table.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20}{:>20}{:>20}", "Packet Size (Byte)", "Data Rate (Mbps)", "Packet Rate (pps)")?;
        for r in &self.rows {
            writeln!(f, "{:<20}{:>20}{:>20}", fmt_size(r.packet_size), thousands(r.mbps), thousands(r.pps))?;
        }
        write!(f, "({}; {})", mode_name(self.mode), ACCOUNTING_NOTE)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub aggregator: AggregatorConfig,
    pub key: AnonymizerKey,
    pub replay: ReplayConfig,
    /// Parser stage threads.
    pub parser_workers: usize,
    /// Packets per channel message.
    pub batch_size: usize,
    /// Bound on each inter-stage channel, in messages.
    pub queue_depth: usize,
    pub socket_addr: SocketAddr,
    pub matrix_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(key: AnonymizerKey) -> Self {
        PipelineConfig {
            aggregator: AggregatorConfig::default(),
            key,
            replay: ReplayConfig::default(),
            parser_workers: 2,
            batch_size: 256,
            queue_depth: 64,
            socket_addr: DEFAULT_SOCKET_ADDR.parse().unwrap(),
            matrix_out: None,
            report_out: None,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.aggregator.validate()?;
        if self.parser_workers == 0 {
            return Err(PipelineError::Config("parser_workers must be at least 1".into()));
        }
        if self.batch_size == 0 || self.queue_depth == 0 {
            return Err(PipelineError::Config("batch_size and queue_depth must be at least 1".into()));
        }
        if self.replay.loop_count == 0 {
            return Err(PipelineError::Config("loop_count must be at least 1".into()));
        }
        for p in [&self.matrix_out, &self.report_out].into_iter().flatten() {
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if !dir.is_dir() {
                return Err(PipelineError::Config(format!(
                    "output directory {} does not exist",
                    dir.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub stats: ParseStats,
    pub pairs_aggregated: u64,
    pub summaries_emitted: u64,
    pub summaries_collected: u64,
    pub bytes_parsed: u64,
    pub matrix: TrafficMatrix,
    pub report: RateReport,
    pub replay: ReplayStats,
}

struct AggregatorTally {
    stats: ParseStats,
    bytes: u64,
    pairs: u64,
    emitted: u64,
}

/// Runs the full pipeline over `input` and writes any configured outputs.
/// Preparing (padding) the packets happens before the clock starts.
pub fn run_pipeline(cfg: &PipelineConfig, input: &CaptureFile) -> Result<PipelineResult, PipelineError> {
    cfg.validate()?;
    let pkts = prepare_packets(input, cfg.replay.pad);
    let result = run_prepared(cfg, &pkts)?;
    write_outputs(cfg, &result)?;
    Ok(result)
}

/// The measured part of [`run_pipeline`]; writes nothing.
pub fn run_prepared(cfg: &PipelineConfig, pkts: &[RawPacket]) -> Result<PipelineResult, PipelineError> {
    cfg.validate()?;
    let mut aggregator = Aggregator::new(cfg.aggregator)?;
    let ethertype = cfg.aggregator.summary_ethertype;
    let anon = KeyedAnonymizer::new(&cfg.key);

    let (raw_tx, raw_rx) = bounded::<Vec<RawPacket>>(cfg.queue_depth);
    let (pair_tx, pair_rx) = bounded::<(Vec<FlowPair>, ParseStats, u64)>(cfg.queue_depth);
    let (sum_tx, sum_rx) = bounded::<Vec<u8>>(cfg.queue_depth);
    let first_packet: OnceLock<Instant> = OnceLock::new();

    let socket = match cfg.replay.mode {
        ReplayMode::InProcess => None,
        ReplayMode::DatagramSocket => Some(
            UdpSocket::bind(cfg.socket_addr).map_err(io_err(format!("binding {}", cfg.socket_addr)))?,
        ),
    };

    std::thread::scope(|s| {
        let generator = {
            let replay_cfg = cfg.replay;
            let batch = cfg.batch_size;
            match socket {
                None => s.spawn(move || -> Result<ReplayStats, PipelineError> {
                    let mut sink = ChannelSink::new(raw_tx, batch);
                    Ok(replay_prepared(pkts, &replay_cfg, &mut sink)?)
                }),
                Some(sock) => {
                    let target = sock.local_addr().map_err(io_err("socket address"))?;
                    let done = Arc::new(AtomicBool::new(false));
                    let sent = Arc::new(AtomicU64::new(0));
                    {
                        let (done, sent) = (done.clone(), sent.clone());
                        s.spawn(move || receive_datagrams(sock, ChannelSink::new(raw_tx, batch), &done, &sent));
                    }
                    s.spawn(move || -> Result<ReplayStats, PipelineError> {
                        let res = DatagramSink::connect(target)
                            .map_err(io_err(format!("connecting to {target}")))
                            .and_then(|mut sink| Ok(replay_prepared(pkts, &replay_cfg, &mut sink)?));
                        if let Ok(st) = &res {
                            sent.store(st.packets_sent, Ordering::SeqCst);
                        }
                        done.store(true, Ordering::SeqCst);
                        res
                    })
                }
            }
        };

        for _ in 0..cfg.parser_workers {
            let rx = raw_rx.clone();
            let tx = pair_tx.clone();
            let first = &first_packet;
            s.spawn(move || {
                for batch in rx {
                    first.get_or_init(Instant::now);
                    let mut pairs = Vec::with_capacity(batch.len());
                    let stats = extract_pairs(&batch, &mut pairs);
                    let bytes = batch.iter().map(|p| p.len() as u64).sum();
                    if tx.send((pairs, stats, bytes)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(raw_rx);
        drop(pair_tx);

        let agg_stage = s.spawn(move || {
            let mut tally = AggregatorTally {
                stats: ParseStats::default(),
                bytes: 0,
                pairs: 0,
                emitted: 0,
            };
            'outer: for (pairs, stats, bytes) in pair_rx {
                tally.stats += stats;
                tally.bytes += bytes;
                tally.pairs += pairs.len() as u64;
                for p in pairs {
                    if let Some(sm) = aggregator.push(p) {
                        if sum_tx.send(encode_summary(&sm)).is_err() {
                            break 'outer;
                        }
                    }
                }
            }
            if let Some(sm) = aggregator.flush() {
                let _ = sum_tx.send(encode_summary(&sm));
            }
            tally.emitted = aggregator.emitted();
            tally
        });

        // collector runs on this thread
        let mut matrix = TrafficMatrix::new();
        let mut collected = 0u64;
        let mut decode_failure = None;
        for bytes in sum_rx.iter() {
            match decode_summary(&bytes, ethertype) {
                Ok(sm) => {
                    matrix.ingest_summary(&sm, &anon);
                    collected += 1;
                }
                Err(source) => {
                    decode_failure = Some(PipelineError::SummaryDecode {
                        index: collected,
                        source,
                    });
                    break;
                }
            }
        }
        drop(sum_rx);
        let end = Instant::now();

        let tally = agg_stage.join().map_err(|_| PipelineError::StagePanic("aggregator"))?;
        let replay = generator.join().map_err(|_| PipelineError::StagePanic("generator"))??;
        if let Some(e) = decode_failure {
            return Err(e);
        }

        let start = first_packet.get().copied().unwrap_or(end);
        let duration = end.saturating_duration_since(start).max(Duration::from_nanos(1));
        let (mbps, pps) = compute_rates(tally.stats.total, tally.bytes, duration.as_secs_f64())?;
        let packet_size = if tally.stats.total == 0 {
            0.0
        } else {
            tally.bytes as f64 / tally.stats.total as f64
        };
        let result = PipelineResult {
            stats: tally.stats,
            pairs_aggregated: tally.pairs,
            summaries_emitted: tally.emitted,
            summaries_collected: collected,
            bytes_parsed: tally.bytes,
            matrix,
            report: RateReport {
                rows: vec![RateRow {
                    packet_size,
                    mbps,
                    pps,
                }],
                duration,
                mode: cfg.replay.mode,
            },
            replay,
        };
        check_conservation(&result, cfg.aggregator.n_p)?;
        Ok(result)
    })
}

fn receive_datagrams(sock: UdpSocket, mut sink: ChannelSink, done: &AtomicBool, sent: &AtomicU64) {
    const IDLE_AFTER_DONE: Duration = Duration::from_millis(300);
    let _ = sock.set_read_timeout(Some(Duration::from_millis(20)));
    let mut buf = vec![0u8; 65_536];
    let mut received = 0u64;
    let mut last_rx = Instant::now();
    loop {
        match sock.recv(&mut buf) {
            Ok(n) => {
                received += 1;
                last_rx = Instant::now();
                let ts = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_nanos() as u64)
                    .unwrap_or(0);
                if let Err(SendError::Closed) = sink.send(RawPacket::new(buf[..n].to_vec(), ts)) {
                    return;
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => {}
        }
        if done.load(Ordering::SeqCst)
            && (received >= sent.load(Ordering::SeqCst) || last_rx.elapsed() > IDLE_AFTER_DONE)
        {
            break;
        }
    }
    let _ = sink.finish();
}

fn check_conservation(r: &PipelineResult, n_p: u8) -> Result<(), PipelineError> {
    let ipv4 = r.stats.ipv4;
    if !r.stats.is_partition() {
        return Err(PipelineError::Conservation(format!("parse counters do not partition: {:?}", r.stats)));
    }
    if r.pairs_aggregated != ipv4 || r.matrix.total() != ipv4 {
        return Err(PipelineError::Conservation(format!(
            "ipv4 parsed {ipv4}, pairs aggregated {}, matrix total {}",
            r.pairs_aggregated,
            r.matrix.total()
        )));
    }
    let expected = ipv4.div_ceil(n_p as u64);
    if r.summaries_emitted != expected || r.summaries_collected != expected {
        return Err(PipelineError::Conservation(format!(
            "expected {expected} summaries, emitted {}, collected {}",
            r.summaries_emitted, r.summaries_collected
        )));
    }
    Ok(())
}

/// Writes `path` through a `.partial` sibling renamed into place, so a failed
/// write never leaves a half-written file under the final name.
pub fn write_atomically<F>(path: &Path, body: F) -> Result<(), PipelineError>
where
    F: FnOnce(&mut io::BufWriter<std::fs::File>) -> io::Result<()>,
{
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let res = (|| {
        let mut w = io::BufWriter::new(std::fs::File::create(&tmp)?);
        body(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    res.map_err(io_err(format!("writing {}", path.display())))
}

fn write_outputs(cfg: &PipelineConfig, r: &PipelineResult) -> Result<(), PipelineError> {
    if let Some(p) = &cfg.matrix_out {
        write_atomically(p, |w| r.matrix.export_tsv(w).map(|_| ()))?;
    }
    if let Some(p) = &cfg.report_out {
        if let Err(e) = write_atomically(p, |w| r.report.write_tsv(w)) {
            if let Some(m) = &cfg.matrix_out {
                let _ = std::fs::remove_file(m);
            }
            return Err(e);
        }
    }
    Ok(())
}

/// Largest divisor of `count` not above `cap`, so a template trace looped a
/// whole number of times yields exactly `count` packets.
fn template_len(count: u64, cap: u64) -> u64 {
    (1..=count.min(cap)).rev().find(|d| count.is_multiple_of(*d)).unwrap_or(1)
}

pub const LADDER_TEMPLATE_CAP: u64 = 16_384;
pub const LADDER_FLOWS: u32 = 1024;

/// One measured row per packet size, ascending.
pub fn bench_ladder(sizes: &[usize], count_per_size: u64, cfg: &PipelineConfig) -> Result<RateReport, PipelineError> {
    if sizes.is_empty() {
        return Err(PipelineError::Config("empty size ladder".into()));
    }
    if count_per_size == 0 {
        return Err(PipelineError::Config("count per size must be at least 1".into()));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();

    let tlen = template_len(count_per_size, LADDER_TEMPLATE_CAP);
    let loops = u32::try_from(count_per_size / tlen)
        .map_err(|_| PipelineError::Config("count per size too large".into()))?;
    let mut run_cfg = cfg.clone();
    run_cfg.matrix_out = None;
    run_cfg.report_out = None;
    run_cfg.replay.loop_count = loops;

    let mut report = RateReport {
        rows: Vec::with_capacity(sizes.len()),
        duration: Duration::ZERO,
        mode: cfg.replay.mode,
    };
    for size in sizes {
        let template = synthesize_uniform(tlen as usize, size, LADDER_FLOWS)?;
        let pkts = prepare_packets(&template, run_cfg.replay.pad);
        let r = run_prepared(&run_cfg, &pkts)?;
        let mut row = r.report.rows[0];
        row.packet_size = size as f64;
        report.rows.push(row);
        report.duration += r.report.duration;
    }
    if let Some(p) = &cfg.report_out {
        write_atomically(p, |w| report.write_tsv(w))?;
    }
    Ok(report)
}

/// Stats-only pass over a capture on the batch path.
pub fn parse_capture(input: &CaptureFile, pad: bool) -> (Vec<ParseOutcome>, ParseStats) {
    parse_stream(&prepare_packets(input, pad))
}

/// Builds the anonymized matrix without the staged pipeline: batch parse,
/// then per-shard matrices merged. Yields the same matrix as
/// [`run_pipeline`] for the same input and key.
pub fn collect_offline(input: &CaptureFile, pad: bool, key: &AnonymizerKey) -> (ParseStats, TrafficMatrix) {
    let (outcomes, stats) = parse_capture(input, pad);
    let pairs: Vec<FlowPair> = outcomes.iter().filter_map(ParseOutcome::pair).collect();
    let matrix = TrafficMatrix::from_pairs(&pairs, &KeyedAnonymizer::new(key));
    (stats, matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic_gen::{synth_tcp_frame, CaptureRecord};

    fn cfg() -> PipelineConfig {
        PipelineConfig::new(AnonymizerKey::new([0x5a; 16]))
    }

    #[test]
    fn rates_arithmetic() {
        assert_eq!(compute_rates(1_000_000, 64_000_000, 1.0).unwrap(), (512.0, 1_000_000.0));
        assert_eq!(compute_rates(0, 0, 2.0).unwrap(), (0.0, 0.0));
        assert!(compute_rates(1, 1, 0.0).is_err());
        assert!(compute_rates(1, 1, -1.0).is_err());
    }

    #[test]
    fn table_formatting() {
        assert_eq!(thousands(22_428_831.0), "22,428,831");
        assert_eq!(thousands(94_238.0), "94,238");
        assert_eq!(thousands(512.0), "512");
        let rep = RateReport {
            rows: vec![RateRow {
                packet_size: 512.0,
                mbps: 94_238.0,
                pps: 22_428_831.0,
            }],
            duration: Duration::from_secs(1),
            mode: ReplayMode::InProcess,
        };
        let text = rep.to_string();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("Packet Size (Byte)"));
        let row: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
        assert_eq!(row, ["512", "94,238", "22,428,831"]);
    }

    #[test]
    fn report_tsv_roundtrip() {
        let rep = RateReport {
            rows: vec![
                RateRow { packet_size: 64.0, mbps: 512.0, pps: 1e6 },
                RateRow { packet_size: 1518.0, mbps: 1214.4, pps: 1e5 },
            ],
            duration: Duration::from_millis(1500),
            mode: ReplayMode::InProcess,
        };
        let mut buf = Vec::new();
        rep.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().any(|l| l == REPORT_HEADER));
        assert!(text.contains("no preamble"));
        assert_eq!(RateReport::parse_rows(&buf[..]).unwrap(), rep.rows);
        assert!(RateReport::parse_rows(&b"64\t1\t2\n"[..]).is_err());
    }

    #[test]
    fn template_divides_count() {
        assert_eq!(template_len(1_000_000, 16_384), 15_625);
        assert_eq!(template_len(7, 16_384), 7);
        assert_eq!(template_len(65_537, 16_384), 1);
    }

    #[test]
    fn empty_ipv4_trace() {
        let mut cap = CaptureFile::new(64);
        let mut arp = synth_tcp_frame(64, 0, 0);
        arp[12..14].copy_from_slice(&[0x08, 0x06]);
        cap.records = (0..10)
            .map(|i| CaptureRecord {
                timestamp_ns: i,
                orig_len: 64,
                data: arp.clone().into(),
            })
            .collect();
        let r = run_pipeline(&cfg(), &cap).unwrap();
        assert_eq!(r.summaries_emitted, 0);
        assert!(r.matrix.is_empty());
        assert_eq!(r.stats.non_ip, 10);
        let r = run_pipeline(&cfg(), &CaptureFile::new(64)).unwrap();
        assert_eq!(r.stats.total, 0);
    }

    #[test]
    fn short_tail_summary() {
        let cap = synthesize_uniform(1000, 64, 10).unwrap();
        let r = run_pipeline(&cfg(), &cap).unwrap();
        assert_eq!(r.summaries_emitted, 7);
        assert_eq!(r.matrix.total(), 1000);
        let (stats, m) = collect_offline(&cap, true, &cfg().key);
        assert_eq!(stats, r.stats);
        assert_eq!(m, r.matrix);
    }

    #[test]
    fn conservation_at_every_parallelism() {
        let cap = synthesize_uniform(9_001, 128, 37).unwrap();
        let mut reference = None;
        for workers in [1, 2, 4, 8] {
            for batch in [1, 17, 256] {
                let mut c = cfg();
                c.parser_workers = workers;
                c.batch_size = batch;
                c.queue_depth = 2;
                let r = run_pipeline(&c, &cap).unwrap();
                assert_eq!(r.matrix.total(), 9_001);
                assert_eq!(r.summaries_emitted, 61);
                match &reference {
                    None => reference = Some(r.matrix),
                    Some(m) => assert_eq!(&r.matrix, m),
                }
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let cap = synthesize_uniform(1, 64, 1).unwrap();
        let mut c = cfg();
        c.parser_workers = 0;
        assert!(matches!(run_pipeline(&c, &cap), Err(PipelineError::Config(_))));
        let mut c = cfg();
        c.aggregator.n_p = 0;
        assert!(matches!(run_pipeline(&c, &cap), Err(PipelineError::Aggregator(_))));
        let mut c = cfg();
        c.matrix_out = Some(PathBuf::from("/nonexistent/dir/m.tsv"));
        assert!(matches!(run_pipeline(&c, &cap), Err(PipelineError::Config(_))));
    }

    #[test]
    fn outputs_written_and_cleaned() {
        let dir = tempfile::tempdir().unwrap();
        let cap = synthesize_uniform(300, 64, 3).unwrap();
        let mut c = cfg();
        c.matrix_out = Some(dir.path().join("m.tsv"));
        c.report_out = Some(dir.path().join("r.tsv"));
        let r = run_pipeline(&c, &cap).unwrap();
        let m = std::fs::read(dir.path().join("m.tsv")).unwrap();
        assert_eq!(TrafficMatrix::import_tsv(&m[..]).unwrap(), r.matrix);
        let rows = RateReport::parse_rows(&std::fs::read(dir.path().join("r.tsv")).unwrap()[..]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].packet_size, 64.0);

        // report path is a directory: the write fails and the matrix is removed
        let mut c = cfg();
        c.matrix_out = Some(dir.path().join("m2.tsv"));
        let sub = dir.path().join("sub");
        std::fs::create_dir(&sub).unwrap();
        c.report_out = Some(sub);
        assert!(run_pipeline(&c, &cap).is_err());
        assert!(!dir.path().join("m2.tsv").exists());
        assert!(std::fs::read_dir(dir.path())
            .unwrap()
            .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".partial")));
    }

    #[test]
    fn socket_mode_conserves() {
        let cap = synthesize_uniform(2_000, 256, 16).unwrap();
        let mut c = cfg();
        c.replay.mode = ReplayMode::DatagramSocket;
        c.replay.target_pps = Some(50_000.0);
        c.socket_addr = "127.0.0.1:0".parse().unwrap();
        let r = run_pipeline(&c, &cap).unwrap();
        assert_eq!(r.replay.packets_sent, 2_000);
        assert!(r.stats.total <= 2_000);
        assert_eq!(r.matrix.total(), r.stats.ipv4);
        assert_eq!(r.report.mode, ReplayMode::DatagramSocket);
    }

    #[test]
    fn ladder_rows_sorted() {
        let rep = bench_ladder(&[256, 64], 3_000, &cfg()).unwrap();
        let sizes: Vec<f64> = rep.rows.iter().map(|r| r.packet_size).collect();
        assert_eq!(sizes, [64.0, 256.0]);
        assert!(rep.rows.iter().all(|r| r.identity_error() < 1e-3));
        assert_eq!(bench_ladder(&[512], 10, &cfg()).unwrap().rows.len(), 1);
        assert!(bench_ladder(&[], 10, &cfg()).is_err());
        assert!(bench_ladder(&[40], 10, &cfg()).is_err());
    }
}
