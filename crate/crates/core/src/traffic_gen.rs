//! Capture ingestion and replay.
//!
//! Reads and writes classic pcap files (24-byte global header, 16-byte record
//! headers) in either byte order with microsecond or nanosecond timestamps.
//! Header-only traces are restored to wire length by appending zeros, then
//! replayed into the pipeline either through an in-process bounded channel or
//! as UDP datagrams over loopback.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, UdpSocket};
use std::path::Path;
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::Sender;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet_model::{RawPacket, ETHERTYPE_IPV4, IPPROTO_TCP};

pub const PCAP_MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const PCAP_MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const DEFAULT_SNAPLEN: u32 = 65_535;

pub const MIN_SYNTH_FRAME: usize = 54;
pub const MAX_SYNTH_FRAME: usize = 9000;

pub const DEFAULT_SOCKET_ADDR: &str = "127.0.0.1:9184";

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("not a pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("global header truncated")]
    TruncatedHeader,
    #[error("record {index} truncated at byte offset {offset}")]
    TruncatedRecord { index: usize, offset: u64 },
    #[error("record {index} at byte offset {offset}: {reason}")]
    InvalidRecord {
        index: usize,
        offset: u64,
        reason: &'static str,
    },
    #[error("packet size {0} outside {MIN_SYNTH_FRAME}..={MAX_SYNTH_FRAME}")]
    BadPacketSize(usize),
    #[error("flow count must be at least 1")]
    NoFlows,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: [u8; 4]) -> u32 {
        match self {
            ByteOrder::Little => u32::from_le_bytes(b),
            ByteOrder::Big => u32::from_be_bytes(b),
        }
    }

    fn u16(self, b: [u8; 2]) -> u16 {
        match self {
            ByteOrder::Little => u16::from_le_bytes(b),
            ByteOrder::Big => u16::from_be_bytes(b),
        }
    }

    fn put_u32(self, v: u32) -> [u8; 4] {
        match self {
            ByteOrder::Little => v.to_le_bytes(),
            ByteOrder::Big => v.to_be_bytes(),
        }
    }

    fn put_u16(self, v: u16) -> [u8; 2] {
        match self {
            ByteOrder::Little => v.to_le_bytes(),
            ByteOrder::Big => v.to_be_bytes(),
        }
    }

    pub fn native() -> Self {
        if cfg!(target_endian = "little") {
            ByteOrder::Little
        } else {
            ByteOrder::Big
        }
    }

    pub fn is_swapped(self) -> bool {
        self != Self::native()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TsResolution {
    Micros,
    Nanos,
}

impl TsResolution {
    fn magic(self) -> u32 {
        match self {
            TsResolution::Micros => PCAP_MAGIC_MICROS,
            TsResolution::Nanos => PCAP_MAGIC_NANOS,
        }
    }

    fn frac_to_ns(self) -> u64 {
        match self {
            TsResolution::Micros => 1_000,
            TsResolution::Nanos => 1,
        }
    }
}

/// One captured record. The timestamp is held in nanoseconds whatever the
/// file's resolution; `data.len()` is the record's `incl_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureRecord {
    pub timestamp_ns: u64,
    pub orig_len: u32,
    pub data: Bytes,
}

impl CaptureRecord {
    pub fn incl_len(&self) -> u32 {
        self.data.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureFile {
    pub byte_order: ByteOrder,
    pub resolution: TsResolution,
    pub version: (u16, u16),
    pub thiszone: i32,
    pub sigfigs: u32,
    pub snaplen: u32,
    pub link_type: u32,
    pub records: Vec<CaptureRecord>,
}

impl CaptureFile {
    pub fn new(snaplen: u32) -> Self {
        CaptureFile {
            byte_order: ByteOrder::Little,
            resolution: TsResolution::Nanos,
            version: (2, 4),
            thiszone: 0,
            sigfigs: 0,
            snaplen,
            link_type: LINKTYPE_ETHERNET,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn open(path: &Path) -> Result<Self, CaptureError> {
        read_capture(BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), CaptureError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write_capture(self, &mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

pub fn read_capture<R: Read>(mut src: R) -> Result<CaptureFile, CaptureError> {
    let mut gh = [0u8; GLOBAL_HEADER_LEN];
    let n = read_full(&mut src, &mut gh)?;
    if n < 4 {
        return Err(CaptureError::TruncatedHeader);
    }
    let (byte_order, resolution) = magic_info(gh[..4].try_into().unwrap())?;
    if n < GLOBAL_HEADER_LEN {
        return Err(CaptureError::TruncatedHeader);
    }
    let u32_at = |at: usize| byte_order.u32(gh[at..at + 4].try_into().unwrap());
    let mut cap = CaptureFile {
        byte_order,
        resolution,
        version: (
            byte_order.u16([gh[4], gh[5]]),
            byte_order.u16([gh[6], gh[7]]),
        ),
        thiszone: u32_at(8) as i32,
        sigfigs: u32_at(12),
        snaplen: u32_at(16),
        link_type: u32_at(20),
        records: Vec::new(),
    };

    let mut offset = GLOBAL_HEADER_LEN as u64;
    loop {
        let index = cap.records.len();
        let mut rh = [0u8; RECORD_HEADER_LEN];
        match read_full(&mut src, &mut rh)? {
            0 => break,
            RECORD_HEADER_LEN => {}
            _ => return Err(CaptureError::TruncatedRecord { index, offset }),
        }
        let f = |at: usize| byte_order.u32(rh[at..at + 4].try_into().unwrap());
        let (ts_sec, ts_frac, incl_len, orig_len) = (f(0), f(4), f(8), f(12));
        let invalid = |reason| CaptureError::InvalidRecord {
            index,
            offset,
            reason,
        };
        if incl_len > orig_len {
            return Err(invalid("incl_len exceeds orig_len"));
        }
        if incl_len > cap.snaplen {
            return Err(invalid("incl_len exceeds snaplen"));
        }
        let mut data = vec![0u8; incl_len as usize];
        if read_full(&mut src, &mut data)? < data.len() {
            return Err(CaptureError::TruncatedRecord { index, offset });
        }
        cap.records.push(CaptureRecord {
            timestamp_ns: ts_sec as u64 * 1_000_000_000 + ts_frac as u64 * resolution.frac_to_ns(),
            orig_len,
            data: data.into(),
        });
        offset += RECORD_HEADER_LEN as u64 + incl_len as u64;
    }
    Ok(cap)
}

fn magic_info(raw: [u8; 4]) -> Result<(ByteOrder, TsResolution), CaptureError> {
    for order in [ByteOrder::Little, ByteOrder::Big] {
        match order.u32(raw) {
            PCAP_MAGIC_MICROS => return Ok((order, TsResolution::Micros)),
            PCAP_MAGIC_NANOS => return Ok((order, TsResolution::Nanos)),
            _ => {}
        }
    }
    Err(CaptureError::BadMagic(u32::from_be_bytes(raw)))
}

/// Writes `cap` in its own byte order and resolution. Sub-resolution
/// timestamp digits are truncated.
pub fn write_capture<W: Write>(cap: &CaptureFile, out: &mut W) -> io::Result<()> {
    let bo = cap.byte_order;
    let mut gh = Vec::with_capacity(GLOBAL_HEADER_LEN);
    gh.extend_from_slice(&bo.put_u32(cap.resolution.magic()));
    gh.extend_from_slice(&bo.put_u16(cap.version.0));
    gh.extend_from_slice(&bo.put_u16(cap.version.1));
    gh.extend_from_slice(&bo.put_u32(cap.thiszone as u32));
    gh.extend_from_slice(&bo.put_u32(cap.sigfigs));
    gh.extend_from_slice(&bo.put_u32(cap.snaplen));
    gh.extend_from_slice(&bo.put_u32(cap.link_type));
    out.write_all(&gh)?;
    let div = cap.resolution.frac_to_ns();
    for r in &cap.records {
        let ts_sec = (r.timestamp_ns / 1_000_000_000) as u32;
        let ts_frac = ((r.timestamp_ns % 1_000_000_000) / div) as u32;
        out.write_all(&bo.put_u32(ts_sec))?;
        out.write_all(&bo.put_u32(ts_frac))?;
        out.write_all(&bo.put_u32(r.incl_len()))?;
        out.write_all(&bo.put_u32(r.orig_len))?;
        out.write_all(&r.data)?;
    }
    Ok(())
}

/// Restores a snap-length record to its wire length by appending zeros.
pub fn pad_packet(rec: &CaptureRecord) -> RawPacket {
    let incl = rec.data.len();
    let wire = (rec.orig_len as usize).max(incl);
    let data = if wire == incl {
        rec.data.clone()
    } else {
        let mut v = Vec::with_capacity(wire);
        v.extend_from_slice(&rec.data);
        v.resize(wire, 0);
        Bytes::from(v)
    };
    RawPacket::with_orig_len(data, rec.timestamp_ns, rec.orig_len.max(incl as u32))
        .expect("padded length equals orig_len")
}

/// The record as captured, without padding.
pub fn unpadded_packet(rec: &CaptureRecord) -> RawPacket {
    RawPacket::with_orig_len(rec.data.clone(), rec.timestamp_ns, rec.orig_len.max(rec.incl_len()))
        .expect("orig_len at least incl_len")
}

fn ipv4_checksum(hdr: &[u8]) -> u16 {
    let mut sum: u32 = hdr
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)]) as u32)
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// The `flow`-th synthetic address pair. Sources are distinct per flow.
pub fn synth_flow(flow: u32) -> (Ipv4Addr, Ipv4Addr) {
    let src = Ipv4Addr::from(0x0a00_0000u32.wrapping_add(flow));
    let dst = Ipv4Addr::from(0xc0a8_0000u32 | (flow.wrapping_mul(0x9e37_79b1) >> 16));
    (src, dst)
}

/// One TCP/IPv4 frame of exactly `size` bytes (headers, then zero payload).
pub fn synth_tcp_frame(size: usize, flow: u32, seq: u32) -> Vec<u8> {
    let (src, dst) = synth_flow(flow);
    let mut f = vec![0u8; size];
    f[0..6].copy_from_slice(&[0x02, 0, 0, 0, 0, 0x02]);
    f[6..12].copy_from_slice(&[0x02, 0, 0, 0, 0, 0x01]);
    f[12..14].copy_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    let ip = &mut f[14..34];
    ip[0] = 0x45;
    ip[2..4].copy_from_slice(&((size - 14).min(u16::MAX as usize) as u16).to_be_bytes());
    ip[4..6].copy_from_slice(&(seq as u16).to_be_bytes());
    ip[6] = 0x40; // DF
    ip[8] = 64;
    ip[9] = IPPROTO_TCP;
    ip[12..16].copy_from_slice(&src.octets());
    ip[16..20].copy_from_slice(&dst.octets());
    let ck = ipv4_checksum(ip);
    ip[10..12].copy_from_slice(&ck.to_be_bytes());
    let tcp = &mut f[34..54];
    tcp[0..2].copy_from_slice(&(1024 + (flow % 60_000) as u16).to_be_bytes());
    tcp[2..4].copy_from_slice(&443u16.to_be_bytes());
    tcp[4..8].copy_from_slice(&seq.to_be_bytes());
    tcp[12] = 0x50;
    tcp[13] = 0x10; // ACK
    tcp[14..16].copy_from_slice(&65_535u16.to_be_bytes());
    f
}

/// `count` full-length TCP/IPv4 frames of `packet_size` bytes, round-robin over
/// `flows` distinct address pairs.
pub fn synthesize_uniform(count: usize, packet_size: usize, flows: u32) -> Result<CaptureFile, CaptureError> {
    synthesize(count, packet_size, flows, packet_size)
}

/// Like [`synthesize_uniform`] but each record keeps only the first `snaplen`
/// bytes, the way header-only traces are published.
pub fn synthesize_headers_only(
    count: usize,
    packet_size: usize,
    flows: u32,
    snaplen: usize,
) -> Result<CaptureFile, CaptureError> {
    synthesize(count, packet_size, flows, snaplen.min(packet_size))
}

fn synthesize(count: usize, packet_size: usize, flows: u32, keep: usize) -> Result<CaptureFile, CaptureError> {
    if !(MIN_SYNTH_FRAME..=MAX_SYNTH_FRAME).contains(&packet_size) {
        return Err(CaptureError::BadPacketSize(packet_size));
    }
    if flows == 0 {
        return Err(CaptureError::NoFlows);
    }
    let mut cap = CaptureFile::new(keep.max(1) as u32);
    cap.records = (0..count)
        .map(|i| {
            let mut f = synth_tcp_frame(packet_size, (i % flows as usize) as u32, i as u32);
            f.truncate(keep);
            CaptureRecord {
                timestamp_ns: i as u64 * 1_000,
                orig_len: packet_size as u32,
                data: f.into(),
            }
        })
        .collect();
    Ok(cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayMode {
    #[default]
    InProcess,
    DatagramSocket,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub mode: ReplayMode,
    /// `None` replays as fast as the sink accepts.
    pub target_pps: Option<f64>,
    pub loop_count: u32,
    pub pad: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            mode: ReplayMode::InProcess,
            target_pps: None,
            loop_count: 1,
            pad: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ReplayStats {
    pub packets_sent: u64,
    pub bytes_sent: u64,
    pub send_errors: u64,
    pub elapsed: Duration,
    pub achieved_pps: f64,
}

#[derive(Debug, Error)]
pub enum SendError {
    /// Counted and skipped.
    #[error("send failed: {0}")]
    Transient(#[source] io::Error),
    /// The receiving side is gone; replay stops.
    #[error("sink closed")]
    Closed,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("loop_count must be at least 1")]
    ZeroLoops,
    #[error("target_pps must be positive and finite")]
    BadRate,
    #[error("sink closed after {sent} packets")]
    SinkClosed { sent: u64 },
}

pub trait PacketSink {
    fn send(&mut self, pkt: RawPacket) -> Result<(), SendError>;

    fn finish(&mut self) -> Result<(), SendError> {
        Ok(())
    }
}

impl PacketSink for Vec<RawPacket> {
    fn send(&mut self, pkt: RawPacket) -> Result<(), SendError> {
        self.push(pkt);
        Ok(())
    }
}

/// Batches packets onto a bounded channel; a full channel blocks the sender.
pub struct ChannelSink {
    tx: Sender<Vec<RawPacket>>,
    batch: Vec<RawPacket>,
    batch_size: usize,
}

impl ChannelSink {
    pub fn new(tx: Sender<Vec<RawPacket>>, batch_size: usize) -> Self {
        let batch_size = batch_size.max(1);
        ChannelSink {
            tx,
            batch: Vec::with_capacity(batch_size),
            batch_size,
        }
    }

    fn ship(&mut self) -> Result<(), SendError> {
        if self.batch.is_empty() {
            return Ok(());
        }
        let full = std::mem::replace(&mut self.batch, Vec::with_capacity(self.batch_size));
        self.tx.send(full).map_err(|_| SendError::Closed)
    }
}

impl PacketSink for ChannelSink {
    fn send(&mut self, pkt: RawPacket) -> Result<(), SendError> {
        self.batch.push(pkt);
        if self.batch.len() >= self.batch_size {
            self.ship()?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), SendError> {
        self.ship()
    }
}

/// Sends each frame as the payload of one UDP datagram.
pub struct DatagramSink {
    sock: UdpSocket,
}

impl DatagramSink {
    pub fn connect(target: SocketAddr) -> io::Result<Self> {
        let bind: SocketAddr = if target.is_ipv4() {
            "0.0.0.0:0".parse().unwrap()
        } else {
            "[::]:0".parse().unwrap()
        };
        let sock = UdpSocket::bind(bind)?;
        sock.connect(target)?;
        Ok(DatagramSink { sock })
    }
}

impl PacketSink for DatagramSink {
    fn send(&mut self, pkt: RawPacket) -> Result<(), SendError> {
        self.sock.send(pkt.data()).map(|_| ()).map_err(SendError::Transient)
    }
}

/// Token bucket pacer. Holds at most `capacity` tokens, refilled at `rate`
/// per second; starts with one token.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate: f64) -> Self {
        TokenBucket {
            rate,
            capacity: (rate / 1000.0).max(1.0),
            tokens: 1.0,
            last: Instant::now(),
        }
    }

    fn refill(&mut self) {
        let now = Instant::now();
        let dt = now.duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + dt * self.rate).min(self.capacity);
    }

    /// Blocks until one token is available and takes it.
    pub fn acquire(&mut self) {
        loop {
            self.refill();
            if self.tokens >= 1.0 {
                self.tokens -= 1.0;
                return;
            }
            let wait = (1.0 - self.tokens) / self.rate;
            if wait > 200e-6 {
                std::thread::sleep(Duration::from_secs_f64(wait));
            } else {
                std::hint::spin_loop();
            }
        }
    }
}

/// Prepares the packets a replay delivers. Done once so that every loop
/// reuses the same buffers.
pub fn prepare_packets(cap: &CaptureFile, pad: bool) -> Vec<RawPacket> {
    cap.records
        .iter()
        .map(|r| if pad { pad_packet(r) } else { unpadded_packet(r) })
        .collect()
}

pub fn replay<S: PacketSink + ?Sized>(
    cap: &CaptureFile,
    cfg: &ReplayConfig,
    sink: &mut S,
) -> Result<ReplayStats, ReplayError> {
    let pkts = prepare_packets(cap, cfg.pad);
    replay_prepared(&pkts, cfg, sink)
}

pub fn replay_prepared<S: PacketSink + ?Sized>(
    pkts: &[RawPacket],
    cfg: &ReplayConfig,
    sink: &mut S,
) -> Result<ReplayStats, ReplayError> {
    if cfg.loop_count == 0 {
        return Err(ReplayError::ZeroLoops);
    }
    let mut bucket = match cfg.target_pps {
        Some(r) if !(r.is_finite() && r > 0.0) => return Err(ReplayError::BadRate),
        Some(r) => Some(TokenBucket::new(r)),
        None => None,
    };
    let mut stats = ReplayStats::default();
    let start = Instant::now();
    for _ in 0..cfg.loop_count {
        for p in pkts {
            if let Some(b) = bucket.as_mut() {
                b.acquire();
            }
            let len = p.len() as u64;
            match sink.send(p.clone()) {
                Ok(()) => {
                    stats.packets_sent += 1;
                    stats.bytes_sent += len;
                }
                Err(SendError::Transient(_)) => stats.send_errors += 1,
                Err(SendError::Closed) => {
                    return Err(ReplayError::SinkClosed {
                        sent: stats.packets_sent,
                    })
                }
            }
        }
    }
    match sink.finish() {
        Ok(()) => {}
        Err(SendError::Transient(_)) => stats.send_errors += 1,
        Err(SendError::Closed) => {
            return Err(ReplayError::SinkClosed {
                sent: stats.packets_sent,
            })
        }
    }
    stats.elapsed = start.elapsed();
    let secs = stats.elapsed.as_secs_f64();
    stats.achieved_pps = if secs > 0.0 {
        stats.packets_sent as f64 / secs
    } else {
        0.0
    };
    Ok(stats)
}
