//! The fixed parse graph:
//!
//! ```text
//! start -> parse_eth -+- 0x0800 -> parse_ipv4 -+- 6  -> parse_tcp -> accept
//!                     |                        +- 17 -> parse_udp -> accept
//!                     |                        +- *  -> accept
//!                     +- * -> accept
//! ```
//!
//! IPv4 options and TCP options are variable-length extracts sized by the
//! header's own length field. Any failed extract stops the walk; the packet
//! is recorded as errored and yields no flow pair.

use std::ops::AddAssign;

use serde::Serialize;

use crate::aggregator::FlowPair;
use crate::packet_model::{
    decode_ethernet, decode_ipv4, decode_tcp, decode_udp, L4Header, PacketError, ParsedHeaders,
    RawPacket, ETHERNET_HEADER_LEN, ETHERTYPE_IPV4, IPPROTO_TCP, IPPROTO_UDP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    ExtractedPair(FlowPair),
    AcceptedNoPair,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    /// `None` only when the Ethernet extract itself failed.
    pub headers: Option<ParsedHeaders>,
    pub verdict: Verdict,
    pub error: Option<PacketError>,
}

impl ParseOutcome {
    pub fn pair(&self) -> Option<FlowPair> {
        match self.verdict {
            Verdict::ExtractedPair(p) => Some(p),
            Verdict::AcceptedNoPair => None,
        }
    }
}

/// Per-stream counters. `tcp + udp + other_l4 == ipv4` and
/// `ipv4 + non_ip + errored == total`.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParseStats {
    pub total: u64,
    pub ipv4: u64,
    pub tcp: u64,
    pub udp: u64,
    pub other_l4: u64,
    pub non_ip: u64,
    pub errored: u64,
}

impl ParseStats {
    pub fn record(&mut self, outcome: &ParseOutcome) {
        self.total += 1;
        if outcome.error.is_some() {
            self.errored += 1;
            return;
        }
        match &outcome.headers {
            Some(ParsedHeaders { ip: Some(_), l4, .. }) => {
                self.ipv4 += 1;
                match l4 {
                    L4Header::Tcp(_) => self.tcp += 1,
                    L4Header::Udp(_) => self.udp += 1,
                    L4Header::Other => self.other_l4 += 1,
                }
            }
            _ => self.non_ip += 1,
        }
    }

    pub fn is_partition(&self) -> bool {
        self.tcp + self.udp + self.other_l4 == self.ipv4
            && self.ipv4 + self.non_ip + self.errored == self.total
    }
}

impl AddAssign for ParseStats {
    fn add_assign(&mut self, rhs: Self) {
        self.total += rhs.total;
        self.ipv4 += rhs.ipv4;
        self.tcp += rhs.tcp;
        self.udp += rhs.udp;
        self.other_l4 += rhs.other_l4;
        self.non_ip += rhs.non_ip;
        self.errored += rhs.errored;
    }
}

impl std::ops::Add for ParseStats {
    type Output = ParseStats;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl std::iter::Sum for ParseStats {
    fn sum<I: Iterator<Item = ParseStats>>(iter: I) -> Self {
        iter.fold(ParseStats::default(), |a, b| a + b)
    }
}

/// Parses one frame's header region.
pub fn parse(pkt: &RawPacket) -> ParseOutcome {
    parse_bytes(pkt.data())
}

pub fn parse_bytes(data: &[u8]) -> ParseOutcome {
    // parse_eth
    let eth = match decode_ethernet(data) {
        Ok((eth, _)) => eth,
        Err(e) => {
            return ParseOutcome {
                headers: None,
                verdict: Verdict::AcceptedNoPair,
                error: Some(e),
            }
        }
    };
    let mut headers = ParsedHeaders {
        eth,
        ip: None,
        l4: L4Header::Other,
        header_bytes_consumed: ETHERNET_HEADER_LEN,
    };
    if eth.ethertype != ETHERTYPE_IPV4 {
        return accept(headers, None);
    }

    // parse_ipv4
    let ip = match decode_ipv4(&data[ETHERNET_HEADER_LEN..]) {
        Ok((ip, _)) => ip,
        Err(e) => return accept(headers, Some(e)),
    };
    let l4_start = ETHERNET_HEADER_LEN + ip.header_len_bytes();
    headers.header_bytes_consumed = l4_start;
    let protocol = ip.protocol;
    headers.ip = Some(ip);

    let l4 = match protocol {
        IPPROTO_TCP => decode_tcp(&data[l4_start..]).map(|(t, _)| L4Header::Tcp(t)),
        IPPROTO_UDP => decode_udp(&data[l4_start..]).map(|(u, _)| L4Header::Udp(u)),
        _ => Ok(L4Header::Other),
    };
    match l4 {
        Ok(l4) => {
            headers.header_bytes_consumed = ParsedHeaders::consumed_len(headers.ip.as_ref(), &l4);
            headers.l4 = l4;
            accept(headers, None)
        }
        Err(e) => accept(headers, Some(e)),
    }
}

fn accept(headers: ParsedHeaders, error: Option<PacketError>) -> ParseOutcome {
    let verdict = match (&headers.ip, error) {
        (Some(ip), None) => Verdict::ExtractedPair(FlowPair::new(ip.src_ip, ip.dst_ip)),
        _ => Verdict::AcceptedNoPair,
    };
    ParseOutcome {
        headers: Some(headers),
        verdict,
        error,
    }
}

/// Parses a slice of packets one at a time, preserving order.
pub fn parse_stream_seq(pkts: &[RawPacket]) -> (Vec<ParseOutcome>, ParseStats) {
    let mut stats = ParseStats::default();
    let outcomes = pkts
        .iter()
        .map(|p| {
            let o = parse(p);
            stats.record(&o);
            o
        })
        .collect();
    (outcomes, stats)
}

/// Parses a slice of packets on the rayon pool. Outcomes keep input order;
/// per-chunk stats are merged by field-wise addition.
#[cfg(feature = "parallel")]
pub fn parse_stream_par(pkts: &[RawPacket]) -> (Vec<ParseOutcome>, ParseStats) {
    use rayon::prelude::*;

    let outcomes: Vec<ParseOutcome> = pkts.par_iter().map(parse).collect();
    let stats = outcomes
        .par_iter()
        .fold(ParseStats::default, |mut s, o| {
            s.record(o);
            s
        })
        .reduce(ParseStats::default, |a, b| a + b);
    (outcomes, stats)
}

/// Below this many packets the parallel path costs more than it saves.
pub const PARALLEL_THRESHOLD: usize = 4096;

pub fn parse_stream(pkts: &[RawPacket]) -> (Vec<ParseOutcome>, ParseStats) {
    #[cfg(feature = "parallel")]
    if pkts.len() >= PARALLEL_THRESHOLD {
        return parse_stream_par(pkts);
    }
    parse_stream_seq(pkts)
}

/// Only the stats and extracted pairs, in input order. This is what the
/// pipeline's parser stage needs; it skips materializing every outcome.
pub fn extract_pairs(pkts: &[RawPacket], pairs: &mut Vec<FlowPair>) -> ParseStats {
    let mut stats = ParseStats::default();
    for p in pkts {
        let o = parse(p);
        stats.record(&o);
        if let Some(pair) = o.pair() {
            pairs.push(pair);
        }
    }
    stats
}
