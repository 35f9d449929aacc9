//! Stateful pair aggregation and the summary packet wire format.
//!
//! Summary layout, big-endian throughout:
//!
//! ```text
//! 0..6    dst MAC
//! 6..12   src MAC
//! 12..14  ethertype (default 0x88B5)
//! 14      pair count
//! 15..    count × (src IPv4, dst IPv4), 8 bytes per pair, arrival order
//! ```

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet_model::{EthernetHeader, ETHERNET_HEADER_LEN};

/// IEEE local-experimental ethertype.
pub const DEFAULT_SUMMARY_ETHERTYPE: u16 = 0x88b5;
pub const DEFAULT_PAIRS_PER_SUMMARY: u8 = 150;
pub const FLOW_PAIR_LEN: usize = 8;
pub const SUMMARY_PREFIX_LEN: usize = ETHERNET_HEADER_LEN + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowPair {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
}

impl FlowPair {
    pub fn new(src: Ipv4Addr, dst: Ipv4Addr) -> Self {
        FlowPair { src, dst }
    }

    pub fn to_bytes(self) -> [u8; FLOW_PAIR_LEN] {
        let mut b = [0u8; FLOW_PAIR_LEN];
        b[..4].copy_from_slice(&self.src.octets());
        b[4..].copy_from_slice(&self.dst.octets());
        b
    }

    pub fn from_bytes(b: [u8; FLOW_PAIR_LEN]) -> Self {
        FlowPair {
            src: Ipv4Addr::new(b[0], b[1], b[2], b[3]),
            dst: Ipv4Addr::new(b[4], b[5], b[6], b[7]),
        }
    }
}

impl fmt::Display for FlowPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.src, self.dst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AggregatorError {
    #[error("pairs per summary must be in 1..=255, got {0}")]
    InvalidPairsPerSummary(u32),
    #[error("summary truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unexpected summary ethertype {found:#06x}, expected {expected:#06x}")]
    WrongProtocol { expected: u16, found: u16 },
    #[error("summary carries {0} pairs, more than the count byte can describe")]
    TooManyPairs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    pub n_p: u8,
    pub summary_ethertype: u16,
    pub summary_dst_mac: [u8; 6],
    pub summary_src_mac: [u8; 6],
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            n_p: DEFAULT_PAIRS_PER_SUMMARY,
            summary_ethertype: DEFAULT_SUMMARY_ETHERTYPE,
            summary_dst_mac: [0; 6],
            summary_src_mac: [0; 6],
        }
    }
}

impl AggregatorConfig {
    pub fn with_pairs_per_summary(n_p: u32) -> Result<Self, AggregatorError> {
        let cfg = AggregatorConfig {
            n_p: u8::try_from(n_p).map_err(|_| AggregatorError::InvalidPairsPerSummary(n_p))?,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AggregatorError> {
        if self.n_p == 0 {
            return Err(AggregatorError::InvalidPairsPerSummary(0));
        }
        Ok(())
    }

    fn eth(&self) -> EthernetHeader {
        EthernetHeader {
            dst_mac: self.summary_dst_mac,
            src_mac: self.summary_src_mac,
            ethertype: self.summary_ethertype,
        }
    }

    /// Serialized length of a full summary, `15 + 8 * n_p`.
    pub fn full_summary_len(&self) -> usize {
        summary_len(self.n_p as usize)
    }
}

pub fn summary_len(count: usize) -> usize {
    SUMMARY_PREFIX_LEN + FLOW_PAIR_LEN * count
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryPacket {
    pub eth: EthernetHeader,
    pairs: Vec<FlowPair>,
}

impl SummaryPacket {
    pub fn new(eth: EthernetHeader, pairs: Vec<FlowPair>) -> Result<Self, AggregatorError> {
        if pairs.len() > u8::MAX as usize {
            return Err(AggregatorError::TooManyPairs(pairs.len()));
        }
        Ok(SummaryPacket { eth, pairs })
    }

    pub fn count(&self) -> u8 {
        self.pairs.len() as u8
    }

    pub fn pairs(&self) -> &[FlowPair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<FlowPair> {
        self.pairs
    }

    pub fn encoded_len(&self) -> usize {
        summary_len(self.pairs.len())
    }
}

pub fn encode_summary(s: &SummaryPacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(s.encoded_len());
    encode_summary_into(s, &mut out);
    out
}

pub fn encode_summary_into(s: &SummaryPacket, out: &mut Vec<u8>) {
    s.eth.write_to(out);
    out.push(s.count());
    for p in &s.pairs {
        out.extend_from_slice(&p.to_bytes());
    }
}

/// Decodes a summary produced under `ethertype`. Bytes past the last pair
/// (e.g. minimum-frame padding) are ignored.
pub fn decode_summary(data: &[u8], ethertype: u16) -> Result<SummaryPacket, AggregatorError> {
    if data.len() < SUMMARY_PREFIX_LEN {
        return Err(AggregatorError::Truncated {
            needed: SUMMARY_PREFIX_LEN,
            available: data.len(),
        });
    }
    let (eth, _) = crate::packet_model::decode_ethernet(data).expect("length checked");
    if eth.ethertype != ethertype {
        return Err(AggregatorError::WrongProtocol {
            expected: ethertype,
            found: eth.ethertype,
        });
    }
    let count = data[ETHERNET_HEADER_LEN] as usize;
    let needed = summary_len(count);
    if data.len() < needed {
        return Err(AggregatorError::Truncated {
            needed,
            available: data.len(),
        });
    }
    let pairs = data[SUMMARY_PREFIX_LEN..needed]
        .chunks_exact(FLOW_PAIR_LEN)
        .map(|c| FlowPair::from_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(SummaryPacket { eth, pairs })
}

/// Packs flow pairs into summaries of exactly `n_p` pairs.
#[derive(Debug, Clone)]
pub struct Aggregator {
    cfg: AggregatorConfig,
    pending: Vec<FlowPair>,
    emitted: u64,
}

impl Aggregator {
    pub fn new(cfg: AggregatorConfig) -> Result<Self, AggregatorError> {
        cfg.validate()?;
        Ok(Aggregator {
            cfg,
            pending: Vec::with_capacity(cfg.n_p as usize),
            emitted: 0,
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.cfg
    }

    pub fn pending(&self) -> &[FlowPair] {
        &self.pending
    }

    /// Summaries emitted so far, flushes included.
    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    pub fn push(&mut self, pair: FlowPair) -> Option<SummaryPacket> {
        self.pending.push(pair);
        if self.pending.len() == self.cfg.n_p as usize {
            Some(self.take())
        } else {
            None
        }
    }

    /// Emits whatever is pending as a short summary.
    pub fn flush(&mut self) -> Option<SummaryPacket> {
        if self.pending.is_empty() {
            None
        } else {
            Some(self.take())
        }
    }

    fn take(&mut self) -> SummaryPacket {
        let pairs = std::mem::replace(&mut self.pending, Vec::with_capacity(self.cfg.n_p as usize));
        self.emitted += 1;
        SummaryPacket {
            eth: self.cfg.eth(),
            pairs,
        }
    }
}

/// Fraction of offered packets lost when every `n_p` forwarded packets cost
/// one extra egress slot for their summary: `1 / (n_p + 1)`.
pub fn theoretical_drop_rate(n_p: u32) -> Result<f64, AggregatorError> {
    if n_p == 0 {
        return Err(AggregatorError::InvalidPairsPerSummary(0));
    }
    Ok(1.0 / (n_p as f64 + 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SlotModel {
    /// Real packets that made it through.
    pub forwarded: u64,
    /// Real packets whose egress slot went to a summary instead.
    pub displaced: u64,
}

impl SlotModel {
    /// `displaced / (forwarded + displaced)` as an exact ratio.
    pub fn displaced_ratio(&self) -> (u64, u64) {
        (self.displaced, self.forwarded + self.displaced)
    }

    pub fn displaced_fraction(&self) -> f64 {
        let (num, den) = self.displaced_ratio();
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    /// Exact rational comparison against `1 / (n_p + 1)`.
    pub fn matches_theoretical(&self, n_p: u32) -> bool {
        let (num, den) = self.displaced_ratio();
        den != 0 && num as u128 * (n_p as u128 + 1) == den as u128
    }
}

/// Steps a saturated egress link slot by slot. Each of the `n_pairs` forwarded
/// packets adds one pair to the aggregator; each emitted summary takes the
/// next slot, displacing one real packet.
pub fn simulate_slot_model(n_pairs: u64, n_p: u32) -> Result<SlotModel, AggregatorError> {
    if n_p == 0 {
        return Err(AggregatorError::InvalidPairsPerSummary(0));
    }
    let mut fill = 0u32;
    let mut displaced = 0u64;
    for _ in 0..n_pairs {
        fill += 1;
        if fill == n_p {
            fill = 0;
            displaced += 1;
        }
    }
    Ok(SlotModel {
        forwarded: n_pairs,
        displaced,
    })
}
