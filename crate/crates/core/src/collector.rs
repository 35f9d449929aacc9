//! Host-side collection: anonymize summary pairs and count them into a sparse
//! traffic matrix.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hasher;
use std::io::{self, BufRead, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use siphasher::sip::SipHasher24;
use thiserror::Error;

use crate::aggregator::{FlowPair, SummaryPacket};

/// Environment variable naming the key file when no flag or config supplies one.
pub const KEY_FILE_ENV: &str = "HDREX_KEY_FILE";
pub const KEY_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("reading key file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("key must be {KEY_LEN} raw bytes or {} hex digits", KEY_LEN * 2)]
    BadFormat,
}

/// 128-bit anonymization secret. Deliberately not `Serialize`, and `Debug`
/// prints nothing of the key material.
#[derive(Clone, PartialEq, Eq)]
pub struct AnonymizerKey([u8; KEY_LEN]);

impl AnonymizerKey {
    pub fn new(bytes: [u8; KEY_LEN]) -> Self {
        AnonymizerKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, KeyError> {
        let mut key = [0u8; KEY_LEN];
        hex::decode_to_slice(s.trim(), &mut key).map_err(|_| KeyError::BadFormat)?;
        Ok(AnonymizerKey(key))
    }

    /// Accepts either exactly 16 raw bytes or 32 hex digits (surrounding
    /// whitespace allowed).
    pub fn from_file(path: &Path) -> Result<Self, KeyError> {
        let raw = std::fs::read(path).map_err(|source| KeyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if let Ok(text) = std::str::from_utf8(&raw) {
            if let Ok(k) = Self::from_hex(text) {
                return Ok(k);
            }
        }
        let bytes: [u8; KEY_LEN] = raw.as_slice().try_into().map_err(|_| KeyError::BadFormat)?;
        Ok(AnonymizerKey(bytes))
    }

    fn halves(&self) -> (u64, u64) {
        let k0 = u64::from_le_bytes(self.0[..8].try_into().unwrap());
        let k1 = u64::from_le_bytes(self.0[8..].try_into().unwrap());
        (k0, k1)
    }
}

impl fmt::Debug for AnonymizerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AnonymizerKey(..)")
    }
}

/// Maps a real address to a 32-bit pseudonym. Implementations must be
/// deterministic for a fixed configuration.
pub trait Anonymizer: Sync {
    fn anonymize(&self, ip: Ipv4Addr) -> u32;
}

/// SipHash-2-4 keyed PRF over the four address octets, truncated to the low
/// 32 bits of the tag.
#[derive(Clone, Debug)]
pub struct KeyedAnonymizer {
    k0: u64,
    k1: u64,
}

impl KeyedAnonymizer {
    pub fn new(key: &AnonymizerKey) -> Self {
        let (k0, k1) = key.halves();
        KeyedAnonymizer { k0, k1 }
    }
}

impl Anonymizer for KeyedAnonymizer {
    #[inline]
    fn anonymize(&self, ip: Ipv4Addr) -> u32 {
        let mut h = SipHasher24::new_with_keys(self.k0, self.k1);
        h.write(&ip.octets());
        h.finish() as u32
    }
}

pub fn anonymize(ip: Ipv4Addr, key: &AnonymizerKey) -> u32 {
    KeyedAnonymizer::new(key).anonymize(ip)
}

#[derive(Debug, Error)]
pub enum MatrixImportError {
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Sparse `(anon_src, anon_dst) -> count` map. Zero counts are never stored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficMatrix {
    entries: HashMap<(u32, u32), u64>,
    total: u64,
}

impl TrafficMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, src: u32, dst: u32) -> u64 {
        self.entries.get(&(src, dst)).copied().unwrap_or(0)
    }

    pub fn add(&mut self, src: u32, dst: u32, count: u64) {
        if count == 0 {
            return;
        }
        *self.entries.entry((src, dst)).or_insert(0) += count;
        self.total += count;
    }

    pub fn ingest_pair<A: Anonymizer + ?Sized>(&mut self, pair: FlowPair, anon: &A) {
        self.add(anon.anonymize(pair.src), anon.anonymize(pair.dst), 1);
    }

    pub fn ingest_summary<A: Anonymizer + ?Sized>(&mut self, s: &SummaryPacket, anon: &A) {
        for &p in s.pairs() {
            self.ingest_pair(p, anon);
        }
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn merge_from(&mut self, other: &TrafficMatrix) {
        for (&(s, d), &c) in &other.entries {
            self.add(s, d, c);
        }
    }

    pub fn merge(mut self, other: TrafficMatrix) -> TrafficMatrix {
        // fold the smaller map into the larger one
        if self.entries.len() < other.entries.len() {
            let mut big = other;
            big.merge_from(&self);
            return big;
        }
        self.merge_from(&other);
        self
    }

    /// Entries sorted by `(anon_src, anon_dst)`.
    pub fn sorted_entries(&self) -> Vec<((u32, u32), u64)> {
        let mut v: Vec<_> = self.entries.iter().map(|(&k, &c)| (k, c)).collect();
        v.sort_unstable_by_key(|&(k, _)| k);
        v
    }

    /// How many entries have each count value.
    pub fn count_histogram(&self) -> std::collections::BTreeMap<u64, u64> {
        let mut h = std::collections::BTreeMap::new();
        for &c in self.entries.values() {
            *h.entry(c).or_insert(0) += 1;
        }
        h
    }

    /// Writes `anon_src\tanon_dst\tcount` rows in ascending key order and
    /// returns the row count.
    pub fn export_tsv<W: Write>(&self, sink: &mut W) -> io::Result<usize> {
        let rows = self.sorted_entries();
        for ((s, d), c) in &rows {
            writeln!(sink, "{s}\t{d}\t{c}")?;
        }
        Ok(rows.len())
    }

    pub fn import_tsv<R: BufRead>(src: R) -> Result<TrafficMatrix, MatrixImportError> {
        let mut m = TrafficMatrix::new();
        for (i, line) in src.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| MatrixImportError::BadLine {
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut cols = line.split('\t');
            let mut next = |what: &str| -> Result<&str, MatrixImportError> {
                cols.next().ok_or_else(|| bad(&format!("missing {what}")))
            };
            let s: u32 = next("anon_src")?.parse().map_err(|_| bad("bad anon_src"))?;
            let d: u32 = next("anon_dst")?.parse().map_err(|_| bad("bad anon_dst"))?;
            let c: u64 = next("count")?.parse().map_err(|_| bad("bad count"))?;
            if cols.next().is_some() {
                return Err(bad("extra columns"));
            }
            if c == 0 {
                return Err(bad("zero count"));
            }
            m.add(s, d, c);
        }
        Ok(m)
    }

    pub fn from_pairs_seq<A: Anonymizer + ?Sized>(pairs: &[FlowPair], anon: &A) -> TrafficMatrix {
        let mut m = TrafficMatrix::new();
        for &p in pairs {
            m.ingest_pair(p, anon);
        }
        m
    }

    /// Per-shard matrices on the rayon pool, merged at the end.
    #[cfg(feature = "parallel")]
    pub fn from_pairs_par<A: Anonymizer + ?Sized>(pairs: &[FlowPair], anon: &A) -> TrafficMatrix {
        use rayon::prelude::*;

        pairs
            .par_chunks(8192)
            .map(|chunk| Self::from_pairs_seq(chunk, anon))
            .reduce(TrafficMatrix::new, TrafficMatrix::merge)
    }

    pub fn from_pairs<A: Anonymizer + ?Sized>(pairs: &[FlowPair], anon: &A) -> TrafficMatrix {
        #[cfg(feature = "parallel")]
        if pairs.len() >= crate::parser::PARALLEL_THRESHOLD {
            return Self::from_pairs_par(pairs, anon);
        }
        Self::from_pairs_seq(pairs, anon)
    }
}
