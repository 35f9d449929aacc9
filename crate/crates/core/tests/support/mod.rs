//! Test-only reference code. Nothing here calls into the crate's codecs: the
//! reference decoder works from plain offset tables so it can be compared
//! against the parser field by field.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;

use hdrex::packet_model::{L4Header, PacketError};
use hdrex::{anonymize, AnonymizerKey, ParseOutcome};
use rand::Rng;

/// (field, byte offset, byte width), big-endian.
const ETH_FIELDS: &[(&str, usize, usize)] = &[("eth.dst", 0, 6), ("eth.src", 6, 6), ("eth.type", 12, 2)];
const IP_FIELDS: &[(&str, usize, usize)] = &[
    ("ip.ver_ihl", 0, 1),
    ("ip.tos", 1, 1),
    ("ip.total_len", 2, 2),
    ("ip.id", 4, 2),
    ("ip.frag", 6, 2),
    ("ip.ttl", 8, 1),
    ("ip.proto", 9, 1),
    ("ip.csum", 10, 2),
    ("ip.src", 12, 4),
    ("ip.dst", 16, 4),
];
const TCP_FIELDS: &[(&str, usize, usize)] = &[
    ("tcp.sport", 0, 2),
    ("tcp.dport", 2, 2),
    ("tcp.seq", 4, 4),
    ("tcp.ack", 8, 4),
    ("tcp.off_flags", 12, 2),
    ("tcp.win", 14, 2),
    ("tcp.csum", 16, 2),
    ("tcp.urg", 18, 2),
];
const UDP_FIELDS: &[(&str, usize, usize)] = &[
    ("udp.sport", 0, 2),
    ("udp.dport", 2, 2),
    ("udp.len", 4, 2),
    ("udp.csum", 6, 2),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefClass {
    Extract,
    NonIp,
    Truncated(&'static str),
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefDecode {
    pub class: RefClass,
    pub fields: BTreeMap<String, u64>,
    pub ip_options: Option<Vec<u8>>,
    pub tcp_options: Option<Vec<u8>>,
    pub pair: Option<(Ipv4Addr, Ipv4Addr)>,
    pub consumed: Option<usize>,
}

fn read_be(b: &[u8], off: usize, width: usize) -> u64 {
    b[off..off + width].iter().fold(0u64, |acc, &x| (acc << 8) | x as u64)
}

fn read_table(b: &[u8], base: usize, table: &[(&str, usize, usize)], into: &mut BTreeMap<String, u64>) {
    for &(name, off, width) in table {
        into.insert(name.to_string(), read_be(b, base + off, width));
    }
}

/// Walks the frame with the offset tables above.
pub fn reference_decode(b: &[u8]) -> RefDecode {
    let mut d = RefDecode {
        class: RefClass::Extract,
        fields: BTreeMap::new(),
        ip_options: None,
        tcp_options: None,
        pair: None,
        consumed: None,
    };
    if b.len() < 14 {
        d.class = RefClass::Truncated("ethernet");
        return d;
    }
    read_table(b, 0, ETH_FIELDS, &mut d.fields);
    if d.fields["eth.type"] != 0x0800 {
        d.class = RefClass::NonIp;
        d.consumed = Some(14);
        return d;
    }
    let ip = 14;
    if b.len() < ip + 20 {
        d.class = RefClass::Truncated("ipv4");
        return d;
    }
    let version = b[ip] >> 4;
    let ihl = (b[ip] & 0x0f) as usize;
    if version != 4 || ihl < 5 {
        d.class = RefClass::Malformed("ipv4");
        return d;
    }
    if b.len() < ip + ihl * 4 {
        d.class = RefClass::Truncated("ipv4");
        return d;
    }
    read_table(b, ip, IP_FIELDS, &mut d.fields);
    d.ip_options = Some(b[ip + 20..ip + ihl * 4].to_vec());
    let l4 = ip + ihl * 4;
    let proto = b[ip + 9];
    match proto {
        6 => {
            if b.len() < l4 + 20 {
                d.class = RefClass::Truncated("tcp");
                return d;
            }
            let doff = (b[l4 + 12] >> 4) as usize;
            if doff < 5 {
                d.class = RefClass::Malformed("tcp");
                return d;
            }
            if b.len() < l4 + doff * 4 {
                d.class = RefClass::Truncated("tcp");
                return d;
            }
            read_table(b, l4, TCP_FIELDS, &mut d.fields);
            d.tcp_options = Some(b[l4 + 20..l4 + doff * 4].to_vec());
            d.consumed = Some(l4 + doff * 4);
        }
        17 => {
            if b.len() < l4 + 8 {
                d.class = RefClass::Truncated("udp");
                return d;
            }
            read_table(b, l4, UDP_FIELDS, &mut d.fields);
            d.consumed = Some(l4 + 8);
        }
        _ => d.consumed = Some(l4),
    }
    let src = Ipv4Addr::from(read_be(b, ip + 12, 4) as u32);
    let dst = Ipv4Addr::from(read_be(b, ip + 16, 4) as u32);
    d.pair = Some((src, dst));
    d
}

fn mac(m: &[u8; 6]) -> u64 {
    m.iter().fold(0u64, |a, &x| (a << 8) | x as u64)
}

/// Re-expresses a parser outcome in the reference decoder's vocabulary.
pub fn outcome_view(o: &ParseOutcome) -> RefDecode {
    let mut d = RefDecode {
        class: RefClass::Extract,
        fields: BTreeMap::new(),
        ip_options: None,
        tcp_options: None,
        pair: o.pair().map(|p| (p.src, p.dst)),
        consumed: None,
    };
    let layer_name = |e: &PacketError| match e.layer() {
        hdrex::packet_model::Layer::Ethernet => "ethernet",
        hdrex::packet_model::Layer::Ipv4 => "ipv4",
        hdrex::packet_model::Layer::Tcp => "tcp",
        hdrex::packet_model::Layer::Udp => "udp",
    };
    if let Some(e) = &o.error {
        d.class = match e {
            PacketError::Truncated { .. } => RefClass::Truncated(layer_name(e)),
            _ => RefClass::Malformed(layer_name(e)),
        };
    }
    let Some(h) = &o.headers else { return d };
    d.fields.insert("eth.dst".into(), mac(&h.eth.dst_mac));
    d.fields.insert("eth.src".into(), mac(&h.eth.src_mac));
    d.fields.insert("eth.type".into(), h.eth.ethertype as u64);
    if o.error.is_none() {
        d.consumed = Some(h.header_bytes_consumed);
        if h.ip.is_none() {
            d.class = RefClass::NonIp;
        }
    }
    if let Some(ip) = &h.ip {
        let f = &mut d.fields;
        f.insert("ip.ver_ihl".into(), ((ip.version << 4) | ip.hdr_len) as u64);
        f.insert("ip.tos".into(), ip.dscp_ecn as u64);
        f.insert("ip.total_len".into(), ip.total_length as u64);
        f.insert("ip.id".into(), ip.identification as u64);
        f.insert("ip.frag".into(), ip.flags_fragment as u64);
        f.insert("ip.ttl".into(), ip.ttl as u64);
        f.insert("ip.proto".into(), ip.protocol as u64);
        f.insert("ip.csum".into(), ip.checksum as u64);
        f.insert("ip.src".into(), u32::from(ip.src_ip) as u64);
        f.insert("ip.dst".into(), u32::from(ip.dst_ip) as u64);
        d.ip_options = Some(ip.options.clone());
    }
    match &h.l4 {
        L4Header::Tcp(t) => {
            let f = &mut d.fields;
            f.insert("tcp.sport".into(), t.src_port as u64);
            f.insert("tcp.dport".into(), t.dst_port as u64);
            f.insert("tcp.seq".into(), t.seq as u64);
            f.insert("tcp.ack".into(), t.ack as u64);
            f.insert("tcp.off_flags".into(), (((t.data_offset as u16) << 12) | t.flags) as u64);
            f.insert("tcp.win".into(), t.window as u64);
            f.insert("tcp.csum".into(), t.checksum as u64);
            f.insert("tcp.urg".into(), t.urgent as u64);
            d.tcp_options = Some(t.options.clone());
        }
        L4Header::Udp(u) => {
            let f = &mut d.fields;
            f.insert("udp.sport".into(), u.src_port as u64);
            f.insert("udp.dport".into(), u.dst_port as u64);
            f.insert("udp.len".into(), u.length as u64);
            f.insert("udp.csum".into(), u.checksum as u64);
        }
        L4Header::Other => {}
    }
    d
}

/// A random frame: mostly plausible IPv4/TCP/UDP with and without options,
/// plus wrong ethertypes, bad versions, short IHL / data offset and cuts at
/// arbitrary positions.
pub fn fuzz_frame<R: Rng>(rng: &mut R) -> Vec<u8> {
    let ethertype: u16 = match rng.random_range(0..10) {
        0 => 0x0806,
        1 => 0x8100,
        2 => 0x86dd,
        3 => rng.random(),
        _ => 0x0800,
    };
    let ihl: u8 = match rng.random_range(0..10) {
        0 => rng.random_range(0..5),
        1..=3 => rng.random_range(6..=15),
        _ => 5,
    };
    let version: u8 = if rng.random_range(0..20) == 0 { rng.random_range(0..16) } else { 4 };
    let proto: u8 = match rng.random_range(0..10) {
        0 => 47,
        1 => 1,
        2 => rng.random(),
        3..=5 => 17,
        _ => 6,
    };
    let doff: u8 = match rng.random_range(0..10) {
        0 => rng.random_range(0..5),
        1..=3 => rng.random_range(6..=15),
        _ => 5,
    };
    let full = 14 + ihl.max(5) as usize * 4 + 60 + rng.random_range(0..64);
    let mut f: Vec<u8> = (0..full).map(|_| rng.random()).collect();
    f[12..14].copy_from_slice(&ethertype.to_be_bytes());
    f[14] = (version << 4) | ihl;
    f[14 + 9] = proto;
    let l4 = 14 + ihl.max(5) as usize * 4;
    f[l4 + 12] = (doff << 4) | (f[l4 + 12] & 0x0f);
    if rng.random_range(0..4) == 0 {
        let cut = rng.random_range(0..f.len());
        f.truncate(cut);
    }
    f
}

/// Naive one-pass `(src, dst)` count straight off the frames, anonymized and
/// rendered in the matrix export format.
pub fn naive_anonymized_export<'a>(frames: impl IntoIterator<Item = &'a [u8]>, key: &AnonymizerKey) -> (u64, String) {
    let mut real: HashMap<(Ipv4Addr, Ipv4Addr), u64> = HashMap::new();
    let mut total = 0;
    for f in frames {
        if let Some(p) = reference_decode(f).pair {
            *real.entry(p).or_insert(0) += 1;
            total += 1;
        }
    }
    let mut anon: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for ((s, d), c) in real {
        *anon.entry((anonymize(s, key), anonymize(d, key))).or_insert(0) += c;
    }
    let mut out = String::new();
    for ((s, d), c) in anon {
        out.push_str(&format!("{s}\t{d}\t{c}\n"));
    }
    (total, out)
}
