//! Byte-exact codecs for the Ethernet, IPv4, TCP and UDP headers.
//!
//! Every decoder takes the slice starting at its header and returns the
//! decoded header together with the number of bytes left after it. Decoders
//! never look past the header they decode, so trailing payload (including the
//! zero padding added to snap-length captures) has no effect on the result.

use std::net::Ipv4Addr;

use bytes::Bytes;
use thiserror::Error;

pub const ETHERNET_HEADER_LEN: usize = 14;
pub const IPV4_MIN_HEADER_LEN: usize = 20;
pub const TCP_MIN_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const ETHERTYPE_VLAN: u16 = 0x8100;

pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

/// Errors produced by the header codecs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("truncated {layer} header: need {needed} bytes, have {available}")]
    Truncated {
        layer: Layer,
        needed: usize,
        available: usize,
    },
    #[error("malformed {layer} header: {reason}")]
    Malformed { layer: Layer, reason: &'static str },
    #[error("inconsistent {layer} header: {reason}")]
    Inconsistent { layer: Layer, reason: &'static str },
}

impl PacketError {
    pub fn layer(&self) -> Layer {
        match *self {
            PacketError::Truncated { layer, .. }
            | PacketError::Malformed { layer, .. }
            | PacketError::Inconsistent { layer, .. } => layer,
        }
    }

    pub fn is_truncated(&self) -> bool {
        matches!(self, PacketError::Truncated { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Ethernet,
    Ipv4,
    Tcp,
    Udp,
}

impl std::fmt::Display for Layer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layer::Ethernet => "ethernet",
            Layer::Ipv4 => "ipv4",
            Layer::Tcp => "tcp",
            Layer::Udp => "udp",
        })
    }
}

pub type Result<T> = std::result::Result<T, PacketError>;

fn truncated(layer: Layer, needed: usize, available: usize) -> PacketError {
    PacketError::Truncated {
        layer,
        needed,
        available,
    }
}

#[inline]
fn be16(data: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([data[at], data[at + 1]])
}

#[inline]
fn be32(data: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]])
}

/// A captured frame plus its capture metadata.
///
/// `orig_len` is the length of the frame on the wire. It is never smaller
/// than `data.len()`; header-only traces have `orig_len > data.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacket {
    data: Bytes,
    timestamp_ns: u64,
    orig_len: u32,
}

impl RawPacket {
    /// Builds a packet whose wire length equals its captured length.
    pub fn new(data: impl Into<Bytes>, timestamp_ns: u64) -> Self {
        let data = data.into();
        let orig_len = u32::try_from(data.len()).expect("frame longer than u32::MAX");
        RawPacket {
            data,
            timestamp_ns,
            orig_len,
        }
    }

    /// Builds a snap-length packet. Returns `None` when `orig_len` is shorter
    /// than the captured bytes.
    pub fn with_orig_len(data: impl Into<Bytes>, timestamp_ns: u64, orig_len: u32) -> Option<Self> {
        let data = data.into();
        if (orig_len as usize) < data.len() {
            return None;
        }
        Some(RawPacket {
            data,
            timestamp_ns,
            orig_len,
        })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn bytes(&self) -> &Bytes {
        &self.data
    }

    pub fn timestamp_ns(&self) -> u64 {
        self.timestamp_ns
    }

    pub fn orig_len(&self) -> u32 {
        self.orig_len
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EthernetHeader {
    pub dst_mac: [u8; 6],
    pub src_mac: [u8; 6],
    pub ethertype: u16,
}

impl EthernetHeader {
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.dst_mac);
        out.extend_from_slice(&self.src_mac);
        out.extend_from_slice(&self.ethertype.to_be_bytes());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ipv4Header {
    pub version: u8,
    /// Header length in 32-bit words (IHL).
    pub hdr_len: u8,
    pub dscp_ecn: u8,
    pub total_length: u16,
    pub identification: u16,
    pub flags_fragment: u16,
    pub ttl: u8,
    pub protocol: u8,
    /// Carried as-is; never validated.
    pub checksum: u16,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    /// `(hdr_len - 5) * 4` option bytes.
    pub options: Vec<u8>,
}

impl Ipv4Header {
    pub fn header_len_bytes(&self) -> usize {
        self.hdr_len as usize * 4
    }

    fn check(&self) -> Result<()> {
        let inconsistent = |reason| PacketError::Inconsistent {
            layer: Layer::Ipv4,
            reason,
        };
        if self.version != 4 {
            return Err(inconsistent("version is not 4"));
        }
        if !(5..=15).contains(&self.hdr_len) {
            return Err(inconsistent("hdr_len outside 5..=15"));
        }
        if self.options.len() != (self.hdr_len as usize - 5) * 4 {
            return Err(inconsistent("options length does not match hdr_len"));
        }
        Ok(())
    }

    pub fn write_to(&self, out: &mut Vec<u8>) -> Result<()> {
        self.check()?;
        out.push((self.version << 4) | self.hdr_len);
        out.push(self.dscp_ecn);
        out.extend_from_slice(&self.total_length.to_be_bytes());
        out.extend_from_slice(&self.identification.to_be_bytes());
        out.extend_from_slice(&self.flags_fragment.to_be_bytes());
        out.push(self.ttl);
        out.push(self.protocol);
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out.extend_from_slice(&self.src_ip.octets());
        out.extend_from_slice(&self.dst_ip.octets());
        out.extend_from_slice(&self.options);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TcpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    /// Header length in 32-bit words.
    pub data_offset: u8,
    /// Low 12 bits of the offset/flags word (reserved bits included).
    pub flags: u16,
    pub window: u16,
    pub checksum: u16,
    pub urgent: u16,
    /// `(data_offset - 5) * 4` option bytes.
    pub options: Vec<u8>,
}

impl TcpHeader {
    pub fn header_len_bytes(&self) -> usize {
        self.data_offset as usize * 4
    }

    fn check(&self) -> Result<()> {
        let inconsistent = |reason| PacketError::Inconsistent {
            layer: Layer::Tcp,
            reason,
        };
        if !(5..=15).contains(&self.data_offset) {
            return Err(inconsistent("data_offset outside 5..=15"));
        }
        if self.flags > 0x0fff {
            return Err(inconsistent("flags wider than 12 bits"));
        }
        if self.options.len() != (self.data_offset as usize - 5) * 4 {
            return Err(inconsistent("options length does not match data_offset"));
        }
        Ok(())
    }

    pub fn write_to(&self, out: &mut Vec<u8>) -> Result<()> {
        self.check()?;
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.ack.to_be_bytes());
        let word = ((self.data_offset as u16) << 12) | self.flags;
        out.extend_from_slice(&word.to_be_bytes());
        out.extend_from_slice(&self.window.to_be_bytes());
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out.extend_from_slice(&self.urgent.to_be_bytes());
        out.extend_from_slice(&self.options);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UdpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub length: u16,
    pub checksum: u16,
}

impl UdpHeader {
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.length.to_be_bytes());
        out.extend_from_slice(&self.checksum.to_be_bytes());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum L4Header {
    Tcp(TcpHeader),
    Udp(UdpHeader),
    Other,
}

/// Headers extracted from one frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParsedHeaders {
    pub eth: EthernetHeader,
    pub ip: Option<Ipv4Header>,
    pub l4: L4Header,
    pub header_bytes_consumed: usize,
}

impl ParsedHeaders {
    /// Computes `header_bytes_consumed` from the headers present.
    pub fn consumed_len(ip: Option<&Ipv4Header>, l4: &L4Header) -> usize {
        let mut n = ETHERNET_HEADER_LEN;
        if let Some(ip) = ip {
            n += ip.header_len_bytes();
        }
        n + match l4 {
            L4Header::Tcp(t) => t.header_len_bytes(),
            L4Header::Udp(_) => UDP_HEADER_LEN,
            L4Header::Other => 0,
        }
    }
}

pub fn decode_ethernet(data: &[u8]) -> Result<(EthernetHeader, usize)> {
    if data.len() < ETHERNET_HEADER_LEN {
        return Err(truncated(Layer::Ethernet, ETHERNET_HEADER_LEN, data.len()));
    }
    let mut dst_mac = [0u8; 6];
    let mut src_mac = [0u8; 6];
    dst_mac.copy_from_slice(&data[0..6]);
    src_mac.copy_from_slice(&data[6..12]);
    let hdr = EthernetHeader {
        dst_mac,
        src_mac,
        ethertype: be16(data, 12),
    };
    Ok((hdr, data.len() - ETHERNET_HEADER_LEN))
}

/// Decodes an IPv4 header and its options.
///
/// The fixed 20 bytes are extracted first, so a short input is `Truncated`
/// before the version and IHL are inspected. An IHL below 5 is `Malformed`
/// rather than wrapping into a huge options extract.
pub fn decode_ipv4(data: &[u8]) -> Result<(Ipv4Header, usize)> {
    if data.len() < IPV4_MIN_HEADER_LEN {
        return Err(truncated(Layer::Ipv4, IPV4_MIN_HEADER_LEN, data.len()));
    }
    let version = data[0] >> 4;
    let hdr_len = data[0] & 0x0f;
    if version != 4 {
        return Err(PacketError::Malformed {
            layer: Layer::Ipv4,
            reason: "version is not 4",
        });
    }
    if hdr_len < 5 {
        return Err(PacketError::Malformed {
            layer: Layer::Ipv4,
            reason: "hdr_len below 5",
        });
    }
    let len = hdr_len as usize * 4;
    if data.len() < len {
        return Err(truncated(Layer::Ipv4, len, data.len()));
    }
    let hdr = Ipv4Header {
        version,
        hdr_len,
        dscp_ecn: data[1],
        total_length: be16(data, 2),
        identification: be16(data, 4),
        flags_fragment: be16(data, 6),
        ttl: data[8],
        protocol: data[9],
        checksum: be16(data, 10),
        src_ip: Ipv4Addr::from(be32(data, 12)),
        dst_ip: Ipv4Addr::from(be32(data, 16)),
        options: data[IPV4_MIN_HEADER_LEN..len].to_vec(),
    };
    Ok((hdr, data.len() - len))
}

/// Decodes a TCP header and its options. Error precedence matches
/// [`decode_ipv4`].
pub fn decode_tcp(data: &[u8]) -> Result<(TcpHeader, usize)> {
    if data.len() < TCP_MIN_HEADER_LEN {
        return Err(truncated(Layer::Tcp, TCP_MIN_HEADER_LEN, data.len()));
    }
    let word = be16(data, 12);
    let data_offset = (word >> 12) as u8;
    if data_offset < 5 {
        return Err(PacketError::Malformed {
            layer: Layer::Tcp,
            reason: "data_offset below 5",
        });
    }
    let len = data_offset as usize * 4;
    if data.len() < len {
        return Err(truncated(Layer::Tcp, len, data.len()));
    }
    let hdr = TcpHeader {
        src_port: be16(data, 0),
        dst_port: be16(data, 2),
        seq: be32(data, 4),
        ack: be32(data, 8),
        data_offset,
        flags: word & 0x0fff,
        window: be16(data, 14),
        checksum: be16(data, 16),
        urgent: be16(data, 18),
        options: data[TCP_MIN_HEADER_LEN..len].to_vec(),
    };
    Ok((hdr, data.len() - len))
}

pub fn decode_udp(data: &[u8]) -> Result<(UdpHeader, usize)> {
    if data.len() < UDP_HEADER_LEN {
        return Err(truncated(Layer::Udp, UDP_HEADER_LEN, data.len()));
    }
    let hdr = UdpHeader {
        src_port: be16(data, 0),
        dst_port: be16(data, 2),
        length: be16(data, 4),
        checksum: be16(data, 6),
    };
    Ok((hdr, data.len() - UDP_HEADER_LEN))
}

/// Serializes headers back to wire bytes (the deparser direction).
///
/// Fails with [`PacketError::Inconsistent`] when the headers violate their
/// own invariants, e.g. an option buffer that disagrees with `hdr_len`, or an
/// L4 header that disagrees with the IPv4 protocol number.
pub fn encode_headers(h: &ParsedHeaders) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(h.header_bytes_consumed);
    h.eth.write_to(&mut out);
    match &h.ip {
        None => {
            if h.l4 != L4Header::Other {
                return Err(PacketError::Inconsistent {
                    layer: Layer::Ipv4,
                    reason: "l4 header without ipv4 header",
                });
            }
        }
        Some(ip) => {
            if h.eth.ethertype != ETHERTYPE_IPV4 {
                return Err(PacketError::Inconsistent {
                    layer: Layer::Ethernet,
                    reason: "ipv4 header under non-ipv4 ethertype",
                });
            }
            ip.write_to(&mut out)?;
            match &h.l4 {
                L4Header::Tcp(tcp) => {
                    if ip.protocol != IPPROTO_TCP {
                        return Err(PacketError::Inconsistent {
                            layer: Layer::Tcp,
                            reason: "tcp header under non-tcp protocol",
                        });
                    }
                    tcp.write_to(&mut out)?;
                }
                L4Header::Udp(udp) => {
                    if ip.protocol != IPPROTO_UDP {
                        return Err(PacketError::Inconsistent {
                            layer: Layer::Udp,
                            reason: "udp header under non-udp protocol",
                        });
                    }
                    udp.write_to(&mut out);
                }
                L4Header::Other => {}
            }
        }
    }
    if out.len() != h.header_bytes_consumed {
        return Err(PacketError::Inconsistent {
            layer: Layer::Ethernet,
            reason: "header_bytes_consumed does not match encoded length",
        });
    }
    Ok(out)
}
