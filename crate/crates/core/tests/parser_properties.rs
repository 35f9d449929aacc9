mod support;

use hdrex::packet_model::{encode_headers, RawPacket};
use hdrex::parser::{parse_bytes, parse_stream, Verdict};
use hdrex::traffic_gen::{pad_packet, synthesize_headers_only, synthesize_uniform};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{fuzz_frame, outcome_view, reference_decode};

fn arb_frame() -> impl Strategy<Value = Vec<u8>> {
    any::<u64>().prop_map(|seed| fuzz_frame(&mut ChaCha8Rng::seed_from_u64(seed)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn agrees_with_reference(f in arb_frame()) {
        prop_assert_eq!(outcome_view(&parse_bytes(&f)), reference_decode(&f));
    }

    #[test]
    fn deterministic(f in arb_frame()) {
        prop_assert_eq!(parse_bytes(&f), parse_bytes(&f.clone()));
    }

    #[test]
    fn appended_payload_is_ignored(f in arb_frame(), tail in proptest::collection::vec(any::<u8>(), 0..200)) {
        let a = parse_bytes(&f);
        prop_assume!(a.error.is_none());
        let mut g = f.clone();
        g.extend_from_slice(&tail);
        let b = parse_bytes(&g);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bytes_past_consumed_never_matter(f in arb_frame(), fill in any::<u8>()) {
        let a = parse_bytes(&f);
        prop_assume!(a.error.is_none());
        let consumed = a.headers.as_ref().unwrap().header_bytes_consumed;
        let mut g = f.clone();
        for b in &mut g[consumed..] { *b = fill; }
        prop_assert_eq!(parse_bytes(&g), a);
    }

    #[test]
    fn encode_reproduces_header_region(f in arb_frame()) {
        let o = parse_bytes(&f);
        prop_assume!(o.error.is_none());
        let h = o.headers.unwrap();
        let bytes = encode_headers(&h).unwrap();
        prop_assert_eq!(bytes.len(), h.header_bytes_consumed);
        prop_assert_eq!(&bytes[..], &f[..h.header_bytes_consumed]);
    }
}

#[test]
fn corpus_round_trip() {
    for size in [54, 64, 512, 1518] {
        let cap = synthesize_uniform(50, size, 7).unwrap();
        for r in &cap.records {
            let o = parse_bytes(&r.data);
            let h = o.headers.unwrap();
            assert_eq!(h.header_bytes_consumed, 54);
            assert_eq!(encode_headers(&h).unwrap(), &r.data[..54]);
        }
    }
}

#[test]
fn header_only_trace_counts_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut pkts: Vec<RawPacket> = synthesize_headers_only(3000, 1024, 31, 64)
        .unwrap()
        .records
        .iter()
        .map(pad_packet)
        .collect();
    pkts.extend((0..3000).map(|i| RawPacket::new(fuzz_frame(&mut rng), i)));
    let (_, stats) = parse_stream(&pkts);
    let reference_ipv4 = pkts.iter().filter(|p| reference_decode(p.data()).pair.is_some()).count() as u64;
    assert_eq!(stats.ipv4, reference_ipv4);
    assert!(stats.is_partition());
    assert_eq!(stats.total, 6000);
}

#[test]
fn synthesized_frames_extract() {
    let cap = synthesize_uniform(64, 1518, 8).unwrap();
    assert!(cap
        .records
        .iter()
        .all(|r| matches!(parse_bytes(&r.data).verdict, Verdict::ExtractedPair(_))));
}
