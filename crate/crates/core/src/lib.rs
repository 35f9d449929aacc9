//! Software model of a SmartNIC header-extraction data plane.
//!
//! Frames are parsed with a fixed Ethernet/IPv4/TCP/UDP parse graph
//! ([`parser`]), the source/destination address of every IPv4 packet is
//! packed into fixed-format summary packets ([`aggregator`]), and the host
//! side turns those summaries into an anonymized sparse traffic matrix
//! ([`collector`]). [`traffic_gen`] reads and replays pcap traces and
//! [`pipeline`] wires all of it together with a throughput report.
//!
//! The `parallel` feature (on by default) runs the batch entry points
//! ([`parser::parse_stream`], [`collector::TrafficMatrix::from_pairs`]) on
//! rayon. Without it they fall back to the sequential versions.

pub mod aggregator;
pub mod collector;
pub mod packet_model;
pub mod parser;
pub mod pipeline;
pub mod traffic_gen;

pub use aggregator::{
    decode_summary, encode_summary, simulate_slot_model, theoretical_drop_rate, Aggregator,
    AggregatorConfig, FlowPair, SlotModel, SummaryPacket,
};
pub use collector::{anonymize, Anonymizer, AnonymizerKey, KeyedAnonymizer, TrafficMatrix};
pub use packet_model::{encode_headers, ParsedHeaders, RawPacket};
pub use parser::{parse, parse_stream, ParseOutcome, ParseStats, Verdict};
pub use pipeline::{
    bench_ladder, compute_rates, run_pipeline, PipelineConfig, PipelineResult, RateReport, RateRow,
};
pub use traffic_gen::{
    pad_packet, read_capture, replay, synthesize_uniform, write_capture, CaptureFile, CaptureRecord,
    ReplayConfig, ReplayMode, ReplayStats,
};
