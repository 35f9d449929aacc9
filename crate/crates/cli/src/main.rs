use std::collections::hash_map::RandomState;
use std::hash::{BuildHasher, Hasher};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hdrex::aggregator::{AggregatorConfig, DEFAULT_PAIRS_PER_SUMMARY};
use hdrex::collector::KEY_FILE_ENV;
use hdrex::pipeline::{bench_ladder, collect_offline, parse_capture, write_atomically, DEFAULT_LADDER};
use hdrex::traffic_gen::{synthesize_headers_only, DEFAULT_SOCKET_ADDR};
use hdrex::{
    run_pipeline, simulate_slot_model, synthesize_uniform, theoretical_drop_rate, AnonymizerKey, CaptureFile,
    PipelineConfig, ReplayMode,
};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "hdrex", version, about = "Header extraction pipeline: parse, aggregate, anonymize, benchmark")]
struct Cli {
    /// TOML file supplying any of the pipeline flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a capture and print per-class counters.
    Parse {
        input: PathBuf,
        #[arg(long)]
        no_pad: bool,
    },
    /// Run the full pipeline over a capture (or a synthesized trace).
    Run(RunArgs),
    /// Measure the packet-size ladder through the full pipeline.
    Bench(BenchArgs),
    /// Build the anonymized matrix for a capture and write it as TSV.
    Export {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_pad: bool,
    },
    /// Evaluate the summary slot model against 1/(n_p+1).
    SimulateDrop {
        #[arg(long)]
        np: Option<u32>,
        #[arg(long, default_value_t = 1_500_000)]
        pairs: u64,
    },
    /// Write a synthetic fixed-size TCP/IPv4 capture.
    Synth {
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 256)]
        flows: u32,
        /// Keep only this many bytes per record (header-only trace).
        #[arg(long)]
        snaplen: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    InProcess,
    Socket,
}

impl From<Mode> for ReplayMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::InProcess => ReplayMode::InProcess,
            Mode::Socket => ReplayMode::DatagramSocket,
        }
    }
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Pairs per summary packet (1..=255).
    #[arg(long)]
    np: Option<u32>,
    /// Anonymization key: 16 raw bytes or 32 hex digits.
    #[arg(long, env = KEY_FILE_ENV)]
    key_file: Option<PathBuf>,
    #[arg(long)]
    out_matrix: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Replay pacing in packets per second; unpaced when absent.
    #[arg(long)]
    pps: Option<f64>,
    #[arg(long)]
    out_report: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    socket_addr: Option<SocketAddr>,
}

#[derive(Args)]
struct RunArgs {
    /// Capture to replay; omit to synthesize one.
    input: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    loops: Option<u32>,
    #[arg(long)]
    no_pad: bool,
    #[arg(long, default_value_t = 150_000)]
    synth_count: usize,
    #[arg(long, default_value_t = 512)]
    synth_size: usize,
    #[arg(long, default_value_t = 1024)]
    flows: u32,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Comma-separated packet sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Packets per size.
    #[arg(long)]
    count: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    np: Option<u32>,
    key_file: Option<PathBuf>,
    mode: Option<Mode>,
    pps: Option<f64>,
    sizes: Option<Vec<usize>>,
    count: Option<u64>,
    out_matrix: Option<PathBuf>,
    out_report: Option<PathBuf>,
    workers: Option<usize>,
    loops: Option<u32>,
    pad: Option<bool>,
    socket_addr: Option<SocketAddr>,
    summary_ethertype: Option<u16>,
    summary_dst_mac: Option<[u8; 6]>,
    summary_src_mac: Option<[u8; 6]>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn aggregator(&self, np: Option<u32>) -> Result<AggregatorConfig> {
        let n = np.or(self.np).unwrap_or(DEFAULT_PAIRS_PER_SUMMARY as u32);
        let mut cfg = AggregatorConfig::with_pairs_per_summary(n)?;
        if let Some(e) = self.summary_ethertype {
            cfg.summary_ethertype = e;
        }
        if let Some(m) = self.summary_dst_mac {
            cfg.summary_dst_mac = m;
        }
        if let Some(m) = self.summary_src_mac {
            cfg.summary_src_mac = m;
        }
        Ok(cfg)
    }

    fn key(&self, flag: Option<&Path>) -> Result<AnonymizerKey> {
        let path = flag.or(self.key_file.as_deref()).with_context(|| {
            format!("no anonymization key: pass --key-file, set {KEY_FILE_ENV}, or set key_file in the config")
        })?;
        Ok(AnonymizerKey::from_file(path)?)
    }

    fn pipeline(&self, args: &PipelineArgs, key: AnonymizerKey) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::new(key);
        cfg.aggregator = self.aggregator(args.common.np)?;
        cfg.replay.mode = args.mode.or(self.mode).unwrap_or(Mode::InProcess).into();
        cfg.replay.target_pps = args.pps.or(self.pps);
        if let Some(p) = cfg.replay.target_pps {
            if !(p.is_finite() && p > 0.0) {
                bail!("--pps must be positive");
            }
        }
        if let Some(pad) = self.pad {
            cfg.replay.pad = pad;
        }
        if let Some(w) = args.workers.or(self.workers) {
            cfg.parser_workers = w;
        }
        cfg.socket_addr = args
            .socket_addr
            .or(self.socket_addr)
            .unwrap_or_else(|| DEFAULT_SOCKET_ADDR.parse().unwrap());
        cfg.matrix_out = args.common.out_matrix.clone().or_else(|| self.out_matrix.clone());
        cfg.report_out = args.out_report.clone().or_else(|| self.out_report.clone());
        Ok(cfg)
    }
}

/// Throwaway key for runs whose matrix is never written.
fn ephemeral_key() -> AnonymizerKey {
    let mut bytes = [0u8; 16];
    for half in bytes.chunks_mut(8) {
        let mut h = RandomState::new().build_hasher();
        h.write_u64(0);
        half.copy_from_slice(&h.finish().to_le_bytes());
    }
    AnonymizerKey::new(bytes)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let mut out = std::io::stdout().lock();
    match cli.cmd {
        Command::Parse { input, no_pad } => {
            let cap = CaptureFile::open(&input).with_context(|| format!("reading {}", input.display()))?;
            let pad = !no_pad && file.pad.unwrap_or(true);
            let (_, s) = parse_capture(&cap, pad);
            writeln!(out, "total\t{}", s.total)?;
            writeln!(out, "ipv4\t{}", s.ipv4)?;
            writeln!(out, "tcp\t{}", s.tcp)?;
            writeln!(out, "udp\t{}", s.udp)?;
            writeln!(out, "other_l4\t{}", s.other_l4)?;
            writeln!(out, "non_ip\t{}", s.non_ip)?;
            writeln!(out, "errored\t{}", s.errored)?;
        }
        Command::Run(args) => {
            let key = file.key(args.pipeline.common.key_file.as_deref())?;
            let mut cfg = file.pipeline(&args.pipeline, key)?;
            if let Some(l) = args.loops.or(file.loops) {
                cfg.replay.loop_count = l;
            }
            if args.no_pad {
                cfg.replay.pad = false;
            }
            let cap = match &args.input {
                Some(p) => CaptureFile::open(p).with_context(|| format!("reading {}", p.display()))?,
                None => synthesize_uniform(args.synth_count, args.synth_size, args.flows)?,
            };
            let r = run_pipeline(&cfg, &cap)?;
            writeln!(out, "packets\t{}", r.stats.total)?;
            writeln!(out, "ipv4\t{}", r.stats.ipv4)?;
            writeln!(out, "errored\t{}", r.stats.errored)?;
            writeln!(out, "summaries\t{}", r.summaries_emitted)?;
            writeln!(out, "matrix_entries\t{}", r.matrix.len())?;
            writeln!(out, "matrix_total\t{}", r.matrix.total())?;
            writeln!(out, "{}", r.report)?;
        }
        Command::Bench(args) => {
            let key = match args.pipeline.common.key_file.as_deref().or(file.key_file.as_deref()) {
                Some(p) => AnonymizerKey::from_file(p)?,
                None => ephemeral_key(),
            };
            let cfg = file.pipeline(&args.pipeline, key)?;
            let sizes = args.sizes.or_else(|| file.sizes.clone()).unwrap_or_else(|| DEFAULT_LADDER.to_vec());
            let count = args.count.or(file.count).unwrap_or(1_000_000);
            let report = bench_ladder(&sizes, count, &cfg)?;
            writeln!(out, "{report}")?;
        }
        Command::Export { input, common, no_pad } => {
            let key = file.key(common.key_file.as_deref())?;
            let cap = CaptureFile::open(&input).with_context(|| format!("reading {}", input.display()))?;
            let pad = !no_pad && file.pad.unwrap_or(true);
            let (_, matrix) = collect_offline(&cap, pad, &key);
            match common.out_matrix.or(file.out_matrix) {
                Some(p) => {
                    write_atomically(&p, |w| matrix.export_tsv(w).map(|_| ()))?;
                    eprintln!("{} rows, total {}", matrix.len(), matrix.total());
                }
                None => {
                    matrix.export_tsv(&mut out)?;
                }
            }
        }
        Command::SimulateDrop { np, pairs } => {
            let n = file.aggregator(np)?.n_p as u32;
            let m = simulate_slot_model(pairs, n)?;
            let (num, den) = m.displaced_ratio();
            writeln!(out, "n_p\t{n}")?;
            writeln!(out, "forwarded\t{}", m.forwarded)?;
            writeln!(out, "displaced\t{}", m.displaced)?;
            writeln!(out, "displaced_fraction\t{num}/{den}\t{:.9}", m.displaced_fraction())?;
            writeln!(out, "theoretical\t1/{}\t{:.9}", n + 1, theoretical_drop_rate(n)?)?;
        }
        Command::Synth {
            count,
            size,
            flows,
            snaplen,
            output,
        } => {
            let cap = match snaplen {
                Some(s) => synthesize_headers_only(count, size, flows, s)?,
                None => synthesize_uniform(count, size, flows)?,
            };
            cap.save(&output).with_context(|| format!("writing {}", output.display()))?;
        }
    }
    Ok(())
}
