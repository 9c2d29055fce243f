//! `mtpv`: generate a synthetic token corpus, train the backbone and its
//! draft cascade, run accelerated decoding, and poke at every artifact the
//! pipeline produces.
//!
//! Exit codes: 0 success, 2 unusable configuration, 3 missing input
//! artifact, 4 trace audit found an invariant violation. Anything else
//! exits 1.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failures that already know their process exit code. Everything the
/// classifier cannot attribute stays a generic failure.
#[derive(Debug)]
pub enum Fail {
    Config(String),
    Missing(String),
    /// Count of audit violations; the lines themselves are printed before
    /// the error propagates.
    Audit(usize),
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fail::Config(msg) => write!(f, "{msg}"),
            Fail::Missing(msg) => write!(f, "{msg}"),
            Fail::Audit(n) => write!(f, "trace audit found {n} violation(s)"),
        }
    }
}

impl std::error::Error for Fail {}

#[derive(Parser)]
#[command(name = "mtpv", version, about = "Speculative decoding with cascaded draft heads: data, training, decoding, and reports")]
struct Cli {
    /// JSON config with sections model, train, sampler, verify, sweep,
    /// corpus, vocoder. Omitted sections use built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic Markov corpus and write the train/held-out split.
    GenData(GenDataArgs),
    /// Pretrain the backbone on a generated corpus with next-token loss.
    PretrainBackbone(PretrainArgs),
    /// Train the draft cascade against a frozen pretrained backbone.
    TrainMtp(TrainMtpArgs),
    /// Run one accelerated (or vanilla) generation from a checkpoint.
    Decode(DecodeArgs),
    /// Sweep the verification threshold and report ratios per point.
    Sweep(SweepArgs),
    /// Run the verification ablation variants on shared prompts.
    Ablate(AblateArgs),
    /// Stream tokens through the vocoder head and compare against offline synthesis.
    VocoderCheck(VocoderArgs),
    /// Replay a decode trace and check the event-order invariants.
    TraceAudit(TraceAuditArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory for train.txt, held_out.txt, and spec.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_sequences: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Corpus directory produced by gen-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Where to write the backbone checkpoint.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_lr: Option<f64>,
    /// Optional training CSV (step,lr,loss_total,...,wall_ms).
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainMtpArgs {
    /// Corpus directory produced by gen-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Backbone checkpoint to build on; its weights stay frozen.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Where to write the combined backbone+cascade checkpoint.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Cascade depth; defaults to the checkpoint's module count.
    #[arg(long)]
    modules: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Checkpoint with backbone and (unless --vanilla) cascade weights.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Prompt as space-separated token ids, e.g. --prompt "3 17 4".
    #[arg(long, value_name = "IDS")]
    prompt: Option<String>,
    /// Corpus directory to draw a held-out prompt from instead of --prompt.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Which held-out sequence to take the prompt prefix from.
    #[arg(long, default_value_t = 0)]
    prompt_index: usize,
    #[arg(long, default_value_t = 4)]
    prompt_len: usize,
    /// Total length cap, prompt included.
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Decode with the backbone alone (no speculation).
    #[arg(long)]
    vanilla: bool,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    topk_v: Option<usize>,
    #[arg(long)]
    eos_topk_v: Option<usize>,
    /// Write the event trace here (one step,kind,token,module line per event).
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Write the run metrics as JSON here (feed to trace-audit --metrics).
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Report CSV, one row per threshold.
    #[arg(long, value_name = "FILE", default_value = "sweep.csv")]
    out_csv: PathBuf,
    /// Optional full JSON report (config snapshot, rows, digest).
    #[arg(long, value_name = "FILE")]
    out_json: Option<PathBuf>,
    /// Override the threshold set, e.g. --topk-set 1,2,4,8.
    #[arg(long, value_delimiter = ',', value_name = "K,K,...")]
    topk_set: Option<Vec<usize>>,
    #[arg(long)]
    n_prompts: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "FILE", default_value = "ablation.csv")]
    out_csv: PathBuf,
    #[arg(long, value_name = "FILE")]
    out_json: Option<PathBuf>,
    #[arg(long)]
    topk_v: Option<usize>,
    #[arg(long)]
    eos_topk_v: Option<usize>,
    #[arg(long)]
    n_prompts: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VocoderArgs {
    /// Output waveform (32-bit float PCM WAV, mono).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Tokens to synthesize, space-separated; default is a seeded draw.
    #[arg(long, value_name = "IDS")]
    tokens: Option<String>,
    /// Number of tokens when drawing randomly.
    #[arg(long, default_value_t = 48)]
    len: usize,
    /// Seed for both the weight init and the random token draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also dump frame,bin,magnitude,phase rows for the offline pass.
    #[arg(long, value_name = "FILE")]
    spectral_csv: Option<PathBuf>,
}

#[derive(Args)]
struct TraceAuditArgs {
    /// Trace file written by decode --trace.
    trace: PathBuf,
    /// Metrics JSON written by decode --report; cross-checked when given.
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Fail>() {
            return match f {
                Fail::Config(_) => 2,
                Fail::Missing(_) => 3,
                Fail::Audit(_) => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<mtpv_core::Error>() {
            return match e {
                mtpv_core::Error::Config(_) | mtpv_core::Error::Param(_) | mtpv_core::Error::Input(_) => 2,
                mtpv_core::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
                _ => 1,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::load(cli.config.as_deref()).and_then(|cfg| match &cli.command {
        Command::GenData(args) => commands::gen_data(&cfg, args),
        Command::PretrainBackbone(args) => commands::pretrain_backbone(&cfg, args),
        Command::TrainMtp(args) => commands::train_mtp(&cfg, args),
        Command::Decode(args) => commands::decode(&cfg, args),
        Command::Sweep(args) => commands::sweep(&cfg, args),
        Command::Ablate(args) => commands::ablate(&cfg, args),
        Command::VocoderCheck(args) => commands::vocoder_check(&cfg, args),
        Command::TraceAudit(args) => commands::trace_audit(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
