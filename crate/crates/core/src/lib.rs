//! Desk-scale engine for draft-and-verify token generation.
//!
//! A small decoder-only backbone generates tokens autoregressively while a
//! cascade of lightweight draft heads proposes the next few tokens ahead of
//! it. Each backbone forward pass then verifies the pending proposals by
//! top-k membership in its own distribution, keeping verified tokens for free
//! and rolling back the rest. The crate also carries the trainer that fits
//! the draft heads against offset targets, a streaming spectrogram-to-audio
//! decoder head, and the corpus/report plumbing used by the CLI harness.
//!
//! Everything is deterministic: seeded counter-based RNG, fixed-order float
//! accumulation, and no threads. Two runs with the same config and seed
//! produce bit-identical checkpoints, traces, and reports.

pub mod backbone;
pub mod block;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod harness;
pub mod mtp;
pub mod nn;
pub mod trainer;
pub mod vocoder;

pub use backbone::{Backbone, KvCache, ModelConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use corpus::{gen_corpus, quality_proxy, Corpus, CorpusSpec};
pub use decode::{
    generate, generate_vanilla, DecodeMetrics, DecodeOutput, SamplerParams, TraceEvent, TraceKind,
    VerifyParams,
};
pub use error::{Error, Result};
pub use harness::{run_ablation, run_sweep, AblationRow, RunReport, SweepPoint};
pub use mtp::{CascadeState, HiddenStates, MtpCascade, MtpModule};
pub use nn::{Matrix, RngStream};
pub use trainer::{mtp_loss, pretrain_backbone, train_mtp, TrainConfig, TrainLogRow};
pub use vocoder::{StreamConfig, StreamState, Vocoder};
