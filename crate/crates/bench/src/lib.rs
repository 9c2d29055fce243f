//! Shared fixtures for the benchmark suite: desk-scale models with fixed
//! seeds so every run measures the same weights.

use mtpv_core::backbone::{Backbone, ModelConfig};
use mtpv_core::mtp::MtpCascade;
use mtpv_core::vocoder::{StreamConfig, Vocoder};

/// Desk-default backbone plus a two-module cascade. Weights are freshly
/// initialized; the benchmarks measure machinery, not model quality.
pub fn bench_model() -> (Backbone, MtpCascade) {
    let config = ModelConfig::default();
    let cascade = MtpCascade::init(
        config.dim,
        config.ffn_dim,
        config.n_heads,
        config.n_mtp_modules,
        2024,
    );
    let backbone = Backbone::init(config, 2023).expect("default config is valid");
    (backbone, cascade)
}

/// A short prompt inside the default vocabulary.
pub fn bench_prompt() -> Vec<u32> {
    vec![3, 17, 4, 9]
}

pub fn bench_vocoder() -> Vocoder {
    Vocoder::init(StreamConfig::default(), 2025).expect("default stream config is valid")
}
