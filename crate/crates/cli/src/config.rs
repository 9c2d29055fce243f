//! One configuration file serves every subcommand: a JSON object with a
//! section per concern. Every section is optional and falls back to the
//! desk-scale defaults baked into the library, so `{}` is a complete config
//! and so is no file at all.

use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use mtpv_core::backbone::ModelConfig;
use mtpv_core::corpus::CorpusSpec;
use mtpv_core::decode::{SamplerParams, VerifyParams};
use mtpv_core::harness::SweepConfig;
use mtpv_core::trainer::TrainConfig;
use mtpv_core::vocoder::StreamConfig;

use crate::Fail;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerParams,
    pub verify: VerifyParams,
    pub sweep: SweepConfig,
    pub corpus: CorpusSpec,
    pub vocoder: StreamConfig,
}

/// Load the config file, or the all-defaults config when none was given.
/// A config that cannot be read or parsed is a configuration error, not a
/// missing artifact: the user pointed the run at it explicitly.
pub fn load(path: Option<&Path>) -> Result<AppConfig> {
    let Some(path) = path else {
        return Ok(AppConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Fail::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: AppConfig = serde_json::from_str(&text)
        .map_err(|e| Fail::Config(format!("bad config {}: {e}", path.display())))?;
    Ok(cfg)
}
