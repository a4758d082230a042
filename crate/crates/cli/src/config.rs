//! Layered run configuration: command-line flags override a TOML file,
//! which overrides the built-in scale defaults.

use std::path::Path;

use anyhow::{Context, Result};
use hintvqa::pipeline::PipelineConfig;
use hintvqa::train::TrainConfig;
use hintvqa::{HintMode, ModelConfig};
use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: Option<usize>,
    pub hidden_units: Option<usize>,
    pub kernel_width: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub dropout_keep: Option<f64>,
    pub max_positions: Option<usize>,
    pub max_decode_len: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub hints: Option<HintMode>,
    pub visual: Option<bool>,
    pub max_len: Option<usize>,
    pub generative_repeat: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Takes the first value present.
macro_rules! layer {
    ($flag:expr, $file:expr, $default:expr) => {
        $flag.or($file).unwrap_or($default)
    };
}

#[derive(Debug, Default, Clone)]
pub struct ModelFlags {
    pub embed_dim: Option<usize>,
    pub hidden_units: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub dropout_keep: Option<f64>,
    pub max_decode_len: Option<usize>,
}

pub fn model_config(base: ModelConfig, flags: &ModelFlags, file: &ModelSection) -> ModelConfig {
    ModelConfig {
        embed_dim: layer!(flags.embed_dim, file.embed_dim, base.embed_dim),
        hidden_units: layer!(flags.hidden_units, file.hidden_units, base.hidden_units),
        kernel_width: file.kernel_width.unwrap_or(base.kernel_width),
        encoder_layers: layer!(
            flags.encoder_layers,
            file.encoder_layers,
            base.encoder_layers
        ),
        decoder_layers: layer!(
            flags.decoder_layers,
            file.decoder_layers,
            base.decoder_layers
        ),
        dropout_keep: layer!(flags.dropout_keep, file.dropout_keep, base.dropout_keep),
        max_positions: file.max_positions.unwrap_or(base.max_positions),
        max_decode_len: layer!(
            flags.max_decode_len,
            file.max_decode_len,
            base.max_decode_len
        ),
        ..base
    }
}

#[derive(Debug, Default, Clone)]
pub struct TrainFlags {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

pub fn train_config(base: TrainConfig, flags: &TrainFlags, file: &TrainSection) -> TrainConfig {
    TrainConfig {
        epochs: layer!(flags.epochs, file.epochs, base.epochs),
        learning_rate: layer!(flags.learning_rate, file.learning_rate, base.learning_rate),
        batch_size: layer!(flags.batch_size, file.batch_size, base.batch_size),
        checkpoint_every: flags
            .checkpoint_every
            .or(file.checkpoint_every)
            .or(base.checkpoint_every),
        ..base
    }
}

#[derive(Debug, Default, Clone)]
pub struct PipelineFlags {
    pub hints: Option<HintMode>,
    pub visual: Option<bool>,
    pub max_len: Option<usize>,
}

pub fn pipeline_config(
    base: PipelineConfig,
    flags: &PipelineFlags,
    file: &PipelineSection,
) -> PipelineConfig {
    PipelineConfig {
        hints: layer!(flags.hints, file.hints, base.hints),
        visual: layer!(flags.visual, file.visual, base.visual),
        max_len: layer!(flags.max_len, file.max_len, base.max_len),
        generative_repeat: file.generative_repeat.unwrap_or(base.generative_repeat),
    }
}
