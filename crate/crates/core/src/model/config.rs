use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyper-parameters of the convolutional encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_units: usize,
    pub kernel_width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout_keep: f64,
    pub max_positions: usize,
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub max_decode_len: usize,
}

impl ModelConfig {
    /// Full-size setting: 768-d embeddings (matching ViT patch features),
    /// 512 hidden units, width-3 kernels, 4+4 layers.
    pub fn reference(vocab: usize) -> Self {
        ModelConfig {
            embed_dim: 768,
            hidden_units: 512,
            kernel_width: 3,
            encoder_layers: 4,
            decoder_layers: 4,
            dropout_keep: 0.5,
            max_positions: 512,
            source_vocab: vocab,
            target_vocab: vocab,
            max_decode_len: 32,
        }
    }

    /// Small setting for CPU experiments.
    pub fn desk(vocab: usize) -> Self {
        ModelConfig {
            embed_dim: 32,
            hidden_units: 64,
            kernel_width: 3,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout_keep: 0.5,
            max_positions: 128,
            source_vocab: vocab,
            target_vocab: vocab,
            max_decode_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.kernel_width == 0 || self.kernel_width.is_multiple_of(2) {
            return fail(format!(
                "kernel_width must be odd, got {}",
                self.kernel_width
            ));
        }
        if self.hidden_units == 0 || !self.hidden_units.is_multiple_of(2) {
            return fail(format!(
                "hidden_units must be even and positive, got {}",
                self.hidden_units
            ));
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.max_decode_len == 0 {
            return fail("max_decode_len must be at least 1".into());
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        if self.source_vocab < crate::vocab::RESERVED.len()
            || self.target_vocab < crate::vocab::RESERVED.len()
        {
            return fail("vocabularies must include the reserved tokens".into());
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return fail(format!(
                "dropout_keep must be in (0, 1], got {}",
                self.dropout_keep
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::reference(1000).validate().unwrap();
        ModelConfig::desk(50).validate().unwrap();
        assert_eq!(ModelConfig::reference(10).embed_dim, 768);
        assert_eq!(ModelConfig::reference(10).hidden_units, 512);
    }

    #[test]
    fn rejects_even_kernel_and_odd_hidden() {
        let mut c = ModelConfig::desk(50);
        c.kernel_width = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(50);
        c.hidden_units = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(50);
        c.max_decode_len = 0;
        assert!(c.validate().is_err());
    }
}
