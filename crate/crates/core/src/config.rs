use alloc::format;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

/// Training and architecture settings.
///
/// The defaults are the desk-scale test configuration; [`TrainConfig::full_size`]
/// gives the full-size hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub image_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Text decoder layers.
    pub text_decoder_layers: usize,
    /// Image decoder layers.
    pub image_decoder_layers: usize,
    pub seed: u64,

    pub d_model: usize,
    pub heads: usize,
    pub text_encoder_layers: usize,
    pub ffn_mult: usize,
    pub patch_size: usize,
    pub n_queries: usize,
    pub max_text_tokens: usize,
    pub max_target_tokens: usize,
    /// Minimum confidence for a box to be emitted at inference.
    pub conf_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            adam_eps: 1e-8,
            image_size: 64,
            alpha: 0.2,
            beta: 1e-3,
            gamma: 0.1,
            text_decoder_layers: 2,
            image_decoder_layers: 2,
            seed: 0,
            d_model: 64,
            heads: 4,
            text_encoder_layers: 2,
            ffn_mult: 2,
            patch_size: 8,
            n_queries: 16,
            max_text_tokens: 256,
            max_target_tokens: 48,
            conf_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    /// Full-size hyperparameters.
    pub fn full_size() -> Self {
        Self {
            learning_rate: 5e-5,
            image_size: 600,
            text_decoder_layers: 12,
            image_decoder_layers: 6,
            d_model: 768,
            heads: 12,
            text_encoder_layers: 12,
            ffn_mult: 4,
            patch_size: 20,
            n_queries: 900,
            max_text_tokens: 512,
            ..Self::default()
        }
    }

    /// Tiny model used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            heads: 2,
            text_encoder_layers: 1,
            text_decoder_layers: 2,
            image_decoder_layers: 2,
            ffn_mult: 2,
            image_size: 16,
            patch_size: 8,
            n_queries: 4,
            max_text_tokens: 32,
            max_target_tokens: 16,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("image_size", self.image_size),
            ("text_decoder_layers", self.text_decoder_layers),
            ("image_decoder_layers", self.image_decoder_layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("text_encoder_layers", self.text_encoder_layers),
            ("ffn_mult", self.ffn_mult),
            ("patch_size", self.patch_size),
            ("n_queries", self.n_queries),
            ("max_text_tokens", self.max_text_tokens),
            ("max_target_tokens", self.max_target_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config("heads must divide d_model".into()));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even".into()));
        }
        if !self.patch_size.is_multiple_of(2) || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config("patch_size must be even and divide image_size".into()));
        }
        if self.n_queries > self.n_patches() {
            return Err(Error::Config(format!(
                "n_queries ({}) exceeds patch count ({})",
                self.n_queries,
                self.n_patches()
            )));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Config("conf_threshold must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::tiny().validate().unwrap();
        TrainConfig::full_size().validate().unwrap();
    }

    #[test]
    fn full_size_values() {
        let p = TrainConfig::full_size();
        assert_eq!((p.epochs, p.batch_size, p.image_size), (10, 4, 600));
        assert_eq!((p.learning_rate, p.adam_eps), (5e-5, 1e-8));
        assert_eq!((p.alpha, p.beta, p.gamma), (0.2, 1e-3, 0.1));
        assert_eq!((p.text_decoder_layers, p.image_decoder_layers), (12, 6));
    }

    #[test]
    fn rejects_bad() {
        let c = TrainConfig { heads: 3, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { n_queries: 65, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }
}
