use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{Vocabulary, NUM_SPECIALS};

/// How the per-speaker channels are merged into one encoder memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    WeightedSum,
    Average,
    MaskedAverage,
    Concatenation,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::WeightedSum,
        Aggregation::Average,
        Aggregation::MaskedAverage,
        Aggregation::Concatenation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::WeightedSum => "weighted_sum",
            Aggregation::Average => "average",
            Aggregation::MaskedAverage => "masked_average",
            Aggregation::Concatenation => "concatenation",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown aggregation {s:?}; expected weighted_sum, average, masked_average or concatenation"))
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature dimension.
    pub feature_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Standard (word) tokens, excluding specials.
    pub num_words: usize,
    /// Speaker capacity.
    pub num_speakers: usize,
    /// Timestamp grid size over one window.
    pub num_timestamps: usize,
    pub window_s: f64,
    pub aggregation: Aggregation,
    /// Encoder frames per window; the input has twice as many.
    pub max_frames: usize,
    /// Decoder positions, including the prompt.
    pub max_tokens: usize,
    pub conv_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            model_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 256,
            num_words: 64,
            num_speakers: 8,
            num_timestamps: 151,
            window_s: 30.0,
            aggregation: Aggregation::Concatenation,
            max_frames: 150,
            max_tokens: 224,
            conv_width: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError(m));
        if self.feature_dim == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return fail(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("need at least one encoder and one decoder layer".into());
        }
        if self.num_words == 0 || self.num_speakers == 0 || self.num_timestamps < 2 {
            return fail("vocabulary sizes too small".into());
        }
        if !(self.window_s > 0.0) || self.max_frames == 0 {
            return fail("window and frame count must be positive".into());
        }
        if self.max_tokens < 4 {
            return fail("max_tokens must leave room for prompt, one token and EOS".into());
        }
        if self.conv_width % 2 == 0 {
            return fail(format!("conv_width {} must be odd", self.conv_width));
        }
        Ok(())
    }

    pub fn frame_duration_s(&self) -> f64 {
        self.window_s / self.max_frames as f64
    }

    pub fn input_frames(&self) -> usize {
        2 * self.max_frames
    }

    /// Size of the flat output distribution.
    pub fn output_size(&self) -> usize {
        self.num_words + self.num_speakers * self.num_timestamps + NUM_SPECIALS
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::synthetic(self.num_words, self.num_speakers, self.num_timestamps, self.window_s)
            .expect("validated config")
    }
}
