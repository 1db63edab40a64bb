//! Training configuration, named presets, and the flat `key=value` file
//! format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::{CorrelationSamples, DEFAULT_ALPHA};
use crate::error::{Error, Result};

/// How the caption negative log-likelihood is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionNorm {
    /// Divide by the number of real target tokens in the batch.
    #[default]
    PerToken,
    /// Sum over each sequence, average over the batch.
    PerSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d_model: usize,
    pub word_dim: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub max_len: usize,
    /// Two-layer head before the correlation.
    pub mlp: bool,
    /// Include the decorrelation loss.
    pub dirl: bool,
    /// Include the contrastive loss.
    pub ccr: bool,
    /// Bypass cross-attention: difference = image − opposite image.
    pub subtraction: bool,
    pub tied_attention: bool,
    pub correlation: CorrelationSamples,
    pub alpha: f64,
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub tau: f64,
    /// Cosine instead of raw dot-product similarities in the contrastive loss.
    pub cosine_similarity: bool,
    pub caption_norm: CaptionNorm,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_iters: u64,
    pub seed: u64,
    pub dropout: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Write a checkpoint every this many iterations; 0 only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            word_dim: 300,
            heads: 8,
            decoder_layers: 2,
            max_len: 12,
            mlp: true,
            dirl: true,
            ccr: true,
            subtraction: false,
            tied_attention: true,
            correlation: CorrelationSamples::Flattened,
            alpha: DEFAULT_ALPHA,
            lambda_d: 0.5,
            lambda_c: 0.3,
            tau: 0.5,
            cosine_similarity: false,
            caption_norm: CaptionNorm::PerToken,
            batch_size: 128,
            learning_rate: 2e-4,
            max_iters: 10_000,
            seed: 0,
            dropout: 0.0,
            clip_norm: 0.0,
            checkpoint_every: 0,
        }
    }
}

pub const PRESETS: [&str; 5] = ["clevr-change", "clevr-dc", "spot", "ier", "synthetic"];

impl TrainConfig {
    /// Per-dataset defaults. The four real-dataset bundles keep the full
    /// model size; `synthetic` is sized for minute-scale CPU training.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "clevr-change" => base,
            "clevr-dc" => Self {
                lambda_d: 0.03,
                lambda_c: 0.05,
                ..base
            },
            "spot" => Self {
                batch_size: 64,
                learning_rate: 1e-4,
                lambda_d: 0.5,
                lambda_c: 0.004,
                ..base
            },
            "ier" => Self {
                batch_size: 16,
                learning_rate: 1e-4,
                lambda_d: 0.001,
                lambda_c: 0.05,
                ..base
            },
            "synthetic" => Self {
                d_model: 32,
                word_dim: 32,
                heads: 8,
                batch_size: 32,
                learning_rate: 1e-3,
                lambda_d: 0.03,
                lambda_c: 0.05,
                max_iters: 1500,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [("learning_rate", self.learning_rate), ("tau", self.tau)];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let weights = [
            ("alpha", self.alpha),
            ("lambda_d", self.lambda_d),
            ("lambda_c", self.lambda_c),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field from its textual value. `preset=<name>` replaces every
    /// field with that preset's values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        if key == "preset" {
            *self = Self::preset(value)?;
            return Ok(());
        }
        let mut fields = match serde_json::to_value(&*self).expect("config serializes") {
            Value::Object(map) => map,
            _ => unreachable!("config is a struct"),
        };
        let slot = fields
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(Value::Object(fields))
            .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` lines in order; blank lines and `#` comments are
    /// ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Renders every field as `key=value`, readable by [`Self::apply_text`].
    pub fn to_text(&self) -> String {
        let Value::Object(fields) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config is a struct")
        };
        fields
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}={s}\n"),
                other => format!("{k}={other}\n"),
            })
            .collect()
    }
}
