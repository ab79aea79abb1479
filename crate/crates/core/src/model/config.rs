use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of an encoder-decoder transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub filter: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub shared_embeddings: bool,
}

impl TransformerConfig {
    /// 6 layers, width 512, 8 heads, feed-forward 2048.
    pub fn base() -> Self {
        TransformerConfig {
            layers: 6,
            hidden: 512,
            heads: 8,
            filter: 2048,
            max_len: 64,
            dropout: 0.1,
            label_smoothing: 0.1,
            shared_embeddings: true,
        }
    }

    /// 2 layers, width 128, 4 heads, feed-forward 512.
    pub fn tiny() -> Self {
        TransformerConfig {
            layers: 2,
            hidden: 128,
            heads: 4,
            filter: 512,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.filter == 0 {
            return Err(Error::Config("layers, hidden, heads and filter must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        for (name, rate) in [("dropout", self.dropout), ("label_smoothing", self.label_smoothing)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adafactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Padded tokens per batch side.
    pub batch_tokens: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_tokens: 2048,
            base_lr: 0.2,
            warmup_steps: 8000,
            total_steps: 100_000,
            seed: 1,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 || self.warmup_steps == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_tokens, warmup and total steps must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}
