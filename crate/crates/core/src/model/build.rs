use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelParams, TransformerConfig};
use crate::autodiff::{Scalar, Tensor};
use crate::error::Result;
use crate::pruning::SparsityMasks;

pub const SHARED_EMBEDDING: &str = "embedding.shared";
pub const SOURCE_EMBEDDING: &str = "embedding.source";
pub const TARGET_EMBEDDING: &str = "embedding.target";
pub const OUTPUT_PROJECTION: &str = "output.projection";

pub(crate) const ATTENTION_PROJECTIONS: [&str; 4] = ["query", "key", "value", "output"];

/// Tensors laid out `[vocab, hidden]` (gathered by row, or multiplied
/// transposed for logits) rather than `[in, out]`.
pub fn is_vocab_matrix(name: &str) -> bool {
    name.starts_with("embedding.") || name.starts_with("output.")
}

/// Initializes every parameter of the model.
///
/// Weight matrices are Xavier-uniform, embeddings `N(0, hidden^-1/2)`,
/// biases zero, layer-norm gains one. The result depends only on the
/// config, vocabulary size, and seed.
pub fn build_model<T: Scalar>(
    config: &TransformerConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: ModelParams::new(),
    };
    let (d, f) = (config.hidden, config.filter);
    if config.shared_embeddings {
        init.embedding(SHARED_EMBEDDING, vocab_size, d)?;
    } else {
        init.embedding(SOURCE_EMBEDDING, vocab_size, d)?;
        init.embedding(TARGET_EMBEDDING, vocab_size, d)?;
        init.embedding(OUTPUT_PROJECTION, vocab_size, d)?;
    }
    for l in 0..config.layers {
        let p = format!("encoder.{l}");
        init.attention(&format!("{p}.self_attn"), d)?;
        init.norm(&format!("{p}.self_attn_norm"), d)?;
        init.feed_forward(&format!("{p}.ffn"), d, f)?;
        init.norm(&format!("{p}.ffn_norm"), d)?;
    }
    init.norm("encoder.final_norm", d)?;
    for l in 0..config.layers {
        let p = format!("decoder.{l}");
        init.attention(&format!("{p}.self_attn"), d)?;
        init.norm(&format!("{p}.self_attn_norm"), d)?;
        init.attention(&format!("{p}.cross_attn"), d)?;
        init.norm(&format!("{p}.cross_attn_norm"), d)?;
        init.feed_forward(&format!("{p}.ffn"), d, f)?;
        init.norm(&format!("{p}.ffn_norm"), d)?;
    }
    init.norm("decoder.final_norm", d)?;
    Ok(init.params)
}

struct Init<T: Scalar> {
    rng: ChaCha8Rng,
    params: ModelParams<T>,
}

impl<T: Scalar> Init<T> {
    fn embedding(&mut self, name: &str, vocab: usize, d: usize) -> Result<()> {
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("valid std");
        let data = (0..vocab * d)
            .map(|_| T::from_f64_lossy(normal.sample(&mut self.rng)))
            .collect();
        self.params.insert(name, Tensor::new(vec![vocab, d], data)?)
    }

    fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-limit..limit)))
            .collect();
        self.params.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<()> {
        for proj in ATTENTION_PROJECTIONS {
            self.xavier(&format!("{prefix}.{proj}"), d, d)?;
        }
        Ok(())
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, f: usize) -> Result<()> {
        self.xavier(&format!("{prefix}.inner"), d, f)?;
        self.params.insert(format!("{prefix}.inner_bias"), Tensor::zeros(&[f]))?;
        self.xavier(&format!("{prefix}.outer"), f, d)?;
        self.params.insert(format!("{prefix}.outer_bias"), Tensor::zeros(&[d]))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.params.insert(format!("{prefix}.gain"), Tensor::full(&[d], T::one()))?;
        self.params.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))
    }
}

/// Parameter totals split by role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub attention: usize,
    pub feed_forward: usize,
    pub embedding: usize,
    pub other: usize,
}

/// Counts parameters; with masks, masked-out weights are not counted.
pub fn count_params<T: Scalar>(params: &ModelParams<T>, masks: Option<&SparsityMasks>) -> ParamCounts {
    let mut c = ParamCounts::default();
    for (name, t) in params.iter() {
        let n = masks
            .and_then(|m| m.get(name))
            .map_or(t.len(), |m| m.kept());
        c.total += n;
        let group = if is_vocab_matrix(name) {
            &mut c.embedding
        } else if name.contains("_attn.") {
            &mut c.attention
        } else if name.contains(".ffn.") {
            &mut c.feed_forward
        } else {
            &mut c.other
        };
        *group += n;
    }
    c
}

/// Closed-form parameter count for a configuration, matching
/// [`build_model`] tensor for tensor.
pub fn expected_param_count(config: &TransformerConfig, vocab_size: usize) -> ParamCounts {
    let (l, d, f, v) = (config.layers, config.hidden, config.filter, vocab_size);
    let attention_block = 4 * d * d;
    let ffn_block = 2 * d * f + f + d;
    let norm = 2 * d;
    let embedding = if config.shared_embeddings { v * d } else { 3 * v * d };
    let attention = l * attention_block + l * 2 * attention_block;
    let feed_forward = 2 * l * ffn_block;
    let other = l * 2 * norm + l * 3 * norm + 2 * norm;
    ParamCounts {
        total: embedding + attention + feed_forward + other,
        attention,
        feed_forward,
        embedding,
        other,
    }
}
