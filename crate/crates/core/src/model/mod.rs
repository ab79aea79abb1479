//! Encoder-decoder transformer: configuration, parameters, forward pass,
//! training, decoding and checkpoints.

mod build;
pub mod checkpoint;
mod config;
mod decode;
mod forward;
mod params;
mod train;

pub use build::{
    build_model, count_params, expected_param_count, is_vocab_matrix, ParamCounts,
    OUTPUT_PROJECTION, SHARED_EMBEDDING, SOURCE_EMBEDDING, TARGET_EMBEDDING,
};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{OptimizerKind, TrainConfig, TransformerConfig};
pub use decode::{decode_beam, decode_greedy, vocab_size, DEFAULT_BEAM};
pub(crate) use decode::greedy_with;
pub use forward::{
    positional_encoding, sparse_weights, Batch, Bound, SeqBatch, Transformer, Weight, BOS, EOS,
    PAD,
};
pub use params::{is_prunable, ModelParams};
pub use train::{batch_by_tokens, noam_lr, smoothed_entropy_floor, Optimizer, Trainer};

#[cfg(test)]
mod tests;
