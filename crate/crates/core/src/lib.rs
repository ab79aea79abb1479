//! Training, pruning, sparse inference and evaluation for small
//! encoder-decoder translation models.

pub mod analytics;
pub mod autodiff;
pub mod bleu;
pub mod error;
pub mod experiment;
pub mod model;
pub mod pruning;
pub mod sparse;
pub mod tokenizer;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use model::{ModelParams, TrainConfig, TransformerConfig};
pub use pruning::{PruningSchedule, SparsityMasks};
pub use sparse::CsrMatrix;
