//! A small decoder-only language model trained from scratch: tokenizer,
//! transformer, adapter fine-tuning, greedy generation, checkpoints.

pub mod checkpoint;
pub mod generate;
pub mod model;
pub mod tokenizer;
pub mod train;

pub use generate::{generate, map_output_to_label, predict_example};
pub use model::{loss_masked, LoraConfig, ModelConfig, TinyLm};
pub use tokenizer::{build_vocab, Tokenizer};
pub use train::{lr_at_step, train, LossCurve, TrainConfig};
