//! Earnings-report direction prediction: quarterly records are turned into
//! instruction examples, a small language model with a frozen 4-bit base and
//! low-rank adapters is fine-tuned on them, and predictions are scored.

pub mod adapters;
pub mod config;
pub mod error;
pub mod eval;
pub mod ingestion;
pub mod label;
pub mod pipeline;
pub mod quant;
pub mod synthetic;
pub mod textualize;
pub mod tinylm;

pub use error::{Error, Result};
pub use label::{Label, Prediction};
