//! Candle-backed neural components: a BERT encoder with MLM head, the
//! [`salt_core::Scorer`] implementation over it, MLM pretraining, the
//! sentence-pair classifier with in-graph embedding mixup, training,
//! evaluation and the synthetic-testbed recipe.

pub mod bert;
pub mod mlm;
pub mod params;
pub mod scorer;
pub mod classifier;
pub mod trainer;
pub mod evaluate;
pub mod gold;
pub mod testbed;

pub use candle_core::DType;
use salt_core::error::{Result, SaltError};

/// Maps tensor-library failures onto runtime errors.
pub(crate) fn rt<T>(r: candle_core::Result<T>) -> Result<T> {
    r.map_err(|e| SaltError::runtime(e.to_string()))
}
