//! Self-augmentation for zero-shot cross-lingual transfer.
//!
//! Offline code-switching distilled from a masked language model, online
//! per-dimension embedding mixup, zero-shot evaluation statistics, and a
//! deterministic synthetic-language testbed. Neural components live in
//! `salt-nn`; everything here is backend-agnostic.

pub mod codeswitch;
pub mod config;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod mixup;
pub mod scorer;
pub mod seed;
pub mod synth;
pub mod tokenizer;
pub mod types;
pub mod vocab;

pub use codeswitch::{AugmentationConfig, AugmentedExample, Augmenter, TokenSubstitution};
pub use config::RunConfig;
pub use error::{Result, SaltError};
pub use eval::{EvaluationReport, GeneralizedReport, TTestVariant};
pub use mixup::{MixupCoefficients, MixupConfig};
pub use scorer::{PositionDistribution, Scorer};
pub use tokenizer::{Tokenizer, WordPieceTokenizer};
pub use types::{TaskExample, TokenId};
pub use vocab::{VocabularySet, WordList};
