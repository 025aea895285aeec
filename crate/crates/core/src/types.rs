use serde::{Deserialize, Serialize};

/// Index into a model vocabulary.
pub type TokenId = u32;

/// A labeled sentence pair (premise/hypothesis or sentence1/sentence2) in one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    /// Stable id; aligned across languages for translated test sets.
    pub index: u64,
    pub language: String,
    pub sentence_a: String,
    pub sentence_b: String,
    pub label: usize,
}

impl TaskExample {
    pub fn new(
        index: u64,
        language: impl Into<String>,
        sentence_a: impl Into<String>,
        sentence_b: impl Into<String>,
        label: usize,
    ) -> Self {
        Self {
            index,
            language: language.into(),
            sentence_a: sentence_a.into(),
            sentence_b: sentence_b.into(),
            label,
        }
    }
}
