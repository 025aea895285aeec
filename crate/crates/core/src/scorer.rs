//! Uniform adapter over masked language models.
//!
//! A scorer returns a full-vocabulary probability distribution for every
//! position of an *unmasked* input sentence, and exposes the bare input
//! token-embedding table used by mixup.

use std::sync::Mutex;

use crate::error::{Result, SaltError};
use crate::tokenizer::Tokenizer;
use crate::types::TokenId;

/// Raw softmax over the full model vocabulary at one input position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDistribution {
    pub position: usize,
    pub probs: Vec<f64>,
}

impl PositionDistribution {
    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs.get(id as usize).copied().unwrap_or(0.0)
    }
}

pub trait Scorer: Send + Sync {
    fn tokenizer(&self) -> &dyn Tokenizer;

    fn vocab_size(&self) -> usize;

    fn embedding_dim(&self) -> usize;

    /// Longest sentence (excluding the `[CLS]`/`[SEP]` wrapper) that can be scored.
    fn max_sentence_len(&self) -> usize;

    /// One distribution per non-special position of `token_ids`. The sequence is
    /// scored exactly as given; no position is ever replaced by `[MASK]`.
    fn score_positions(&self, token_ids: &[TokenId]) -> Result<Vec<PositionDistribution>>;

    fn score_batch(&self, batch: &[&[TokenId]]) -> Result<Vec<Vec<PositionDistribution>>> {
        batch.iter().map(|ids| self.score_positions(ids)).collect()
    }

    /// Input token-embedding rows, before positional or segment terms.
    fn embed_tokens(&self, token_ids: &[TokenId]) -> Result<Vec<Vec<f32>>>;

    fn special_token_ids(&self) -> Vec<TokenId> {
        self.tokenizer().special_tokens().ids().to_vec()
    }

    /// Common precondition check for `score_positions` implementations.
    fn check_scorable(&self, token_ids: &[TokenId]) -> Result<()> {
        if token_ids.is_empty() {
            return Err(SaltError::input("cannot score an empty sequence"));
        }
        if token_ids.len() > self.max_sentence_len() {
            return Err(SaltError::input(format!(
                "sequence of {} tokens exceeds the maximum of {}",
                token_ids.len(),
                self.max_sentence_len()
            )));
        }
        let pad = self.tokenizer().special_tokens().pad;
        if token_ids.contains(&pad) {
            return Err(SaltError::input("padding inside a scored sequence"));
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(SaltError::input(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }
}

/// Wraps a scorer and records every sequence handed to it.
pub struct SpyScorer<S> {
    inner: S,
    seen: Mutex<Vec<Vec<TokenId>>>,
}

impl<S: Scorer> SpyScorer<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn recorded(&self) -> Vec<Vec<TokenId>> {
        self.seen.lock().expect("spy lock poisoned").clone()
    }

    pub fn calls(&self) -> usize {
        self.seen.lock().expect("spy lock poisoned").len()
    }

    /// Number of `[MASK]` tokens across all recorded sequences.
    pub fn mask_count(&self) -> usize {
        let mask = self.inner.tokenizer().special_tokens().mask;
        self.seen
            .lock()
            .expect("spy lock poisoned")
            .iter()
            .map(|s| s.iter().filter(|&&t| t == mask).count())
            .sum()
    }

    fn record(&self, ids: &[TokenId]) {
        self.seen.lock().expect("spy lock poisoned").push(ids.to_vec());
    }
}

impl<S: Scorer> Scorer for SpyScorer<S> {
    fn tokenizer(&self) -> &dyn Tokenizer {
        self.inner.tokenizer()
    }

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim()
    }

    fn max_sentence_len(&self) -> usize {
        self.inner.max_sentence_len()
    }

    fn score_positions(&self, token_ids: &[TokenId]) -> Result<Vec<PositionDistribution>> {
        self.record(token_ids);
        self.inner.score_positions(token_ids)
    }

    fn score_batch(&self, batch: &[&[TokenId]]) -> Result<Vec<Vec<PositionDistribution>>> {
        for ids in batch {
            self.record(ids);
        }
        self.inner.score_batch(batch)
    }

    fn embed_tokens(&self, token_ids: &[TokenId]) -> Result<Vec<Vec<f32>>> {
        self.inner.embed_tokens(token_ids)
    }
}

/// Context-free scorer driven by a fixed table: the distribution at a
/// position depends only on the token there. Used as a deterministic fixture.
pub struct TableScorer<T> {
    tokenizer: T,
    rows: Vec<Vec<f64>>,
    embeddings: Vec<Vec<f32>>,
    max_len: usize,
}

impl<T: Tokenizer> TableScorer<T> {
    /// `rows[id]` is the distribution emitted wherever `id` appears;
    /// `embeddings[id]` its embedding row.
    pub fn new(tokenizer: T, rows: Vec<Vec<f64>>, embeddings: Vec<Vec<f32>>, max_len: usize) -> Result<Self> {
        let v = tokenizer.vocab_size();
        if rows.len() != v || rows.iter().any(|r| r.len() != v) {
            return Err(SaltError::input("table rows must be vocab_size x vocab_size"));
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        if embeddings.len() != v || dim == 0 || embeddings.iter().any(|e| e.len() != dim) {
            return Err(SaltError::input("embedding table must be vocab_size x dim"));
        }
        Ok(Self {
            tokenizer,
            rows,
            embeddings,
            max_len,
        })
    }
}

impl<T: Tokenizer> Scorer for TableScorer<T> {
    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    fn embedding_dim(&self) -> usize {
        self.embeddings[0].len()
    }

    fn max_sentence_len(&self) -> usize {
        self.max_len
    }

    fn score_positions(&self, token_ids: &[TokenId]) -> Result<Vec<PositionDistribution>> {
        self.check_scorable(token_ids)?;
        Ok(token_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| !self.tokenizer.is_special(id))
            .map(|(position, &id)| PositionDistribution {
                position,
                probs: self.rows[id as usize].clone(),
            })
            .collect())
    }

    fn embed_tokens(&self, token_ids: &[TokenId]) -> Result<Vec<Vec<f32>>> {
        token_ids
            .iter()
            .map(|&id| {
                self.embeddings
                    .get(id as usize)
                    .cloned()
                    .ok_or_else(|| SaltError::input(format!("token id {id} outside vocabulary")))
            })
            .collect()
    }
}
