//! Sentence-pair classifier: encoder, tanh pooler over `[CLS]`, linear head.
//! Inputs may be plain token ids or a per-dimension mix of two id sequences.

use std::path::Path;

use candle_core::{DType, Result as CResult, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use salt_core::error::{Result, SaltError};
use salt_core::jsonl;
use salt_core::seed::{derive_seed, str_key};
use salt_core::tokenizer::{Tokenizer, WordPieceTokenizer};
use salt_core::types::{TaskExample, TokenId};
use serde::{Deserialize, Serialize};

use crate::bert::{attention_bias, ids_tensor, linear, Bert, Dropout, VOCAB_FILE};
use crate::mlm::encode_pair;
use crate::rt;

pub const META_FILE: &str = "checkpoint.json";
const PREDICT_BATCH: usize = 128;

/// Provenance stored next to the weights of a fine-tuned classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub tokenizer: String,
    pub num_labels: usize,
    pub max_seq_len: usize,
    pub lowercase: bool,
    pub source_language: String,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
}

/// One encoded `[CLS] a [SEP] b [SEP]` sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIds {
    pub ids: Vec<TokenId>,
    pub types: Vec<u32>,
}

impl PairIds {
    pub fn encode(tokenizer: &dyn Tokenizer, a: &[TokenId], b: &[TokenId], max_len: usize) -> Self {
        let (ids, types) = encode_pair(tokenizer, a, Some(b), max_len);
        Self { ids, types }
    }

    pub fn from_text(tokenizer: &dyn Tokenizer, ex: &TaskExample, max_len: usize) -> Self {
        let a = tokenizer.encode(&ex.sentence_a).ids;
        let b = tokenizer.encode(&ex.sentence_b).ids;
        Self::encode(tokenizer, &a, &b, max_len)
    }
}

/// A padded batch. `mix` holds the second id sequence and the effective
/// coefficients `[b, l, d]` (exactly 1 wherever the two sequences agree).
pub struct PairBatch {
    pub ids: Tensor,
    pub types: Tensor,
    pub bias: Tensor,
    pub mix: Option<(Tensor, Tensor)>,
}

impl PairBatch {
    pub fn plain(rows: &[&PairIds], pad: TokenId, dtype: DType) -> CResult<Self> {
        let lmax = rows.iter().map(|r| r.ids.len()).max().unwrap_or(1);
        let ids: Vec<Vec<u32>> = rows.iter().map(|r| padded(&r.ids, lmax, pad)).collect();
        let types: Vec<Vec<u32>> = rows.iter().map(|r| padded(&r.types, lmax, 0)).collect();
        let lengths: Vec<usize> = rows.iter().map(|r| r.ids.len()).collect();
        Ok(Self {
            ids: ids_tensor(&ids)?,
            types: ids_tensor(&types)?,
            bias: attention_bias(&lengths, lmax, dtype)?,
            mix: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.ids.dim(1).unwrap_or(0)
    }
}

pub fn padded(v: &[u32], len: usize, pad: u32) -> Vec<u32> {
    let mut out = v.to_vec();
    out.resize(len, pad);
    out
}

pub struct PairClassifier {
    pub bert: Bert,
    pub num_labels: usize,
}

impl PairClassifier {
    /// Adds a freshly initialised pooler and head (seeded) unless present.
    pub fn from_bert(mut bert: Bert, num_labels: usize, seed: u64) -> Result<Self> {
        let d = bert.config.hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, str_key("classifier-head")]));
        let p = &mut bert.params;
        let mut run = |p: &mut crate::params::ParamStore| -> CResult<()> {
            if !p.contains("bert.pooler.dense.weight") {
                p.init_normal("bert.pooler.dense.weight", &[d, d], 0.02, &mut rng)?;
                p.init_const("bert.pooler.dense.bias", &[d], 0.0)?;
            }
            if !p.contains("classifier.weight") {
                p.init_normal("classifier.weight", &[num_labels, d], 0.02, &mut rng)?;
                p.init_const("classifier.bias", &[num_labels], 0.0)?;
            }
            Ok(())
        };
        rt(run(p))?;
        let head = rt(bert.params.get("classifier.weight").and_then(|t| t.dim(0)))?;
        if head != num_labels {
            return Err(SaltError::config(format!("checkpoint head has {head} labels, expected {num_labels}")));
        }
        Ok(Self { bert, num_labels })
    }

    /// Encoder-plus-MLM checkpoint to classifier; head initialised from `seed`.
    pub fn from_pretrained(dir: &Path, num_labels: usize, seed: u64, dtype: DType) -> Result<Self> {
        let (bert, _) = Bert::load(dir, derive_seed(&[seed, str_key("encoder-fill")]), dtype)
            .map_err(|e| SaltError::data(format!("{}: {e}", dir.display())))?;
        Self::from_bert(bert, num_labels, seed)
    }

    pub fn embeddings(&self, batch: &PairBatch) -> CResult<Tensor> {
        let plain = self.bert.lookup(&batch.ids)?;
        match &batch.mix {
            None => Ok(plain),
            Some((other, r)) => {
                let switched = self.bert.lookup(other)?;
                plain.mul(r)?.add(&switched.mul(&r.affine(-1.0, 1.0)?)?)
            }
        }
    }

    /// Class logits from token embeddings `[b, l, d]`.
    pub fn logits_from_embeddings(
        &self,
        token_embeddings: &Tensor,
        batch: &PairBatch,
        mut dropout: Option<&mut Dropout>,
    ) -> CResult<Tensor> {
        let h = self.bert.encode(token_embeddings, &batch.types, &batch.bias, dropout.as_deref_mut())?;
        let cls = h.narrow(1, 0, 1)?.squeeze(1)?;
        let p = &self.bert.params;
        let pooled = linear(&cls, p.get("bert.pooler.dense.weight")?, Some(p.get("bert.pooler.dense.bias")?))?.tanh()?;
        let pooled = match dropout {
            Some(d) => d.apply(&pooled)?,
            None => pooled,
        };
        linear(&pooled, p.get("classifier.weight")?, Some(p.get("classifier.bias")?))
    }

    pub fn logits(&self, batch: &PairBatch, dropout: Option<&mut Dropout>) -> CResult<Tensor> {
        self.logits_from_embeddings(&self.embeddings(batch)?, batch, dropout)
    }

    /// Argmax predictions in fixed-size chunks taken in input order, so the
    /// same examples in the same order always see identical batches.
    pub fn predict(&self, tokenizer: &dyn Tokenizer, examples: &[TaskExample], max_len: usize) -> Result<Vec<usize>> {
        let encoded: Vec<PairIds> = examples.iter().map(|e| PairIds::from_text(tokenizer, e, max_len)).collect();
        self.predict_encoded(&encoded, tokenizer.special_tokens().pad)
    }

    pub fn predict_encoded(&self, encoded: &[PairIds], pad: TokenId) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(encoded.len());
        for chunk in encoded.chunks(PREDICT_BATCH) {
            let rows: Vec<&PairIds> = chunk.iter().collect();
            let run = || -> CResult<Vec<u32>> {
                let batch = PairBatch::plain(&rows, pad, self.bert.params.dtype())?;
                self.logits(&batch, None)?.argmax(1)?.to_vec1::<u32>()
            };
            out.extend(rt(run())?.into_iter().map(|x| x as usize));
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, tokenizer: &WordPieceTokenizer, meta: &CheckpointMeta) -> Result<()> {
        rt(self.bert.save(dir, tokenizer.tokens()))?;
        jsonl::write_json(&dir.join(META_FILE), meta)
    }
}

/// A fine-tuned classifier loaded from disk together with its tokenizer.
pub struct Classifier {
    pub model: PairClassifier,
    pub tokenizer: WordPieceTokenizer,
    pub meta: CheckpointMeta,
}

impl Classifier {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(SaltError::io(
                &meta_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "not a classifier checkpoint"),
            ));
        }
        let meta: CheckpointMeta = jsonl::read_json(&meta_path)?;
        let tokenizer = WordPieceTokenizer::from_vocab_file(&dir.join(VOCAB_FILE), meta.lowercase)?;
        let (bert, missing) = Bert::load(dir, 0, DType::F32).map_err(|e| SaltError::data(format!("{}: {e}", dir.display())))?;
        if let Some(m) = missing.iter().find(|m| !m.starts_with("cls.")) {
            return Err(SaltError::data(format!("{}: checkpoint lacks tensor {m}", dir.display())));
        }
        let model = PairClassifier::from_bert(bert, meta.num_labels, meta.seed)?;
        Ok(Self { model, tokenizer, meta })
    }

    pub fn predict(&self, examples: &[TaskExample]) -> Result<Vec<usize>> {
        self.model.predict(&self.tokenizer, examples, self.meta.max_seq_len)
    }
}
