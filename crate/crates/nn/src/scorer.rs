//! [`Scorer`] backed by a BERT checkpoint: the toy testbed model and real
//! pretrained encoders load through the same path.

use std::path::Path;

use candle_core::{DType, Tensor};
use salt_core::error::{Result, SaltError};
use salt_core::scorer::{PositionDistribution, Scorer};
use salt_core::tokenizer::{Tokenizer, WordPieceTokenizer};
use salt_core::types::TokenId;

use crate::bert::{attention_bias, ids_tensor, Bert, VOCAB_FILE};
use crate::rt;

/// Rows of the MLM head evaluated per matmul; bounds memory for large vocabularies.
const HEAD_CHUNK: usize = 256;
const BATCH: usize = 64;

pub struct MlmScorer {
    pub model: Bert,
    tokenizer: WordPieceTokenizer,
}

impl MlmScorer {
    pub fn new(model: Bert, tokenizer: WordPieceTokenizer) -> Result<Self> {
        if model.config.vocab_size != tokenizer.vocab_size() {
            return Err(SaltError::config(format!(
                "model vocabulary {} does not match tokenizer vocabulary {}",
                model.config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        Ok(Self { model, tokenizer })
    }

    /// Loads a checkpoint directory holding `config.json`, `vocab.txt` and
    /// `model.safetensors`. The MLM head must be present.
    pub fn load(dir: &Path, lowercase: bool, dtype: DType) -> Result<Self> {
        for f in [crate::bert::CONFIG_FILE, VOCAB_FILE, crate::bert::WEIGHTS_FILE] {
            let p = dir.join(f);
            if !p.exists() {
                return Err(SaltError::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "missing checkpoint file")));
            }
        }
        let tokenizer = WordPieceTokenizer::from_vocab_file(&dir.join(VOCAB_FILE), lowercase)?;
        let (model, missing) = Bert::load(dir, 0, dtype).map_err(|e| SaltError::data(format!("{}: {e}", dir.display())))?;
        let essential: Vec<&String> =
            missing.iter().filter(|n| n.starts_with("bert.") || n.starts_with("cls.")).collect();
        if !essential.is_empty() {
            return Err(SaltError::data(format!(
                "{}: checkpoint lacks {} tensors, e.g. {}",
                dir.display(),
                essential.len(),
                essential[0]
            )));
        }
        Self::new(model, tokenizer)
    }

    pub fn wordpiece(&self) -> &WordPieceTokenizer {
        &self.tokenizer
    }

    fn wrap(&self, ids: &[TokenId]) -> Vec<TokenId> {
        let sp = self.tokenizer.special_tokens();
        let mut v = Vec::with_capacity(ids.len() + 2);
        v.push(sp.cls);
        v.extend_from_slice(ids);
        v.push(sp.sep);
        v
    }

    fn score_chunk(&self, batch: &[&[TokenId]]) -> candle_core::Result<Vec<Vec<PositionDistribution>>> {
        let pad = self.tokenizer.special_tokens().pad;
        let lmax = batch.iter().map(|s| s.len() + 2).max().unwrap_or(2);
        let rows: Vec<Vec<TokenId>> = batch
            .iter()
            .map(|s| {
                let mut w = self.wrap(s);
                w.resize(lmax, pad);
                w
            })
            .collect();
        let lengths: Vec<usize> = batch.iter().map(|s| s.len() + 2).collect();
        let ids = ids_tensor(&rows)?;
        let dtype = self.model.params.dtype();
        let bias = attention_bias(&lengths, lmax, dtype)?;
        let hidden = self.model.encode(&self.model.lookup(&ids)?, &ids.zeros_like()?, &bias, None)?;
        let d = self.model.config.hidden_size;
        let flat = hidden.reshape((batch.len() * lmax, d))?;

        // (sequence, position) pairs that need a distribution.
        let mut wanted = Vec::new();
        for (b, s) in batch.iter().enumerate() {
            for (i, &id) in s.iter().enumerate() {
                if !self.tokenizer.is_special(id) {
                    wanted.push((b, i));
                }
            }
        }
        let mut out: Vec<Vec<PositionDistribution>> = vec![Vec::new(); batch.len()];
        for chunk in wanted.chunks(HEAD_CHUNK) {
            let idx: Vec<u32> = chunk.iter().map(|&(b, i)| (b * lmax + i + 1) as u32).collect();
            let idx = Tensor::from_vec(idx, chunk.len(), flat.device())?;
            let logits = self.model.mlm_logits(&flat.index_select(&idx, 0)?)?.to_dtype(DType::F64)?;
            for (&(b, i), row) in chunk.iter().zip(logits.to_vec2::<f64>()?) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut probs: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= z);
                out[b].push(PositionDistribution { position: i, probs });
            }
        }
        Ok(out)
    }
}

impl Scorer for MlmScorer {
    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn embedding_dim(&self) -> usize {
        self.model.config.hidden_size
    }

    fn max_sentence_len(&self) -> usize {
        self.model.config.max_position_embeddings - 2
    }

    fn score_positions(&self, token_ids: &[TokenId]) -> Result<Vec<PositionDistribution>> {
        Ok(self.score_batch(&[token_ids])?.remove(0))
    }

    fn score_batch(&self, batch: &[&[TokenId]]) -> Result<Vec<Vec<PositionDistribution>>> {
        for s in batch {
            self.check_scorable(s)?;
        }
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(BATCH) {
            out.extend(rt(self.score_chunk(chunk))?);
        }
        Ok(out)
    }

    fn embed_tokens(&self, token_ids: &[TokenId]) -> Result<Vec<Vec<f32>>> {
        if let Some(&bad) = token_ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(SaltError::input(format!("token id {bad} outside vocabulary")));
        }
        let run = || -> candle_core::Result<Vec<Vec<f32>>> {
            let idx = Tensor::from_vec(token_ids.to_vec(), token_ids.len(), &candle_core::Device::Cpu)?;
            self.model.word_embeddings()?.index_select(&idx, 0)?.to_dtype(DType::F32)?.to_vec2::<f32>()
        };
        rt(run())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bert::BertConfig;
    use salt_core::scorer::SpyScorer;

    pub(crate) fn tiny_scorer() -> MlmScorer {
        let mut vocab: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "the", "."].map(String::from).to_vec();
        vocab.extend((0..13).map(|i| format!("w{i}")));
        let tok = WordPieceTokenizer::new(vocab, true, "tiny").unwrap();
        let model = Bert::new(BertConfig::toy(20, 16, 2, 2, 32, 16), 1, DType::F32).unwrap();
        MlmScorer::new(model, tok).unwrap()
    }

    #[test]
    fn distributions_are_normalized_and_deterministic() {
        let s = tiny_scorer();
        let ids = [5, 7, 8, 6];
        let a = s.score_positions(&ids).unwrap();
        assert_eq!(a.len(), 4);
        for d in &a {
            assert_eq!(d.probs.len(), 20);
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert_eq!(a, s.score_positions(&ids).unwrap());
    }

    #[test]
    fn batching_agrees_with_single_scoring() {
        let s = tiny_scorer();
        let seqs: Vec<Vec<TokenId>> = vec![vec![5, 7], vec![5, 9, 10, 11, 6], vec![12]];
        let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
        let batched = s.score_batch(&refs).unwrap();
        for (seq, b) in seqs.iter().zip(&batched) {
            let single = s.score_positions(seq).unwrap();
            for (x, y) in single.iter().zip(b) {
                assert_eq!(x.position, y.position);
                for (p, q) in x.probs.iter().zip(&y.probs) {
                    assert!((p - q).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn input_errors_and_embeddings() {
        let s = tiny_scorer();
        assert!(matches!(s.score_positions(&[]), Err(SaltError::Input(_))));
        assert!(matches!(s.score_positions(&[7; 15]), Err(SaltError::Input(_))));
        assert!(s.score_positions(&[7; 14]).is_ok());
        let e = s.embed_tokens(&[7, 7, 8]).unwrap();
        assert_eq!(e[0], e[1]);
        assert_ne!(e[0], e[2]);
        assert_eq!(e[0].len(), s.embedding_dim());
        assert!(matches!(s.embed_tokens(&[99]), Err(SaltError::Input(_))));
    }

    #[test]
    fn spy_sees_unmasked_input() {
        let spy = SpyScorer::new(tiny_scorer());
        spy.score_batch(&[&[5, 7, 6], &[8]]).unwrap();
        assert_eq!(spy.recorded(), vec![vec![5, 7, 6], vec![8]]);
        assert_eq!(spy.mask_count(), 0);
    }
}
