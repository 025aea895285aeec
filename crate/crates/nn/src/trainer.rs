//! Fine-tuning on originals plus their code-switched copies, with embedding
//! mixup applied inside the training graph.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use salt_core::codeswitch::AugmentedExample;
use salt_core::config::{config_hash, RunConfig};
use salt_core::error::{Result, SaltError};
use salt_core::eval::accuracy;
use salt_core::jsonl;
use salt_core::mixup::{instance_coefficients, MixupConfig};
use salt_core::seed::{derive_seed, str_key};
use salt_core::tokenizer::{Tokenizer, WordPieceTokenizer};
use salt_core::types::{TaskExample, TokenId};
use serde::{Deserialize, Serialize};

use crate::bert::{cross_entropy, ids_tensor, Dropout};
use crate::classifier::{padded, CheckpointMeta, PairBatch, PairClassifier, PairIds};
use crate::mlm::learning_rate_at;
use crate::rt;

pub const LOG_FILE: &str = "train_log.jsonl";

/// One element of the training stream. Augmented instances carry the code-switched
/// sequence next to the original one for mixup.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub source_index: u64,
    /// `None` for an unaugmented original.
    pub language: Option<String>,
    pub original: PairIds,
    pub switched: Option<PairIds>,
    pub label: usize,
}

impl TrainingInstance {
    pub fn is_augmented(&self) -> bool {
        self.switched.is_some()
    }
}

/// Each original followed by its augmented copies (in the order given), as a
/// fixed list; [`epoch_order`] supplies the per-epoch shuffle.
pub fn build_training_stream(
    originals: &[TaskExample],
    augmented: &[AugmentedExample],
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<Vec<TrainingInstance>> {
    let mut by_source: BTreeMap<u64, Vec<&AugmentedExample>> = BTreeMap::new();
    for a in augmented {
        by_source.entry(a.source_index).or_default().push(a);
    }
    let mut stream = Vec::with_capacity(originals.len() + augmented.len());
    for ex in originals {
        let a = tokenizer.encode(&ex.sentence_a).ids;
        let b = tokenizer.encode(&ex.sentence_b).ids;
        let original = PairIds::encode(tokenizer, &a, &b, max_len);
        stream.push(TrainingInstance {
            source_index: ex.index,
            language: None,
            original: original.clone(),
            switched: None,
            label: ex.label,
        });
        for aug in by_source.remove(&ex.index).unwrap_or_default() {
            if aug.original_ids_a() != a || aug.original_ids_b() != b {
                return Err(SaltError::data(format!(
                    "augmented record for example {} ({}) does not match its original",
                    ex.index, aug.language
                )));
            }
            if aug.label != ex.label {
                return Err(SaltError::data(format!("augmented record for example {} changed the label", ex.index)));
            }
            stream.push(TrainingInstance {
                source_index: ex.index,
                language: Some(aug.language.clone()),
                original: original.clone(),
                switched: Some(PairIds::encode(tokenizer, &aug.token_ids_a, &aug.token_ids_b, max_len)),
                label: ex.label,
            });
        }
    }
    if let Some((idx, _)) = by_source.into_iter().next() {
        return Err(SaltError::data(format!("augmented record refers to unknown example {idx}")));
    }
    Ok(stream)
}

pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, str_key("shuffle")])));
    order
}

/// Builds a padded batch. Augmented instances are mixed with coefficients from
/// `(seed, epoch, stream index)` when mixup is on, or fed as plain switched
/// ids when it is off; originals always use the plain lookup.
pub fn make_batch(
    stream: &[TrainingInstance],
    indices: &[usize],
    pad: TokenId,
    embedding_dim: usize,
    mixup: &MixupConfig,
    seed: u64,
    epoch: usize,
    dtype: DType,
) -> Result<(PairBatch, Vec<Vec<f32>>)> {
    let rows: Vec<&TrainingInstance> = indices.iter().map(|&i| &stream[i]).collect();
    let inputs: Vec<&PairIds> = rows
        .iter()
        .map(|r| match (&r.switched, mixup.enabled) {
            (Some(s), false) => s,
            _ => &r.original,
        })
        .collect();
    let mut batch = rt(PairBatch::plain(&inputs, pad, dtype))?;
    let mut drawn = Vec::new();
    if mixup.enabled && rows.iter().any(|r| r.is_augmented()) {
        let l = batch.seq_len();
        let d = embedding_dim;
        let mut r_eff = vec![1f32; rows.len() * l * d];
        let mut other = Vec::with_capacity(rows.len());
        for (b, (&k, row)) in indices.iter().zip(&rows).enumerate() {
            let Some(sw) = &row.switched else {
                other.push(padded(&row.original.ids, l, pad));
                continue;
            };
            if sw.ids.len() != row.original.ids.len() {
                return Err(SaltError::internal(format!(
                    "switched sequence length differs from original for example {}",
                    row.source_index
                )));
            }
            let coeffs = instance_coefficients(seed, epoch as u64, k as u64, d, l, mixup.per_position)?;
            drawn.push(coeffs[0].as_slice().to_vec());
            for (pos, (o, s)) in row.original.ids.iter().zip(&sw.ids).enumerate() {
                if o != s {
                    let r = coeffs[if mixup.per_position { pos } else { 0 }].as_slice();
                    r_eff[(b * l + pos) * d..(b * l + pos + 1) * d].copy_from_slice(r);
                }
            }
            other.push(padded(&sw.ids, l, pad));
        }
        let run = || -> candle_core::Result<(Tensor, Tensor)> {
            let r = Tensor::from_vec(r_eff, (rows.len(), l, d), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
            Ok((ids_tensor(&other)?, r))
        };
        batch.mix = Some(rt(run())?);
    }
    Ok((batch, drawn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub seed: u64,
    pub config_hash: String,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub instances_per_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// What the trainer hashes: everything that can change the trained weights.
#[derive(Serialize)]
struct HashedRun<'a> {
    config: &'a RunConfig,
    seed: u64,
}

pub struct Trainer<'a> {
    pub config: &'a RunConfig,
    pub seed: u64,
    pub tokenizer: &'a WordPieceTokenizer,
    pub dtype: DType,
}

impl Trainer<'_> {
    fn max_len(&self) -> usize {
        self.config.model.max_seq_len
    }

    /// One optimisation step; returns the batch loss. A non-finite loss aborts
    /// with the batch's example indices and the drawn coefficient vectors.
    pub fn training_step(
        &self,
        model: &PairClassifier,
        stream: &[TrainingInstance],
        indices: &[usize],
        epoch: usize,
        dropout: Option<&mut Dropout>,
        optimizer: &mut AdamW,
    ) -> Result<f64> {
        let pad = self.tokenizer.special_tokens().pad;
        let (batch, drawn) = make_batch(
            stream,
            indices,
            pad,
            model.bert.config.hidden_size,
            &self.config.mixup,
            self.seed,
            epoch,
            model.bert.params.dtype(),
        )?;
        let labels: Vec<u32> = indices.iter().map(|&i| stream[i].label as u32).collect();
        let loss = rt((|| {
            let logits = model.logits(&batch, dropout)?;
            cross_entropy(&logits, &Tensor::from_vec(labels, indices.len(), &candle_core::Device::Cpu)?)
        })())?;
        let value = rt(loss.to_dtype(DType::F64).and_then(|l| l.to_scalar::<f64>()))?;
        if !value.is_finite() {
            let examples: Vec<u64> = indices.iter().map(|&i| stream[i].source_index).collect();
            let preview: Vec<Vec<f32>> = drawn.iter().map(|r| r.iter().take(8).copied().collect()).collect();
            return Err(SaltError::runtime(format!(
                "non-finite training loss at epoch {epoch}; batch examples {examples:?}; mixup coefficients (first 8 dims) {preview:?}"
            )));
        }
        rt(optimizer.backward_step(&loss))?;
        Ok(value)
    }

    /// Fine-tunes from `init` and writes the best-on-dev checkpoint (latest
    /// epoch among ties) plus the JSONL log to `out_dir`. Dev data must be in
    /// the source language.
    pub fn train(
        &self,
        init: PairClassifier,
        train_set: &[TaskExample],
        dev_set: &[TaskExample],
        augmented: Option<&[AugmentedExample]>,
        out_dir: &Path,
    ) -> Result<(PairClassifier, TrainOutcome)> {
        let cfg = &self.config.train;
        let source = &self.config.augment.source_language;
        if train_set.is_empty() || dev_set.is_empty() {
            return Err(SaltError::input("training and dev sets must be nonempty"));
        }
        if let Some(bad) = dev_set.iter().find(|e| &e.language != source) {
            return Err(SaltError::data(format!(
                "dev example {} is in {}, not the source language {source}",
                bad.index, bad.language
            )));
        }
        let augmented: &[AugmentedExample] = match (cfg.augmentation, augmented) {
            (false, _) => &[],
            (true, Some(a)) => a,
            (true, None) => {
                return Err(SaltError::config(
                    "augmentation is enabled but no augmented data was provided (set train.augmentation=false for vanilla fine-tuning)",
                ))
            }
        };
        let allowed = &self.config.augment.target_languages;
        let augmented: Vec<AugmentedExample> =
            augmented.iter().filter(|a| allowed.contains(&a.language)).cloned().collect();
        let stream = build_training_stream(train_set, &augmented, self.tokenizer, self.max_len())?;
        let dev_encoded: Vec<PairIds> =
            dev_set.iter().map(|e| PairIds::from_text(self.tokenizer, e, self.max_len())).collect();
        let dev_labels: Vec<usize> = dev_set.iter().map(|e| e.label).collect();

        let model = init;
        let params = ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        };
        let mut opt = rt(AdamW::new(model.bert.params.vars(), params))?;
        let mut dropout = Dropout::new(cfg.dropout, derive_seed(&[self.seed, str_key("dropout")]));
        let steps_per_epoch = stream.len().div_ceil(cfg.batch_size);
        let total = steps_per_epoch * cfg.epochs;
        let pad = self.tokenizer.special_tokens().pad;

        let mut log = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(usize, f64, BTreeMap<String, Tensor>)> = None;
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let order = epoch_order(stream.len(), self.seed, epoch);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                opt.set_learning_rate(learning_rate_at(step, total, cfg.learning_rate));
                loss_sum += self.training_step(&model, &stream, chunk, epoch, Some(&mut dropout), &mut opt)?;
                step += 1;
            }
            let preds = model.predict_encoded(&dev_encoded, pad)?;
            let dev_acc = accuracy(&preds, &dev_labels)?;
            log.push(EpochLog {
                epoch,
                train_loss: loss_sum / steps_per_epoch as f64,
                dev_acc,
            });
            // Dev accuracy saturates early on easy tasks; among tied epochs the
            // latest one has seen the most updates.
            if best.as_ref().is_none_or(|(_, acc, _)| dev_acc >= *acc) {
                best = Some((epoch, dev_acc, rt(model.bert.params.snapshot())?));
            }
        }
        let (best_epoch, best_dev_acc, snapshot) = best.expect("at least one epoch");
        rt(model.bert.params.restore(&snapshot))?;

        let outcome = TrainOutcome {
            seed: self.seed,
            config_hash: config_hash(&HashedRun {
                config: self.config,
                seed: self.seed,
            }),
            best_epoch,
            best_dev_acc,
            instances_per_epoch: stream.len(),
            log,
        };
        let meta = CheckpointMeta {
            seed: self.seed,
            config_hash: outcome.config_hash.clone(),
            tokenizer: self.tokenizer.identifier().to_string(),
            num_labels: model.num_labels,
            max_seq_len: self.max_len(),
            lowercase: self.tokenizer.lowercases(),
            source_language: source.clone(),
            best_epoch,
            best_dev_acc,
        };
        std::fs::create_dir_all(out_dir).map_err(|e| SaltError::io(out_dir, e))?;
        model.save(out_dir, self.tokenizer, &meta)?;
        jsonl::write_jsonl(&out_dir.join(LOG_FILE), &outcome.log)?;
        Ok((model, outcome))
    }
}

/// Number of classes implied by the labels (at least two).
pub fn num_labels(sets: &[&[TaskExample]]) -> usize {
    sets.iter().flat_map(|s| s.iter()).map(|e| e.label + 1).max().unwrap_or(2).max(2)
}
