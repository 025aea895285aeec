//! Masked-language-model pretraining for the toy encoder.

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use salt_core::config::PretrainConfig;
use salt_core::error::{Result, SaltError};
use salt_core::seed::{derive_seed, str_key};
use salt_core::synth::PretrainRecord;
use salt_core::tokenizer::Tokenizer;
use salt_core::types::TokenId;
use serde::{Deserialize, Serialize};

use crate::bert::{attention_bias, cross_entropy, ids_tensor, Bert};
use crate::rt;

/// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]` with segment ids, truncating the
/// longer sentence first until the pair fits `max_len`.
pub fn encode_pair(
    tokenizer: &dyn Tokenizer,
    a: &[TokenId],
    b: Option<&[TokenId]>,
    max_len: usize,
) -> (Vec<TokenId>, Vec<u32>) {
    let sp = tokenizer.special_tokens();
    let mut a = a.to_vec();
    let mut b = b.map(<[TokenId]>::to_vec);
    let overhead = if b.is_some() { 3 } else { 2 };
    while a.len() + b.as_ref().map_or(0, Vec::len) + overhead > max_len {
        match &mut b {
            Some(bb) if bb.len() >= a.len() => {
                bb.pop();
            }
            _ => {
                a.pop();
            }
        }
    }
    let mut ids = vec![sp.cls];
    ids.extend(&a);
    ids.push(sp.sep);
    let mut types = vec![0; ids.len()];
    if let Some(b) = b {
        ids.extend(&b);
        ids.push(sp.sep);
        types.resize(ids.len(), 1);
    }
    (ids, types)
}

/// Linear warm-up over the first 6% of steps, then linear decay to zero.
pub fn learning_rate_at(step: usize, total: usize, base: f64) -> f64 {
    let warm = ((total as f64) * 0.06).ceil().max(1.0) as usize;
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        base * (total.saturating_sub(step)) as f64 / (total - warm).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub sequences: usize,
}

struct Masked {
    inputs: Vec<TokenId>,
    /// (position, target id)
    targets: Vec<(usize, TokenId)>,
}

fn mask_sequence(ids: &[TokenId], tokenizer: &dyn Tokenizer, prob: f64, rng: &mut ChaCha8Rng) -> Masked {
    let sp = tokenizer.special_tokens();
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| !tokenizer.is_special(ids[i])).collect();
    let mut chosen: Vec<usize> = candidates.iter().copied().filter(|_| rng.random::<f64>() < prob).collect();
    if chosen.is_empty() && !candidates.is_empty() {
        chosen.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let mut inputs = ids.to_vec();
    let vocab = tokenizer.vocab_size() as TokenId;
    let mut targets = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        targets.push((i, ids[i]));
        let u: f64 = rng.random();
        if u < 0.8 {
            inputs[i] = sp.mask;
        } else if u < 0.9 {
            inputs[i] = loop {
                let t = rng.random_range(0..vocab);
                if !sp.contains(t) {
                    break t;
                }
            };
        }
    }
    Masked { inputs, targets }
}

/// Pretrains `model` in place. `on_epoch(epoch, mean_loss)` is called after
/// every epoch.
pub fn pretrain_mlm(
    model: &Bert,
    tokenizer: &dyn Tokenizer,
    records: &[PretrainRecord],
    config: &PretrainConfig,
    max_len: usize,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<MlmReport> {
    if records.is_empty() {
        return Err(SaltError::input("pretraining corpus is empty"));
    }
    let sequences: Vec<(Vec<TokenId>, Vec<u32>)> = records
        .iter()
        .map(|r| {
            let a = tokenizer.encode(&r.text_a).ids;
            let b = r.text_b.as_ref().map(|t| tokenizer.encode(t).ids);
            encode_pair(tokenizer, &a, b.as_deref(), max_len)
        })
        .collect();

    let params = ParamsAdamW {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..ParamsAdamW::default()
    };
    let mut opt = rt(AdamW::new(model.params.vars(), params))?;
    let steps_per_epoch = sequences.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let pad = tokenizer.special_tokens().pad;
    let dtype = model.params.dtype();
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, epoch as u64, str_key("mlm")]));
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let lmax = batch.iter().map(|&i| sequences[i].0.len()).max().expect("nonempty chunk");
            let mut rows = Vec::with_capacity(batch.len());
            let mut types = Vec::with_capacity(batch.len());
            let mut picks = Vec::new();
            let mut targets = Vec::new();
            for (b, &i) in batch.iter().enumerate() {
                let (ids, ty) = &sequences[i];
                let m = mask_sequence(ids, tokenizer, config.mask_prob, &mut rng);
                for (pos, t) in m.targets {
                    picks.push((b * lmax + pos) as u32);
                    targets.push(t);
                }
                let mut r = m.inputs;
                r.resize(lmax, pad);
                let mut t = ty.clone();
                t.resize(lmax, 0);
                rows.push(r);
                types.push(t);

            }
            let lengths: Vec<usize> = batch.iter().map(|&i| sequences[i].0.len()).collect();
            let mut run = || -> candle_core::Result<f64> {
                let ids = ids_tensor(&rows)?;
                let ty = ids_tensor(&types)?;
                let bias = attention_bias(&lengths, lmax, dtype)?;
                let h = model.encode(&model.lookup(&ids)?, &ty, &bias, None)?;
                let flat = h.reshape((batch.len() * lmax, model.config.hidden_size))?;
                let n = picks.len();
                let sel = flat.index_select(&Tensor::from_vec(picks.clone(), n, flat.device())?, 0)?;
                let logits = model.mlm_logits(&sel)?;
                let loss = cross_entropy(&logits, &Tensor::from_vec(targets.clone(), n, flat.device())?)?;
                let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if value.is_finite() {
                    opt.set_learning_rate(learning_rate_at(step, total, config.learning_rate));
                    opt.backward_step(&loss)?;
                }
                Ok(value)
            };
            let value = rt(run())?;
            if !value.is_finite() {
                return Err(SaltError::runtime(format!(
                    "pretraining diverged: non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += value;
            step += 1;
        }
        let mean = loss_sum / steps_per_epoch as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(MlmReport {
        epoch_losses,
        steps: step,
        sequences: sequences.len(),
    })
}
