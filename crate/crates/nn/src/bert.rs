//! A BERT encoder with an MLM head, built from primitive tensor ops so every
//! piece has a backward pass. Parameter names follow the Hugging Face BERT
//! layout, so the toy model and real checkpoints share one loader.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Result, Tensor, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const VOCAB_FILE: &str = "vocab.txt";

const INIT_STD: f64 = 0.02;

/// The subset of a Hugging Face `BertConfig` used here; other fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BertConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    #[serde(default = "default_model_type")]
    pub model_type: String,
    /// Number the second segment of a pair from 1 again, so that aligned
    /// tokens of the two sentences share position embeddings.
    #[serde(default)]
    pub restart_pair_positions: bool,
}

fn default_type_vocab() -> usize {
    2
}
fn default_eps() -> f64 {
    1e-12
}
fn default_act() -> String {
    "gelu".into()
}
fn default_model_type() -> String {
    "bert".into()
}

impl BertConfig {
    pub fn toy(vocab_size: usize, hidden: usize, layers: usize, heads: usize, intermediate: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: hidden,
            num_hidden_layers: layers,
            num_attention_heads: heads,
            intermediate_size: intermediate,
            max_position_embeddings: max_len,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            hidden_act: "gelu".into(),
            model_type: "bert".into(),
            restart_pair_positions: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads
    }

    fn check(&self) -> Result<()> {
        if self.num_attention_heads == 0 || self.hidden_size % self.num_attention_heads != 0 {
            candle_core::bail!("hidden_size {} not divisible by {} heads", self.hidden_size, self.num_attention_heads)
        }
        if !matches!(self.hidden_act.as_str(), "gelu" | "gelu_new" | "relu") {
            candle_core::bail!("unsupported activation {}", self.hidden_act)
        }
        Ok(())
    }
}

/// Inverted dropout driven by a seeded host-side generator.
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if self.rng.random::<f64>() < self.p { 0.0 } else { keep as f32 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        x.mul(&mask)
    }
}

fn maybe_dropout(x: Tensor, dropout: &mut Option<&mut Dropout>) -> Result<Tensor> {
    match dropout {
        Some(d) => d.apply(&x),
        None => Ok(x),
    }
}

/// `x @ w^T + b` over the last dimension, with `w` in `[out, in]` layout.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().expect("nonempty shape");
    let rows = x.elem_count() / inner;
    let y = x.reshape((rows, inner))?.matmul(&w.t()?)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out = dims;
    *out.last_mut().expect("nonempty shape") = w.dim(0)?;
    y.reshape(out)
}

/// Position ids for one row of segment ids. With `restart`, the second
/// segment counts from 1 again so that its first token lines up with the
/// first token of the first segment.
pub fn position_ids(type_ids: &[u32], restart: bool) -> Vec<u32> {
    let first = type_ids.iter().take_while(|&&t| t == 0).count();
    (0..type_ids.len())
        .map(|i| if restart && i >= first { (i - first + 1) as u32 } else { i as u32 })
        .collect()
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let y = xc.broadcast_div(&(var + eps)?.sqrt()?)?;
    y.broadcast_mul(gamma)?.broadcast_add(beta)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Mean negative log-likelihood of `targets` (u32, shape `[n]`) under `logits` `[n, k]`.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let lp = log_softmax_last(logits)?;
    let picked = lp.gather(&targets.unsqueeze(1)?, 1)?;
    picked.mean_all()?.neg()
}

/// Additive attention bias `[b, 1, 1, l]`: 0 for real tokens, -1e9 for padding.
pub fn attention_bias(lengths: &[usize], max_len: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = lengths
        .iter()
        .flat_map(|&n| (0..max_len).map(move |i| if i < n { 0.0 } else { -1e9 }))
        .collect();
    Tensor::from_vec(data, (lengths.len(), 1, 1, max_len), &Device::Cpu)?.to_dtype(dtype)
}

pub fn ids_tensor(rows: &[Vec<u32>]) -> Result<Tensor> {
    let l = rows.first().map_or(0, Vec::len);
    let flat: Vec<u32> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), l), &Device::Cpu)
}

pub struct Bert {
    pub config: BertConfig,
    pub params: ParamStore,
}

fn rename_legacy(name: &str) -> String {
    name.replace("LayerNorm.gamma", "LayerNorm.weight").replace("LayerNorm.beta", "LayerNorm.bias")
}

impl Bert {
    /// Randomly initialised encoder and MLM head.
    pub fn new(config: BertConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new(dtype);
        let (v, d, ff) = (config.vocab_size, config.hidden_size, config.intermediate_size);
        p.init_normal("bert.embeddings.word_embeddings.weight", &[v, d], INIT_STD, &mut rng)?;
        p.init_normal("bert.embeddings.position_embeddings.weight", &[config.max_position_embeddings, d], INIT_STD, &mut rng)?;
        p.init_normal("bert.embeddings.token_type_embeddings.weight", &[config.type_vocab_size, d], INIT_STD, &mut rng)?;
        let ln = |p: &mut ParamStore, prefix: &str| -> Result<()> {
            p.init_const(&format!("{prefix}.LayerNorm.weight"), &[d], 1.0)?;
            p.init_const(&format!("{prefix}.LayerNorm.bias"), &[d], 0.0)
        };
        let dense = |p: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng| -> Result<()> {
            p.init_normal(&format!("{name}.weight"), &[out, inp], INIT_STD, rng)?;
            p.init_const(&format!("{name}.bias"), &[out], 0.0)
        };
        ln(&mut p, "bert.embeddings")?;
        for i in 0..config.num_hidden_layers {
            let l = format!("bert.encoder.layer.{i}");
            for m in ["query", "key", "value"] {
                dense(&mut p, &format!("{l}.attention.self.{m}"), d, d, &mut rng)?;
            }
            dense(&mut p, &format!("{l}.attention.output.dense"), d, d, &mut rng)?;
            ln(&mut p, &format!("{l}.attention.output"))?;
            dense(&mut p, &format!("{l}.intermediate.dense"), ff, d, &mut rng)?;
            dense(&mut p, &format!("{l}.output.dense"), d, ff, &mut rng)?;
            ln(&mut p, &format!("{l}.output"))?;
        }
        dense(&mut p, "cls.predictions.transform.dense", d, d, &mut rng)?;
        ln(&mut p, "cls.predictions.transform")?;
        p.init_const("cls.predictions.bias", &[v], 0.0)?;
        Ok(Self { config, params: p })
    }

    /// Loads `config.json` and `model.safetensors` from a checkpoint directory.
    /// Names without the `bert.` prefix (bare `BertModel` exports) are accepted.
    /// Tensors absent from the file keep their random initialisation from `seed`
    /// and are reported back.
    pub fn load(dir: &Path, seed: u64, dtype: DType) -> Result<(Self, Vec<String>)> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| candle_core::Error::Msg(format!("{}: {e}", cfg_path.display())))?;
        let config: BertConfig =
            serde_json::from_str(&text).map_err(|e| candle_core::Error::Msg(format!("{}: {e}", cfg_path.display())))?;
        let mut model = Self::new(config, seed, dtype)?;
        let tensors = ParamStore::load_tensors(&dir.join(WEIGHTS_FILE))?;
        let tensors: HashMap<String, Tensor> = tensors.into_iter().map(|(k, v)| (rename_legacy(&k), v)).collect();
        model.load_named(&tensors)?;
        let missing: Vec<String> = model
            .params
            .names()
            .filter(|n| !tensors.contains_key(*n) && !tensors.contains_key(n.trim_start_matches("bert.")))
            .map(String::from)
            .collect();
        Ok((model, missing))
    }

    /// Copies matching tensors into the store, adding unknown heads
    /// (pooler, classifier) as new parameters. Returns the names added.
    pub fn load_named(&mut self, tensors: &HashMap<String, Tensor>) -> Result<Vec<String>> {
        let mut added = Vec::new();
        for (name, t) in tensors {
            let key = if self.params.contains(name) {
                name.clone()
            } else if self.params.contains(&format!("bert.{name}")) {
                format!("bert.{name}")
            } else if name.starts_with("bert.pooler") || name.starts_with("classifier") {
                self.params.insert(name.clone(), t)?;
                added.push(name.clone());
                continue;
            } else {
                continue;
            };
            let var = self.params.var(&key).expect("checked");
            if var.shape() != t.shape() {
                candle_core::bail!("tensor {name}: shape {:?} does not match {:?}", t.shape(), var.shape())
            }
            var.set(&t.to_dtype(self.params.dtype())?)?;
        }
        Ok(added)
    }

    pub fn save(&self, dir: &Path, vocabulary: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| candle_core::Error::Msg(format!("{}: {e}", dir.display())))?;
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        let write = |name: &str, body: String| {
            std::fs::write(dir.join(name), body).map_err(|e| candle_core::Error::Msg(format!("{name}: {e}")))
        };
        write(CONFIG_FILE, cfg + "\n")?;
        write(VOCAB_FILE, vocabulary.join("\n") + "\n")?;
        self.params.save(&dir.join(WEIGHTS_FILE))
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    pub fn word_embeddings(&self) -> Result<&Tensor> {
        self.p("bert.embeddings.word_embeddings.weight")
    }

    /// Bare token-embedding lookup `[b, l, d]` for ids `[b, l]`.
    pub fn lookup(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let rows = self.word_embeddings()?.index_select(&ids.flatten_all()?, 0)?;
        rows.reshape((b, l, self.config.hidden_size))
    }

    fn activation(&self, x: &Tensor) -> Result<Tensor> {
        match self.config.hidden_act.as_str() {
            "relu" => x.relu(),
            "gelu_new" => x.gelu(),
            _ => x.gelu_erf(),
        }
    }

    /// Runs the encoder on pre-computed token embeddings `[b, l, d]`;
    /// position and segment embeddings are added here.
    pub fn encode(
        &self,
        token_embeddings: &Tensor,
        type_ids: &Tensor,
        bias: &Tensor,
        dropout: Option<&mut Dropout>,
    ) -> Result<Tensor> {
        self.encode_at(token_embeddings, None, type_ids, bias, dropout)
    }

    /// [`Bert::encode`] with explicit `[b, l]` position ids instead of `0..l`.
    pub fn encode_at(
        &self,
        token_embeddings: &Tensor,
        positions: Option<&Tensor>,
        type_ids: &Tensor,
        bias: &Tensor,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Tensor> {
        let c = &self.config;
        let (b, l, d) = token_embeddings.dims3()?;
        if l > c.max_position_embeddings {
            candle_core::bail!("sequence length {l} exceeds {} positions", c.max_position_embeddings)
        }
        let table = self.p("bert.embeddings.position_embeddings.weight")?;
        let derived;
        let positions = match positions {
            None if c.restart_pair_positions => {
                let rows: Vec<Vec<u32>> = type_ids.to_vec2::<u32>()?.iter().map(|t| position_ids(t, true)).collect();
                derived = ids_tensor(&rows)?;
                Some(&derived)
            }
            other => other,
        };
        let pos = match positions {
            Some(p) => table.index_select(&p.flatten_all()?, 0)?.reshape((b, l, d))?,
            None => table.narrow(0, 0, l)?.unsqueeze(0)?,
        };
        let seg = self
            .p("bert.embeddings.token_type_embeddings.weight")?
            .index_select(&type_ids.flatten_all()?, 0)?
            .reshape((b, l, d))?;
        let x = token_embeddings.broadcast_add(&pos)?.add(&seg)?;
        let x = layer_norm(
            &x,
            self.p("bert.embeddings.LayerNorm.weight")?,
            self.p("bert.embeddings.LayerNorm.bias")?,
            c.layer_norm_eps,
        )?;
        let mut x = maybe_dropout(x, &mut dropout)?;
        let (h, dh) = (c.num_attention_heads, c.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        for i in 0..c.num_hidden_layers {
            let pre = format!("bert.encoder.layer.{i}");
            let proj = |m: &str| -> Result<Tensor> {
                let w = self.p(&format!("{pre}.attention.self.{m}.weight"))?;
                let bias = self.p(&format!("{pre}.attention.self.{m}.bias"))?;
                linear(&x, w, Some(bias))?.reshape((b, l, h, dh))?.transpose(1, 2)?.contiguous()
            };
            let (q, k, v) = (proj("query")?, proj("key")?, proj("value")?);
            let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(bias)?;
            let probs = maybe_dropout(softmax_last(&scores)?, &mut dropout)?;
            let ctx = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, l, d))?;
            let att = linear(
                &ctx,
                self.p(&format!("{pre}.attention.output.dense.weight"))?,
                Some(self.p(&format!("{pre}.attention.output.dense.bias"))?),
            )?;
            let att = maybe_dropout(att, &mut dropout)?;
            let x1 = layer_norm(
                &att.add(&x)?,
                self.p(&format!("{pre}.attention.output.LayerNorm.weight"))?,
                self.p(&format!("{pre}.attention.output.LayerNorm.bias"))?,
                c.layer_norm_eps,
            )?;
            let inter = self.activation(&linear(
                &x1,
                self.p(&format!("{pre}.intermediate.dense.weight"))?,
                Some(self.p(&format!("{pre}.intermediate.dense.bias"))?),
            )?)?;
            let out = linear(
                &inter,
                self.p(&format!("{pre}.output.dense.weight"))?,
                Some(self.p(&format!("{pre}.output.dense.bias"))?),
            )?;
            let out = maybe_dropout(out, &mut dropout)?;
            x = layer_norm(
                &out.add(&x1)?,
                self.p(&format!("{pre}.output.LayerNorm.weight"))?,
                self.p(&format!("{pre}.output.LayerNorm.bias"))?,
                c.layer_norm_eps,
            )?;
        }
        Ok(x)
    }

    /// MLM logits `[n, vocab]` for hidden rows `[n, d]`; the decoder is tied
    /// to the input embedding table.
    pub fn mlm_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let t = linear(
            hidden,
            self.p("cls.predictions.transform.dense.weight")?,
            Some(self.p("cls.predictions.transform.dense.bias")?),
        )?;
        let t = layer_norm(
            &self.activation(&t)?,
            self.p("cls.predictions.transform.LayerNorm.weight")?,
            self.p("cls.predictions.transform.LayerNorm.bias")?,
            self.config.layer_norm_eps,
        )?;
        linear(&t, self.word_embeddings()?, Some(self.p("cls.predictions.bias")?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dtype: DType) -> Bert {
        Bert::new(BertConfig::toy(20, 8, 2, 2, 16, 12), 0, dtype).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one_and_padding_is_ignored() {
        let m = tiny(DType::F64);
        let ids = ids_tensor(&[vec![2, 5, 6, 3, 0], vec![2, 5, 6, 3, 9]]).unwrap();
        let types = ids.zeros_like().unwrap();
        let bias = attention_bias(&[4, 4], 5, DType::F64).unwrap();
        let h = m.encode(&m.lookup(&ids).unwrap(), &types, &bias, None).unwrap();
        let h = h.narrow(1, 0, 4).unwrap();
        let diff = (h.narrow(0, 0, 1).unwrap() - h.narrow(0, 1, 1).unwrap()).unwrap().abs().unwrap();
        assert!(diff.max_all().unwrap().to_scalar::<f64>().unwrap() < 1e-12);
        let p = softmax_last(&m.mlm_logits(&h.reshape((8, 8)).unwrap()).unwrap()).unwrap();
        for row in p.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn restarted_positions_follow_segments() {
        assert_eq!(position_ids(&[0, 0, 0, 0, 1, 1, 1], true), [0, 1, 2, 3, 1, 2, 3]);
        assert_eq!(position_ids(&[0, 0, 0, 0, 1, 1, 1], false), [0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(position_ids(&[0, 0, 0], true), [0, 1, 2]);

        let mut m = tiny(DType::F64);
        m.config.restart_pair_positions = true;
        let ids = ids_tensor(&[vec![2, 5, 6, 3, 7, 3]]).unwrap();
        let types = ids_tensor(&[vec![0, 0, 0, 0, 1, 1]]).unwrap();
        let pos = ids_tensor(&[vec![0, 1, 2, 3, 1, 2]]).unwrap();
        let bias = attention_bias(&[6], 6, DType::F64).unwrap();
        let emb = m.lookup(&ids).unwrap();
        let implicit = m.encode(&emb, &types, &bias, None).unwrap();
        let explicit = m.encode_at(&emb, Some(&pos), &types, &bias, None).unwrap();
        let diff = (implicit - explicit).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let logits = Tensor::new(&[[0.0f64, 0.0, 0.0], [1.0, 2.0, 3.0]], &Device::Cpu).unwrap();
        let t = Tensor::new(&[0u32, 2], &Device::Cpu).unwrap();
        let got = cross_entropy(&logits, &t).unwrap().to_scalar::<f64>().unwrap();
        let second = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let want = (3f64.ln() + second) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn save_load_roundtrip_and_bare_names() {
        let m = tiny(DType::F32);
        let dir = tempfile::tempdir().unwrap();
        let vocab: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        m.save(dir.path(), &vocab).unwrap();
        let (back, missing) = Bert::load(dir.path(), 99, DType::F32).unwrap();
        assert!(missing.is_empty(), "{missing:?}");
        let w = |b: &Bert| b.word_embeddings().unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(w(&back), w(&m));

        // Strip the prefix as a bare encoder export would.
        let tensors = ParamStore::load_tensors(&dir.path().join(WEIGHTS_FILE)).unwrap();
        let bare: HashMap<String, Tensor> =
            tensors.into_iter().map(|(k, v)| (k.trim_start_matches("bert.").to_string(), v)).collect();
        let mut fresh = Bert::new(m.config.clone(), 5, DType::F32).unwrap();
        fresh.load_named(&bare).unwrap();
        assert_eq!(w(&fresh), w(&m));
    }

    #[test]
    fn dropout_is_seeded_and_scaled() {
        let x = Tensor::ones((1000,), DType::F32, &Device::Cpu).unwrap();
        let a = Dropout::new(0.5, 3).apply(&x).unwrap().to_vec1::<f32>().unwrap();
        let b = Dropout::new(0.5, 3).apply(&x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = a.iter().sum::<f32>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.15);
    }
}
