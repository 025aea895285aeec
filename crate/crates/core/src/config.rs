//! Run configuration: one YAML document with nested sections, flag overrides
//! of the form `section.key=value`, and a canonical JSON form for hashing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::Value;
use sha2::{Digest, Sha256};

use crate::codeswitch::AugmentationConfig;
use crate::error::{Result, SaltError};
use crate::eval::TTestVariant;
use crate::mixup::MixupConfig;
use crate::synth::SyntheticLanguageSpec;
use crate::vocab::DEFAULT_WORD_LIMIT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub limit: usize,
    /// Frequency list per language; relative paths resolve against the config file.
    pub lists: BTreeMap<String, PathBuf>,
    /// Directory of compiled `{lang}.json` vocabulary sets.
    pub dir: Option<PathBuf>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            limit: DEFAULT_WORD_LIMIT,
            lists: BTreeMap::new(),
            dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Pretrained,
    #[default]
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backend: Backend,
    /// Checkpoint directory (`config.json`, `vocab.txt`, `model.safetensors`).
    pub checkpoint: Option<PathBuf>,
    pub max_seq_len: usize,
    pub lowercase: bool,
    /// Toy encoder shape; ignored for pretrained checkpoints.
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    /// Toy encoder only: the second sentence of a pair restarts position
    /// numbering, which lets pretraining on parallel pairs align the two halves.
    pub restart_pair_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Toy,
            checkpoint: None,
            max_seq_len: 64,
            lowercase: true,
            hidden_size: 64,
            num_layers: 2,
            num_heads: 4,
            intermediate_size: 128,
            restart_pair_positions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            learning_rate: 2e-3,
            weight_decay: 0.01,
            mask_prob: 0.15,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `false` trains on the originals only (vanilla fine-tuning).
    pub augmentation: bool,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            augmentation: true,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ttest: TTestVariant,
    pub alpha: f64,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ttest: TTestVariant::Student,
            alpha: 0.05,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub augment: AugmentationConfig,
    pub mixup: MixupConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SyntheticLanguageSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs"),
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentationConfig::default(),
            mixup: MixupConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SyntheticLanguageSpec::default(),
        }
    }
}

/// Mappings whose keys are user data rather than field names.
const FREE_MAPS: &[&str] = &["vocab.lists", "augment.threshold_overrides"];

fn unknown_keys(user: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Mapping(u), Value::Mapping(r)) = (user, reference) else {
        return;
    };
    if FREE_MAPS.contains(&path) {
        return;
    }
    for (k, v) in u {
        let key = match k {
            Value::String(s) => s.clone(),
            other => serde_yaml::to_string(other).unwrap_or_default().trim().to_string(),
        };
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match r.get(k) {
            Some(rv) => unknown_keys(v, rv, &full, out),
            None => out.push(full),
        }
    }
}

fn positive(out: &mut Vec<String>, key: &str, ok: bool) {
    if !ok {
        out.push(format!("{key}: must be positive"));
    }
}

impl RunConfig {
    /// Parses YAML text, applies `key.path=value` overrides, rejects unknown
    /// keys (all of them at once) and validates.
    pub fn from_yaml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = if text.trim().is_empty() {
            Value::Mapping(Default::default())
        } else {
            serde_yaml::from_str(text).map_err(|e| SaltError::config(format!("malformed config: {e}")))?
        };
        if value.is_null() {
            value = Value::Mapping(Default::default());
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let reference = serde_yaml::to_value(RunConfig::default()).map_err(|e| SaltError::internal(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(SaltError::config(format!("unknown configuration keys: {}", unknown.join(", "))));
        }
        let config: RunConfig =
            serde_yaml::from_value(value).map_err(|e| SaltError::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SaltError::io(path, e))?;
        let mut config = Self::from_yaml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    /// Makes relative file paths absolute with respect to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.vocab.lists.values_mut().for_each(fix);
        if let Some(d) = self.vocab.dir.as_mut() {
            fix(d);
        }
        if let Some(c) = self.model.checkpoint.as_mut() {
            fix(c);
        }
    }

    /// Every violated constraint, one entry per offending key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.augment.problems().into_iter().map(|p| format!("augment.{p}")));
        out.extend(self.synth.problems().into_iter().map(|p| format!("synth.{p}")));
        positive(&mut out, "vocab.limit", self.vocab.limit > 0);
        let m = &self.model;
        positive(&mut out, "model.max_seq_len", m.max_seq_len > 2);
        positive(&mut out, "model.hidden_size", m.hidden_size > 0);
        positive(&mut out, "model.num_layers", m.num_layers > 0);
        positive(&mut out, "model.num_heads", m.num_heads > 0);
        positive(&mut out, "model.intermediate_size", m.intermediate_size > 0);
        if m.num_heads > 0 && m.hidden_size % m.num_heads != 0 {
            out.push("model.num_heads: must divide model.hidden_size".into());
        }
        if m.backend == Backend::Pretrained && m.checkpoint.is_none() {
            out.push("model.checkpoint: required for the pretrained backend".into());
        }
        let p = &self.pretrain;
        positive(&mut out, "pretrain.epochs", p.epochs > 0);
        positive(&mut out, "pretrain.batch_size", p.batch_size > 0);
        positive(&mut out, "pretrain.learning_rate", p.learning_rate > 0.0 && p.learning_rate.is_finite());
        if !(p.mask_prob > 0.0 && p.mask_prob < 1.0) {
            out.push("pretrain.mask_prob: must lie in (0, 1)".into());
        }
        let t = &self.train;
        positive(&mut out, "train.epochs", t.epochs > 0);
        positive(&mut out, "train.batch_size", t.batch_size > 0);
        positive(&mut out, "train.learning_rate", t.learning_rate > 0.0 && t.learning_rate.is_finite());
        if !(0.0..1.0).contains(&t.dropout) {
            out.push("train.dropout: must lie in [0, 1)".into());
        }
        if !(t.weight_decay >= 0.0) || !(p.weight_decay >= 0.0) {
            out.push("weight_decay: must be non-negative".into());
        }
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            out.push("eval.alpha: must lie in (0, 1)".into());
        }
        if self.eval.seeds.is_empty() {
            out.push("eval.seeds: must be nonempty".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(SaltError::config(format!("invalid configuration: {}", p.join("; "))))
        }
    }

    /// Canonical JSON: object keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("json value serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Writes `resolved_config.yaml` and `config_hash.txt` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| SaltError::io(dir, e))?;
        let path = dir.join("resolved_config.yaml");
        std::fs::write(&path, self.to_yaml()).map_err(|e| SaltError::io(&path, e))?;
        let hash_path = dir.join("config_hash.txt");
        std::fs::write(&hash_path, self.hash() + "\n").map_err(|e| SaltError::io(&hash_path, e))?;
        Ok(path)
    }
}

/// SHA-256 of the canonical JSON form of any serializable value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes");
    let text = serde_json::to_string(&v).expect("json value serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies one `a.b.c=value` override; the value is parsed as YAML.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| SaltError::config(format!("override `{spec}` is not of the form key=value")))?;
    let parsed: Value =
        serde_yaml::from_str(raw).map_err(|e| SaltError::config(format!("override `{spec}`: {e}")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(SaltError::config(format!("override `{spec}` has an empty key")));
    }
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        if !cur.is_mapping() {
            *cur = Value::Mapping(Default::default());
        }
        let map = cur.as_mapping_mut().expect("just ensured");
        let key = Value::String((*k).to_string());
        if i + 1 == keys.len() {
            map.insert(key, parsed);
            return Ok(());
        }
        cur = map.entry(key).or_insert(Value::Mapping(Default::default()));
    }
    Ok(())
}
