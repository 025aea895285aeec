//! Offline self-augmentation by code-switching.
//!
//! Each sentence is scored once by the MLM without masking. For every target
//! language the distribution at each substitutable position is restricted to
//! that language's vocabulary set (minus the original token); the best
//! candidate replaces the original when its raw probability clears the
//! language's threshold. Substitution is strictly one token for one token.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaltError};
use crate::jsonl;
use crate::scorer::{PositionDistribution, Scorer};
use crate::seed::{derive_seed, str_key};
use crate::tokenizer::{Encoding, Tokenizer};
use crate::types::{TaskExample, TokenId};
use crate::vocab::VocabularySet;

pub const DEFAULT_SYNONYM_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_CROSSLINGUAL_THRESHOLD: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSubstitution {
    pub position: usize,
    pub original_id: TokenId,
    pub substituted_id: TokenId,
    /// Raw full-vocabulary softmax probability of `substituted_id`.
    pub probability: f64,
    pub language: String,
}

/// Which positions may be rewritten.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// Skip special tokens, punctuation-only tokens and every piece of a
    /// multi-piece word.
    #[default]
    WholeWords,
    /// Skip special tokens only.
    NonSpecial,
}

/// How the replacement is picked among in-set candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Argmax,
    /// Sample among above-threshold candidates proportionally to probability.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub source_language: String,
    /// One augmented copy per entry; the source language means synonym replacement.
    pub target_languages: Vec<String>,
    pub synonym_threshold: f64,
    pub crosslingual_threshold: f64,
    /// Per-language thresholds taking precedence over the class defaults.
    pub threshold_overrides: BTreeMap<String, f64>,
    pub substitutable_positions: PositionPolicy,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            source_language: "en".into(),
            target_languages: ["en", "fr", "es", "de"].map(String::from).to_vec(),
            synonym_threshold: DEFAULT_SYNONYM_THRESHOLD,
            crosslingual_threshold: DEFAULT_CROSSLINGUAL_THRESHOLD,
            threshold_overrides: BTreeMap::new(),
            substitutable_positions: PositionPolicy::WholeWords,
            selection: Selection::Argmax,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn threshold_for(&self, language: &str) -> f64 {
        if let Some(&t) = self.threshold_overrides.get(language) {
            t
        } else if language == self.source_language {
            self.synonym_threshold
        } else {
            self.crosslingual_threshold
        }
    }

    /// Returns every violated constraint, keyed by config path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let valid = |t: f64| t > 0.0 && t <= 1.0;
        if !valid(self.synonym_threshold) {
            out.push(format!("synonym_threshold: {} not in (0, 1]", self.synonym_threshold));
        }
        if !valid(self.crosslingual_threshold) {
            out.push(format!("crosslingual_threshold: {} not in (0, 1]", self.crosslingual_threshold));
        }
        for (lang, &t) in &self.threshold_overrides {
            if !valid(t) {
                out.push(format!("threshold_overrides.{lang}: {t} not in (0, 1]"));
            }
        }
        if self.target_languages.is_empty() {
            out.push("target_languages: must not be empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for lang in &self.target_languages {
            if !seen.insert(lang) {
                out.push(format!("target_languages: duplicate entry {lang}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SaltError::config(problems.join("; ")))
        }
    }
}

/// A code-switched copy of one [`TaskExample`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedExample {
    pub source_index: u64,
    pub language: String,
    pub token_ids_a: Vec<TokenId>,
    pub token_ids_b: Vec<TokenId>,
    pub substitutions_a: Vec<TokenSubstitution>,
    pub substitutions_b: Vec<TokenSubstitution>,
    pub label: usize,
}

impl AugmentedExample {
    pub fn original_ids_a(&self) -> Vec<TokenId> {
        restore(&self.token_ids_a, &self.substitutions_a)
    }

    pub fn original_ids_b(&self) -> Vec<TokenId> {
        restore(&self.token_ids_b, &self.substitutions_b)
    }

    pub fn substitution_count(&self) -> usize {
        self.substitutions_a.len() + self.substitutions_b.len()
    }

    pub fn token_count(&self) -> usize {
        self.token_ids_a.len() + self.token_ids_b.len()
    }

    pub fn substitutions(&self) -> impl Iterator<Item = &TokenSubstitution> {
        self.substitutions_a.iter().chain(&self.substitutions_b)
    }
}

fn restore(ids: &[TokenId], subs: &[TokenSubstitution]) -> Vec<TokenId> {
    let mut out = ids.to_vec();
    for s in subs {
        if let Some(slot) = out.get_mut(s.position) {
            *slot = s.original_id;
        }
    }
    out
}

/// Which positions of an encoded sentence may be substituted.
pub fn substitutable_mask(enc: &Encoding, tokenizer: &dyn Tokenizer, policy: PositionPolicy) -> Vec<bool> {
    (0..enc.len())
        .map(|i| {
            let id = enc.ids[i];
            if tokenizer.is_special(id) {
                return false;
            }
            match policy {
                PositionPolicy::NonSpecial => true,
                PositionPolicy::WholeWords => {
                    !tokenizer.is_punctuation(id) && !tokenizer.is_continuation(id) && enc.word_len(i) == 1
                }
            }
        })
        .collect()
}

fn check_alignment(
    token_ids: &[TokenId],
    substitutable: &[bool],
    distributions: &[PositionDistribution],
) -> Result<()> {
    if substitutable.len() != token_ids.len() {
        return Err(SaltError::internal("substitutable mask length differs from sequence length"));
    }
    for d in distributions {
        if d.position >= token_ids.len() {
            return Err(SaltError::internal(format!(
                "distribution for position {} but sequence has {} tokens",
                d.position,
                token_ids.len()
            )));
        }
    }
    Ok(())
}

/// Restricted argmax at one position: best in-set token other than `original`,
/// ties to the lower id.
pub fn restricted_argmax(
    dist: &PositionDistribution,
    vocab_set: &VocabularySet,
    original: TokenId,
) -> Result<Option<(TokenId, f64)>> {
    let mut best: Option<(TokenId, f64)> = None;
    for &id in &vocab_set.token_ids {
        if id == original {
            continue;
        }
        let p = *dist.probs.get(id as usize).ok_or_else(|| {
            SaltError::internal(format!("token {id} outside distribution of size {}", dist.probs.len()))
        })?;
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((id, p));
        }
    }
    Ok(best)
}

/// Proposes at most one substitution per substitutable position: the in-set
/// argmax (original excluded) when its raw probability reaches `threshold`.
pub fn propose_substitutions(
    token_ids: &[TokenId],
    substitutable: &[bool],
    vocab_set: &VocabularySet,
    threshold: f64,
    distributions: &[PositionDistribution],
) -> Result<Vec<TokenSubstitution>> {
    check_alignment(token_ids, substitutable, distributions)?;
    let mut out = Vec::new();
    for dist in distributions {
        let pos = dist.position;
        if !substitutable[pos] {
            continue;
        }
        let original = token_ids[pos];
        if let Some((id, p)) = restricted_argmax(dist, vocab_set, original)? {
            if p >= threshold {
                out.push(TokenSubstitution {
                    position: pos,
                    original_id: original,
                    substituted_id: id,
                    probability: p,
                    language: vocab_set.language.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Sampling variant of [`propose_substitutions`]: draws among all in-set
/// candidates at or above `threshold`, weighted by probability.
pub fn sample_substitutions<R: Rng>(
    token_ids: &[TokenId],
    substitutable: &[bool],
    vocab_set: &VocabularySet,
    threshold: f64,
    distributions: &[PositionDistribution],
    rng: &mut R,
) -> Result<Vec<TokenSubstitution>> {
    check_alignment(token_ids, substitutable, distributions)?;
    let mut out = Vec::new();
    for dist in distributions {
        let pos = dist.position;
        if !substitutable[pos] {
            continue;
        }
        let original = token_ids[pos];
        let candidates: Vec<(TokenId, f64)> = vocab_set
            .token_ids
            .iter()
            .filter(|&&id| id != original)
            .filter_map(|&id| dist.probs.get(id as usize).map(|&p| (id, p)))
            .filter(|&(_, p)| p >= threshold)
            .collect();
        let total: f64 = candidates.iter().map(|c| c.1).sum();
        if candidates.is_empty() || total <= 0.0 {
            continue;
        }
        let mut u = rng.random::<f64>() * total;
        let mut chosen = candidates[candidates.len() - 1];
        for &c in &candidates {
            if u < c.1 {
                chosen = c;
                break;
            }
            u -= c.1;
        }
        out.push(TokenSubstitution {
            position: pos,
            original_id: original,
            substituted_id: chosen.0,
            probability: chosen.1,
            language: vocab_set.language.clone(),
        });
    }
    Ok(out)
}

pub fn apply_substitutions(token_ids: &[TokenId], subs: &[TokenSubstitution]) -> Result<Vec<TokenId>> {
    let mut out = token_ids.to_vec();
    let mut touched = vec![false; token_ids.len()];
    for s in subs {
        let Some(slot) = out.get_mut(s.position) else {
            return Err(SaltError::input(format!(
                "substitution at position {} outside sequence of {}",
                s.position,
                token_ids.len()
            )));
        };
        if std::mem::replace(&mut touched[s.position], true) {
            return Err(SaltError::input(format!("duplicate substitution at position {}", s.position)));
        }
        *slot = s.substituted_id;
    }
    Ok(out)
}

/// Binds a configuration, a scorer and the per-language vocabulary sets.
pub struct Augmenter<'a> {
    config: &'a AugmentationConfig,
    scorer: &'a dyn Scorer,
    vocab_sets: &'a BTreeMap<String, VocabularySet>,
}

struct ScoredSentence {
    ids: Vec<TokenId>,
    substitutable: Vec<bool>,
    distributions: Vec<PositionDistribution>,
}

impl<'a> Augmenter<'a> {
    pub fn new(
        config: &'a AugmentationConfig,
        scorer: &'a dyn Scorer,
        vocab_sets: &'a BTreeMap<String, VocabularySet>,
    ) -> Result<Self> {
        config.validate()?;
        for lang in &config.target_languages {
            match vocab_sets.get(lang) {
                None => return Err(SaltError::config(format!("no vocabulary set for language {lang}"))),
                Some(set) if set.is_empty() => {
                    return Err(SaltError::config(format!("vocabulary set for {lang} is empty")))
                }
                Some(set) => {
                    if let Some(&bad) = set.token_ids.iter().find(|&&id| id as usize >= scorer.vocab_size()) {
                        return Err(SaltError::config(format!(
                            "vocabulary set for {lang} contains id {bad} outside the model vocabulary"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            config,
            scorer,
            vocab_sets,
        })
    }

    fn score_pair(&self, example: &TaskExample) -> Result<[ScoredSentence; 2]> {
        let tok = self.scorer.tokenizer();
        let enc_a = tok.encode(&example.sentence_a);
        let enc_b = tok.encode(&example.sentence_b);
        let mut dists = self.scorer.score_batch(&[&enc_a.ids, &enc_b.ids]).map_err(|e| match e {
            SaltError::Input(m) => SaltError::input(format!("example {}: {m}", example.index)),
            other => other,
        })?;
        let dist_b = dists.pop().ok_or_else(|| SaltError::internal("scorer returned too few rows"))?;
        let dist_a = dists.pop().ok_or_else(|| SaltError::internal("scorer returned too few rows"))?;
        let policy = self.config.substitutable_positions;
        Ok([
            ScoredSentence {
                substitutable: substitutable_mask(&enc_a, tok, policy),
                ids: enc_a.ids,
                distributions: dist_a,
            },
            ScoredSentence {
                substitutable: substitutable_mask(&enc_b, tok, policy),
                ids: enc_b.ids,
                distributions: dist_b,
            },
        ])
    }

    fn propose(&self, sentence: &ScoredSentence, lang: &str, key: [u64; 2]) -> Result<Vec<TokenSubstitution>> {
        let set = &self.vocab_sets[lang];
        let threshold = self.config.threshold_for(lang);
        match self.config.selection {
            Selection::Argmax => {
                propose_substitutions(&sentence.ids, &sentence.substitutable, set, threshold, &sentence.distributions)
            }
            Selection::Sample => {
                let seed = derive_seed(&[self.config.seed, key[0], str_key(lang), key[1]]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                sample_substitutions(
                    &sentence.ids,
                    &sentence.substitutable,
                    set,
                    threshold,
                    &sentence.distributions,
                    &mut rng,
                )
            }
        }
    }

    /// One augmented copy per configured language, in configuration order.
    pub fn augment_example(&self, example: &TaskExample) -> Result<Vec<AugmentedExample>> {
        let [a, b] = self.score_pair(example)?;
        self.config
            .target_languages
            .iter()
            .map(|lang| {
                let substitutions_a = self.propose(&a, lang, [example.index, 0])?;
                let substitutions_b = self.propose(&b, lang, [example.index, 1])?;
                Ok(AugmentedExample {
                    source_index: example.index,
                    language: lang.clone(),
                    token_ids_a: apply_substitutions(&a.ids, &substitutions_a)?,
                    token_ids_b: apply_substitutions(&b.ids, &substitutions_b)?,
                    substitutions_a,
                    substitutions_b,
                    label: example.label,
                })
            })
            .collect()
    }

    /// Augments every example; output order follows input order.
    pub fn augment_all(&self, dataset: &[TaskExample]) -> Result<Vec<AugmentedExample>> {
        let per_example: Vec<Vec<AugmentedExample>> =
            dataset.par_iter().map(|ex| self.augment_example(ex)).collect::<Result<_>>()?;
        Ok(per_example.into_iter().flatten().collect())
    }
}

pub fn augment_example(
    example: &TaskExample,
    config: &AugmentationConfig,
    scorer: &dyn Scorer,
    vocab_sets: &BTreeMap<String, VocabularySet>,
) -> Result<Vec<AugmentedExample>> {
    Augmenter::new(config, scorer, vocab_sets)?.augment_example(example)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageStats {
    pub examples: usize,
    pub substitutions: usize,
    pub tokens: usize,
    /// substitutions / tokens over the whole dataset.
    pub substitution_rate: f64,
    /// Mean of per-example substitution rates.
    pub mean_substitution_rate: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationManifest {
    pub source_examples: usize,
    pub augmented_examples: usize,
    pub source_language: String,
    pub target_languages: Vec<String>,
    pub synonym_threshold: f64,
    pub crosslingual_threshold: f64,
    pub threshold_overrides: BTreeMap<String, f64>,
    pub seed: u64,
    pub tokenizer: String,
    pub languages: BTreeMap<String, LanguageStats>,
}

impl AugmentationManifest {
    pub fn summarize(
        config: &AugmentationConfig,
        tokenizer: &dyn Tokenizer,
        source_examples: usize,
        augmented: &[AugmentedExample],
    ) -> Self {
        let mut languages = BTreeMap::new();
        for lang in &config.target_languages {
            let rows: Vec<&AugmentedExample> = augmented.iter().filter(|a| &a.language == lang).collect();
            let substitutions: usize = rows.iter().map(|a| a.substitution_count()).sum();
            let tokens: usize = rows.iter().map(|a| a.token_count()).sum();
            let per_example: f64 = rows
                .iter()
                .map(|a| a.substitution_count() as f64 / a.token_count().max(1) as f64)
                .sum();
            languages.insert(
                lang.clone(),
                LanguageStats {
                    examples: rows.len(),
                    substitutions,
                    tokens,
                    substitution_rate: substitutions as f64 / tokens.max(1) as f64,
                    mean_substitution_rate: per_example / rows.len().max(1) as f64,
                    threshold: config.threshold_for(lang),
                },
            );
        }
        Self {
            source_examples,
            augmented_examples: augmented.len(),
            source_language: config.source_language.clone(),
            target_languages: config.target_languages.clone(),
            synonym_threshold: config.synonym_threshold,
            crosslingual_threshold: config.crosslingual_threshold,
            threshold_overrides: config.threshold_overrides.clone(),
            seed: config.seed,
            tokenizer: tokenizer.identifier(),
            languages,
        }
    }
}

pub const AUGMENTED_FILE: &str = "augmented.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Augments `dataset` and writes `augmented.jsonl` plus `manifest.json` into
/// `out_dir`. Nothing is left behind on failure.
pub fn augment_dataset(
    dataset: &[TaskExample],
    config: &AugmentationConfig,
    scorer: &dyn Scorer,
    vocab_sets: &BTreeMap<String, VocabularySet>,
    out_dir: &Path,
) -> Result<AugmentationManifest> {
    if dataset.is_empty() {
        return Err(SaltError::input("cannot augment an empty dataset"));
    }
    let augmented = Augmenter::new(config, scorer, vocab_sets)?.augment_all(dataset)?;
    let manifest = AugmentationManifest::summarize(config, scorer.tokenizer(), dataset.len(), &augmented);
    write_augmented(out_dir, &augmented, &manifest)?;
    Ok(manifest)
}

pub fn write_augmented(out_dir: &Path, augmented: &[AugmentedExample], manifest: &AugmentationManifest) -> Result<()> {
    let records: Vec<AugmentedRecord> = augmented.iter().map(AugmentedRecord::from).collect();
    let data_path = out_dir.join(AUGMENTED_FILE);
    jsonl::write_jsonl(&data_path, &records)?;
    if let Err(e) = jsonl::write_json(&out_dir.join(MANIFEST_FILE), manifest) {
        let _ = std::fs::remove_file(&data_path);
        return Err(e);
    }
    Ok(())
}

pub fn read_augmented(dir: &Path) -> Result<Vec<AugmentedExample>> {
    let records: Vec<AugmentedRecord> = jsonl::read_jsonl(&dir.join(AUGMENTED_FILE))?;
    records.into_iter().map(AugmentedExample::try_from).collect()
}

/// One JSONL line of augmented output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedRecord {
    pub source_index: u64,
    pub language: String,
    pub tokens_a: Vec<TokenId>,
    pub tokens_b: Vec<TokenId>,
    pub substitutions: Vec<SubstitutionRecord>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentence {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstitutionRecord {
    pub sentence: Sentence,
    pub pos: usize,
    pub orig: TokenId,
    pub sub: TokenId,
    pub prob: f64,
}

impl From<&AugmentedExample> for AugmentedRecord {
    fn from(a: &AugmentedExample) -> Self {
        let rec = |sentence: Sentence| {
            move |s: &TokenSubstitution| SubstitutionRecord {
                sentence,
                pos: s.position,
                orig: s.original_id,
                sub: s.substituted_id,
                prob: s.probability,
            }
        };
        Self {
            source_index: a.source_index,
            language: a.language.clone(),
            tokens_a: a.token_ids_a.clone(),
            tokens_b: a.token_ids_b.clone(),
            substitutions: a
                .substitutions_a
                .iter()
                .map(rec(Sentence::A))
                .chain(a.substitutions_b.iter().map(rec(Sentence::B)))
                .collect(),
            label: a.label,
        }
    }
}

impl TryFrom<AugmentedRecord> for AugmentedExample {
    type Error = SaltError;

    fn try_from(r: AugmentedRecord) -> Result<Self> {
        let mut substitutions_a = Vec::new();
        let mut substitutions_b = Vec::new();
        for s in r.substitutions {
            let (tokens, bucket) = match s.sentence {
                Sentence::A => (&r.tokens_a, &mut substitutions_a),
                Sentence::B => (&r.tokens_b, &mut substitutions_b),
            };
            if tokens.get(s.pos) != Some(&s.sub) {
                return Err(SaltError::data(format!(
                    "record {} ({}): substitution at {} does not match tokens",
                    r.source_index, r.language, s.pos
                )));
            }
            bucket.push(TokenSubstitution {
                position: s.pos,
                original_id: s.orig,
                substituted_id: s.sub,
                probability: s.prob,
                language: r.language.clone(),
            });
        }
        Ok(Self {
            source_index: r.source_index,
            language: r.language,
            token_ids_a: r.tokens_a,
            token_ids_b: r.tokens_b,
            substitutions_a,
            substitutions_b,
            label: r.label,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::TableScorer;
    use crate::tokenizer::WordPieceTokenizer;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    const WORDS: [&str; 9] = ["cat", "dog", "sat", "chat", "chien", "assis", "kitty", ".", "##s"];

    fn tokenizer() -> WordPieceTokenizer {
        let mut v: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"].map(String::from).to_vec();
        v.extend(WORDS.map(String::from));
        WordPieceTokenizer::new(v, true, "toy").unwrap()
    }

    fn id(name: &str) -> TokenId {
        tokenizer().token_to_id(name).unwrap()
    }

    fn set(lang: &str, words: &[&str]) -> VocabularySet {
        VocabularySet {
            language: lang.into(),
            token_ids: words.iter().map(|w| id(w)).collect(),
            word_count_in: words.len(),
            word_count_total: words.len(),
        }
    }

    /// Each content word keeps most mass on itself, some on its translation
    /// and a little on its synonym.
    fn scorer() -> TableScorer<WordPieceTokenizer> {
        let tok = tokenizer();
        let v = tok.vocab_size();
        let mut rows = vec![vec![1.0 / v as f64; v]; v];
        let mut set_row = |src: &str, pairs: &[(&str, f64)]| {
            let row = &mut rows[id(src) as usize];
            row.iter_mut().for_each(|p| *p = 0.0);
            let rest: f64 = 1.0 - pairs.iter().map(|p| p.1).sum::<f64>();
            for (w, p) in pairs {
                row[id(w) as usize] = *p;
            }
            let n = row.iter().filter(|p| **p == 0.0).count() as f64;
            row.iter_mut().filter(|p| **p == 0.0).for_each(|p| *p = rest / n);
        };
        set_row("cat", &[("cat", 0.9), ("chat", 0.05), ("kitty", 0.02)]);
        set_row("dog", &[("dog", 0.9), ("chien", 0.06)]);
        set_row("sat", &[("sat", 0.95), ("assis", 0.01)]);
        let emb = (0..v).map(|i| vec![i as f32, -(i as f32), 0.5]).collect();
        TableScorer::new(tok, rows, emb, 16).unwrap()
    }

    fn sets() -> BTreeMap<String, VocabularySet> {
        [
            set("en", &["cat", "dog", "sat", "kitty"]),
            set("fr", &["chat", "chien", "assis"]),
        ]
        .into_iter()
        .map(|s| (s.language.clone(), s))
        .collect()
    }

    fn config(langs: &[&str]) -> AugmentationConfig {
        AugmentationConfig {
            target_languages: langs.iter().map(|s| s.to_string()).collect(),
            ..AugmentationConfig::default()
        }
    }

    #[test]
    fn defaults_match_reported_setup() {
        let c = AugmentationConfig::default();
        assert_eq!(c.synonym_threshold, 1e-3);
        assert_eq!(c.crosslingual_threshold, 1e-7);
        assert_eq!(c.target_languages, ["en", "fr", "es", "de"]);
        assert_eq!(c.threshold_for("en"), 1e-3);
        assert_eq!(c.threshold_for("fr"), 1e-7);
        let mut o = c.clone();
        o.threshold_overrides.insert("fr".into(), 0.5);
        assert_eq!(o.threshold_for("fr"), 0.5);
    }

    #[test]
    fn config_problems_are_all_listed() {
        let c = AugmentationConfig {
            synonym_threshold: 0.0,
            crosslingual_threshold: 1.5,
            target_languages: vec![],
            ..AugmentationConfig::default()
        };
        assert_eq!(c.problems().len(), 3);
    }

    #[test]
    fn restriction_picks_in_set_token_over_global_argmax() {
        let s = scorer();
        let ids = vec![id("cat")];
        let d = s.score_positions(&ids).unwrap();
        let subs = propose_substitutions(&ids, &[true], &sets()["fr"], 1e-7, &d).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].substituted_id, id("chat"));
        assert_eq!(subs[0].probability, 0.05);
        assert_eq!(subs[0].language, "fr");
    }

    #[test]
    fn threshold_of_one_yields_nothing() {
        let s = scorer();
        let ids = vec![id("cat"), id("dog"), id("sat")];
        let d = s.score_positions(&ids).unwrap();
        let subs = propose_substitutions(&ids, &[true; 3], &sets()["fr"], 1.0, &d).unwrap();
        assert!(subs.is_empty());
    }

    #[test]
    fn synonym_mode_excludes_original() {
        let s = scorer();
        let ids = vec![id("cat")];
        let d = s.score_positions(&ids).unwrap();
        let subs = propose_substitutions(&ids, &[true], &sets()["en"], 1e-3, &d).unwrap();
        assert_eq!(subs[0].substituted_id, id("kitty"));
    }

    #[test]
    fn misaligned_distributions_are_internal_errors() {
        let s = scorer();
        let d = s.score_positions(&[id("cat"), id("dog")]).unwrap();
        let err = propose_substitutions(&[id("cat")], &[true], &sets()["fr"], 1e-7, &d).unwrap_err();
        assert!(matches!(err, SaltError::Internal(_)));
    }

    #[test]
    fn apply_edge_cases() {
        let ids = vec![5, 6, 7, 8];
        assert_eq!(apply_substitutions(&ids, &[]).unwrap(), ids);
        let sub = |pos, to| TokenSubstitution {
            position: pos,
            original_id: ids[pos],
            substituted_id: to,
            probability: 0.5,
            language: "fr".into(),
        };
        let out = apply_substitutions(&ids, &[sub(2, 11)]).unwrap();
        assert_eq!(out, [5, 6, 11, 8]);
        let all: Vec<_> = (0..4).map(|p| sub(p, 20 + p as TokenId)).collect();
        let out = apply_substitutions(&ids, &all).unwrap();
        assert!(out.iter().zip(&ids).all(|(a, b)| a != b));
        assert!(matches!(apply_substitutions(&ids, &[sub(1, 9), sub(1, 10)]), Err(SaltError::Input(_))));
        let far = TokenSubstitution { position: 9, ..sub(0, 1) };
        assert!(matches!(apply_substitutions(&ids, &[far]), Err(SaltError::Input(_))));
    }

    #[test]
    fn whole_word_policy_skips_punctuation_and_pieces() {
        let tok = tokenizer();
        let enc = tok.encode("cats sat .");
        // "cats" -> cat ##s, then sat, then "."
        assert_eq!(enc.len(), 4);
        assert_eq!(substitutable_mask(&enc, &tok, PositionPolicy::WholeWords), [false, false, true, false]);
        assert_eq!(substitutable_mask(&enc, &tok, PositionPolicy::NonSpecial), [true, true, true, true]);
    }

    #[test]
    fn one_copy_per_language_with_labels_and_lengths_kept() {
        let s = scorer();
        let sets = sets();
        let ex = TaskExample::new(7, "en", "cat sat .", "dog sat", 2);
        let out = augment_example(&ex, &config(&["en", "fr"]), &s, &sets).unwrap();
        assert_eq!(out.len(), 2);
        let fr = &out[1];
        assert_eq!(fr.language, "fr");
        assert_eq!(fr.label, 2);
        assert_eq!(fr.token_ids_a, [id("chat"), id("assis"), id(".")]);
        assert_eq!(fr.token_ids_b, [id("chien"), id("assis")]);
        assert_eq!(fr.original_ids_a(), [id("cat"), id("sat"), id(".")]);
        let en = &out[0];
        assert_eq!(en.token_ids_a[0], id("kitty"));
        // Brute force: a word position changes iff some other English token clears 1e-3.
        let expected = [ex.sentence_a.as_str(), ex.sentence_b.as_str()]
            .iter()
            .flat_map(|t| t.split(' '))
            .filter(|w| *w != ".")
            .filter(|w| {
                let row = s.score_positions(&[id(w)]).unwrap().remove(0);
                sets["en"].token_ids.iter().any(|&t| t != id(w) && row.prob(t) >= 1e-3)
            })
            .count();
        assert_eq!(en.substitution_count(), expected);
    }

    #[test]
    fn nothing_above_threshold_is_a_no_op() {
        let s = scorer();
        let mut cfg = config(&["fr"]);
        cfg.crosslingual_threshold = 0.9;
        let ex = TaskExample::new(0, "en", "cat", "dog", 1);
        let out = augment_example(&ex, &cfg, &s, &sets()).unwrap();
        assert_eq!(out[0].token_ids_a, [id("cat")]);
        assert_eq!(out[0].token_ids_b, [id("dog")]);
        assert_eq!(out[0].substitution_count(), 0);
    }

    #[test]
    fn missing_vocab_set_is_config_error() {
        let s = scorer();
        let ex = TaskExample::new(0, "en", "cat", "dog", 1);
        let err = augment_example(&ex, &config(&["fr", "de"]), &s, &sets()).unwrap_err();
        assert!(matches!(err, SaltError::Config(ref m) if m.contains("de")));
    }

    #[test]
    fn dataset_output_is_deterministic_and_counted() {
        let s = scorer();
        let data: Vec<_> = (0..6)
            .map(|i| TaskExample::new(i, "en", "cat sat", if i % 2 == 0 { "dog" } else { "cat dog" }, i as usize % 3))
            .collect();
        let cfg = config(&["en", "fr"]);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m = augment_dataset(&data, &cfg, &s, &sets(), d1.path()).unwrap();
        augment_dataset(&data, &cfg, &s, &sets(), d2.path()).unwrap();
        for f in [AUGMENTED_FILE, MANIFEST_FILE] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
        }
        assert_eq!(m.augmented_examples, data.len() * 2);
        assert!(m.languages["fr"].substitution_rate > 0.0);
        let back = read_augmented(d1.path()).unwrap();
        assert_eq!(back.len(), 12);
        assert_eq!(back[3].source_index, 1);
        assert_eq!(back[3].language, "fr");
    }

    #[test]
    fn empty_dataset_and_failed_runs_leave_no_output() {
        let s = scorer();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(augment_dataset(&[], &config(&["fr"]), &s, &sets(), dir.path()), Err(SaltError::Input(_))));
        let bad = vec![TaskExample::new(0, "en", "", "cat", 0)];
        assert!(augment_dataset(&bad, &config(&["fr"]), &s, &sets(), dir.path()).is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn sampling_respects_threshold_and_set() {
        let s = scorer();
        let mut cfg = config(&["en", "fr"]);
        cfg.selection = Selection::Sample;
        cfg.seed = 3;
        let ex = TaskExample::new(1, "en", "cat dog sat", "sat", 0);
        let a = augment_example(&ex, &cfg, &s, &sets()).unwrap();
        let b = augment_example(&ex, &cfg, &s, &sets()).unwrap();
        assert_eq!(a, b);
        for aug in &a {
            for sub in aug.substitutions() {
                assert!(sets()[&aug.language].contains(sub.substituted_id));
                assert!(sub.probability >= cfg.threshold_for(&aug.language));
            }
        }
    }

    fn random_dist(v: usize, raw: &[f64]) -> Vec<f64> {
        let total: f64 = raw.iter().take(v).sum();
        raw.iter().take(v).map(|x| x / total).collect()
    }

    proptest! {
        #[test]
        fn proposals_satisfy_set_threshold_and_argmax(
            raw in proptest::collection::vec(1e-9f64..1.0, 14 * 5),
            members in proptest::collection::btree_set(5u32..14, 1..9),
            threshold_exp in -9i32..0,
        ) {
            let v = 14;
            let ids: Vec<TokenId> = vec![5, 6, 7, 8, 9];
            let dists: Vec<PositionDistribution> = (0..5)
                .map(|p| PositionDistribution { position: p, probs: random_dist(v, &raw[p * v..]) })
                .collect();
            let set = VocabularySet { language: "fr".into(), token_ids: members.clone(), word_count_in: 0, word_count_total: 0 };
            let threshold = 10f64.powi(threshold_exp);
            let subs = propose_substitutions(&ids, &[true; 5], &set, threshold, &dists).unwrap();
            let positions: BTreeSet<_> = subs.iter().map(|s| s.position).collect();
            prop_assert_eq!(positions.len(), subs.len());
            for s in &subs {
                prop_assert!(members.contains(&s.substituted_id));
                prop_assert!(s.substituted_id != s.original_id);
                prop_assert!(s.probability >= threshold);
                for &m in &members {
                    if m != s.original_id {
                        prop_assert!(dists[s.position].probs[m as usize] <= s.probability);
                    }
                }
            }
            let higher = propose_substitutions(&ids, &[true; 5], &set, threshold * 10.0, &dists).unwrap();
            prop_assert!(higher.len() <= subs.len());
            let out = apply_substitutions(&ids, &subs).unwrap();
            prop_assert_eq!(out.len(), ids.len());
        }
    }
}
