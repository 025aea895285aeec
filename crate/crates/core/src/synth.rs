//! Deterministic synthetic-language testbed.
//!
//! A source language is generated from a small transitive grammar
//! (`the [adj] noun verb the [adj] noun .`). Every other language is a
//! token-level cipher of the source: each content surface form maps to a fresh
//! pseudo-word, while the article and the full stop are shared. Some concepts
//! have two surface forms (synonyms). The cipher tables form an exact gold
//! lexicon for checking distilled substitutions.
//!
//! The pretraining corpus mixes monolingual sentences with parallel pairs
//! whose second half is a code-mixed rendering of the first. The task is
//! paraphrase identification over sentence pairs whose labels do not depend on
//! the language: a paraphrase restates the clause (synonyms re-drawn), a
//! non-paraphrase also swaps one noun for its paired noun or the verb for its
//! antonym.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codeswitch::TokenSubstitution;
use crate::error::{Result, SaltError};
use crate::jsonl;
use crate::seed::{derive_seed, str_key};
use crate::tokenizer::{Tokenizer, WordPieceTokenizer, CLS, MASK, PAD, SEP, UNK};
use crate::types::{TaskExample, TokenId};

pub const ARTICLE: &str = "the";
pub const STOP: &str = ".";

pub const PARAPHRASE: usize = 0;
pub const NOT_PARAPHRASE: usize = 1;
pub const NUM_LABELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self {
            train: 1000,
            dev: 300,
            test: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticLanguageSpec {
    pub seed: u64,
    pub source_language: String,
    /// All languages including the source.
    pub languages: Vec<String>,
    pub nouns: usize,
    /// Verbs come in antonym pairs.
    pub verb_pairs: usize,
    pub adjectives: usize,
    /// Share of concepts that get a second (synonym) surface form.
    pub synonym_fraction: f64,
    /// Single-sentence pretraining examples, spread evenly over languages.
    pub monolingual_sentences: usize,
    /// Pretraining pairs: a sentence and its code-mixed rendering.
    pub parallel_pairs: usize,
    /// Probability that a content token of the code-mixed half is rendered in a
    /// language other than the one of the first half.
    pub code_mix_rate: f64,
    pub task: TaskSizes,
}

impl Default for SyntheticLanguageSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            source_language: "en".into(),
            languages: ["en", "fr", "es", "de", "ru", "sw"].map(String::from).to_vec(),
            nouns: 12,
            verb_pairs: 6,
            adjectives: 0,
            synonym_fraction: 0.25,
            monolingual_sentences: 2000,
            parallel_pairs: 10000,
            code_mix_rate: 0.8,
            task: TaskSizes::default(),
        }
    }
}

impl SyntheticLanguageSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.languages.len() < 2 {
            out.push("languages: need the source and at least one more".into());
        }
        if !self.languages.contains(&self.source_language) {
            out.push(format!("source_language: {} not among languages", self.source_language));
        }
        if self.languages.iter().collect::<BTreeSet<_>>().len() != self.languages.len() {
            out.push("languages: duplicates".into());
        }
        if self.nouns < 2 {
            out.push("nouns: need at least 2 for neutral hypotheses".into());
        }
        if self.verb_pairs < 1 {
            out.push("verb_pairs: need at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.synonym_fraction) {
            out.push("synonym_fraction: not in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.code_mix_rate) {
            out.push("code_mix_rate: not in [0, 1]".into());
        }
        if self.task.train == 0 || self.task.dev == 0 || self.task.test == 0 {
            out.push("task: split sizes must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(SaltError::config(p.join("; ")))
        }
    }

    fn content_forms(&self) -> usize {
        let concepts = self.nouns + 2 * self.verb_pairs + self.adjectives;
        concepts + (concepts as f64 * self.synonym_fraction).ceil() as usize
    }

    pub fn target_languages(&self) -> Vec<String> {
        self.languages.iter().filter(|l| **l != self.source_language).cloned().collect()
    }
}

/// Exact token-level translation tables from the source language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLexicon {
    pub source_language: String,
    /// `maps[lang][source_word] = target_word`, over the full content vocabulary.
    pub maps: BTreeMap<String, BTreeMap<String, String>>,
}

impl GoldLexicon {
    pub fn translate<'a>(&'a self, language: &str, word: &'a str) -> Option<&'a str> {
        if language == self.source_language {
            return self.maps.values().next()?.contains_key(word).then_some(word);
        }
        self.maps.get(language)?.get(word).map(String::as_str)
    }

    pub fn inverse(&self, language: &str) -> Option<BTreeMap<String, String>> {
        Some(self.maps.get(language)?.iter().map(|(s, t)| (t.clone(), s.clone())).collect())
    }

    pub fn is_bijective(&self) -> bool {
        self.maps.values().all(|m| m.values().collect::<BTreeSet<_>>().len() == m.len())
    }

    pub fn source_words(&self) -> Vec<&str> {
        self.maps.values().next().map(|m| m.keys().map(String::as_str).collect()).unwrap_or_default()
    }

    pub fn to_ids(&self, tokenizer: &dyn Tokenizer) -> Result<IdLexicon> {
        let id = |w: &str| {
            tokenizer
                .token_to_id(w)
                .ok_or_else(|| SaltError::data(format!("lexicon word {w} not in tokenizer vocabulary")))
        };
        let mut maps = BTreeMap::new();
        for (lang, m) in &self.maps {
            let mut ids = HashMap::new();
            for (s, t) in m {
                ids.insert(id(s)?, id(t)?);
            }
            maps.insert(lang.clone(), ids);
        }
        Ok(IdLexicon { maps })
    }
}

/// [`GoldLexicon`] resolved to token ids.
#[derive(Debug, Clone)]
pub struct IdLexicon {
    pub maps: BTreeMap<String, HashMap<TokenId, TokenId>>,
}

impl IdLexicon {
    pub fn translate(&self, language: &str, id: TokenId) -> Option<TokenId> {
        self.maps.get(language)?.get(&id).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub total: usize,
    pub matched: usize,
    /// Substitutions whose original token has no lexicon entry (counted as misses).
    pub out_of_lexicon: usize,
    pub precision: f64,
}

/// Fraction of substitutions equal to the gold translation of the original token.
pub fn substitution_precision(proposals: &[TokenSubstitution], lexicon: &IdLexicon) -> PrecisionReport {
    let mut matched = 0;
    let mut out_of_lexicon = 0;
    for s in proposals {
        match lexicon.translate(&s.language, s.original_id) {
            Some(gold) if gold == s.substituted_id => matched += 1,
            Some(_) => {}
            None => out_of_lexicon += 1,
        }
    }
    PrecisionReport {
        total: proposals.len(),
        matched,
        out_of_lexicon,
        precision: if proposals.is_empty() {
            0.0
        } else {
            matched as f64 / proposals.len() as f64
        },
    }
}

/// One pretraining example: a single sentence, or a sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub language: String,
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticLanguageSpec,
    /// Tokenizer vocabulary, specials first.
    pub vocabulary: Vec<String>,
    pub lexicon: GoldLexicon,
    pub pretrain: Vec<PretrainRecord>,
    /// Per-language word lists, most frequent first.
    pub frequency_lists: BTreeMap<String, Vec<String>>,
    pub train: Vec<TaskExample>,
    pub dev: Vec<TaskExample>,
    /// Index-aligned translations of the same test examples.
    pub test: BTreeMap<String, Vec<TaskExample>>,
}

impl SyntheticCorpus {
    pub fn tokenizer(&self) -> Result<WordPieceTokenizer> {
        WordPieceTokenizer::new(self.vocabulary.clone(), true, format!("synthetic:{}", self.spec.seed))
    }
}

#[derive(Debug, Clone)]
struct Inventory {
    /// Source-language surface forms per concept.
    nouns: Vec<Vec<String>>,
    verbs: Vec<Vec<String>>,
    adjectives: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy)]
struct Phrase {
    adjective: Option<(usize, usize)>,
    noun: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct Clause {
    subject: Phrase,
    verb: (usize, usize),
    object: Phrase,
}

fn pseudo_words(rng: &mut ChaCha8Rng, count: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
        }
        if w != ARTICLE && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Nouns are paired like verbs (which pair with their antonyms).
fn partner(noun: usize, count: usize) -> usize {
    if noun ^ 1 < count {
        noun ^ 1
    } else {
        noun - 1
    }
}

impl Inventory {
    fn generate(spec: &SyntheticLanguageSpec, rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> Self {
        let concepts = spec.nouns + 2 * spec.verb_pairs + spec.adjectives;
        let mut words = pseudo_words(rng, spec.content_forms(), taken).into_iter();
        let n_syn = spec.content_forms() - concepts;
        let mut order: Vec<usize> = (0..concepts).collect();
        order.shuffle(rng);
        let with_synonym: BTreeSet<usize> = order.into_iter().take(n_syn).collect();
        let mut forms: Vec<Vec<String>> = (0..concepts).map(|_| vec![words.next().expect("counted")]).collect();
        for &c in &with_synonym {
            forms[c].push(words.next().expect("counted"));
        }
        let adjectives = forms.split_off(spec.nouns + 2 * spec.verb_pairs);
        let verbs = forms.split_off(spec.nouns);
        Self {
            nouns: forms,
            verbs,
            adjectives,
        }
    }

    fn all_forms(&self) -> impl Iterator<Item = &String> {
        self.nouns.iter().chain(&self.verbs).chain(&self.adjectives).flatten()
    }

    fn pick(rng: &mut ChaCha8Rng, table: &[Vec<String>], concept: usize) -> (usize, usize) {
        (concept, rng.random_range(0..table[concept].len()))
    }

    fn phrase(&self, rng: &mut ChaCha8Rng, noun: usize) -> Phrase {
        let adjective = if !self.adjectives.is_empty() && rng.random_bool(0.5) {
            let a = rng.random_range(0..self.adjectives.len());
            Some(Self::pick(rng, &self.adjectives, a))
        } else {
            None
        };
        Phrase {
            adjective,
            noun: Self::pick(rng, &self.nouns, noun),
        }
    }

    fn clause(&self, rng: &mut ChaCha8Rng) -> Clause {
        let subj = rng.random_range(0..self.nouns.len());
        let mut obj = rng.random_range(0..self.nouns.len() - 1);
        if obj >= subj {
            obj += 1;
        }
        let subject = self.phrase(rng, subj);
        let verb = rng.random_range(0..self.verbs.len());
        Clause {
            subject,
            verb: Self::pick(rng, &self.verbs, verb),
            object: self.phrase(rng, obj),
        }
    }

    /// Re-draws the surface forms of the same concepts, keeping the clause shape.
    fn restate(&self, rng: &mut ChaCha8Rng, c: &Clause) -> Clause {
        let re = |rng: &mut ChaCha8Rng, p: &Phrase| Phrase {
            adjective: p.adjective.map(|(a, _)| Self::pick(rng, &self.adjectives, a)),
            noun: Self::pick(rng, &self.nouns, p.noun.0),
        };
        Clause {
            subject: re(rng, &c.subject),
            verb: Self::pick(rng, &self.verbs, c.verb.0),
            object: re(rng, &c.object),
        }
    }

    /// A restatement, or for [`NOT_PARAPHRASE`] a restatement with one slot
    /// (subject, verb or object, uniformly) swapped for its partner concept.
    fn hypothesis(&self, rng: &mut ChaCha8Rng, premise: &Clause, label: usize) -> Clause {
        let mut h = self.restate(rng, premise);
        if label == NOT_PARAPHRASE {
            let n = self.nouns.len();
            match rng.random_range(0..3) {
                0 => h.subject.noun = Self::pick(rng, &self.nouns, partner(premise.subject.noun.0, n)),
                1 => h.verb = Self::pick(rng, &self.verbs, premise.verb.0 ^ 1),
                _ => h.object.noun = Self::pick(rng, &self.nouns, partner(premise.object.noun.0, n)),
            }
        }
        h
    }

    fn render_phrase<'s>(&'s self, out: &mut Vec<&'s str>, p: &Phrase) {
        out.push(ARTICLE);
        if let Some((a, f)) = p.adjective {
            out.push(&self.adjectives[a][f]);
        }
        out.push(&self.nouns[p.noun.0][p.noun.1]);
    }

    fn render(&self, c: &Clause) -> Vec<&str> {
        let mut out = Vec::with_capacity(8);
        self.render_phrase(&mut out, &c.subject);
        out.push(&self.verbs[c.verb.0][c.verb.1]);
        self.render_phrase(&mut out, &c.object);
        out.push(STOP);
        out
    }
}

struct Ciphers<'a> {
    lexicon: &'a GoldLexicon,
}

impl Ciphers<'_> {
    fn word<'w>(&'w self, lang: &str, w: &'w str) -> &'w str {
        if lang == self.lexicon.source_language {
            return w;
        }
        self.lexicon.maps[lang].get(w).map(String::as_str).unwrap_or(w)
    }

    fn sentence(&self, lang: &str, words: &[&str]) -> String {
        words.iter().map(|w| self.word(lang, w)).collect::<Vec<_>>().join(" ")
    }
}

/// Generates the complete testbed from `spec`.
pub fn generate_corpus(spec: &SyntheticLanguageSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let stream = |name: &str| ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, str_key(name)]));
    let mut taken = BTreeSet::new();
    let mut rng = stream("inventory");
    let inventory = Inventory::generate(spec, &mut rng, &mut taken);
    let source_forms: Vec<String> = inventory.all_forms().cloned().collect();

    let mut maps = BTreeMap::new();
    for lang in spec.target_languages() {
        let mut rng = stream(&format!("cipher:{lang}"));
        let targets = pseudo_words(&mut rng, source_forms.len(), &mut taken);
        maps.insert(lang, source_forms.iter().cloned().zip(targets).collect::<BTreeMap<_, _>>());
    }
    let lexicon = GoldLexicon {
        source_language: spec.source_language.clone(),
        maps,
    };
    let ciphers = Ciphers { lexicon: &lexicon };

    let mut vocabulary: Vec<String> = [PAD, UNK, CLS, SEP, MASK, ARTICLE, STOP].map(String::from).to_vec();
    for lang in &spec.languages {
        for w in &source_forms {
            vocabulary.push(ciphers.word(lang, w).to_string());
        }
    }

    // Pretraining corpus.
    let mut rng = stream("pretrain");
    let mut pretrain = Vec::with_capacity(spec.monolingual_sentences + spec.parallel_pairs);
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for i in 0..spec.monolingual_sentences {
        let lang = &spec.languages[i % spec.languages.len()];
        let clause = inventory.clause(&mut rng);
        let words = inventory.render(&clause);
        let counter = counts.entry(lang.clone()).or_default();
        for w in &words {
            *counter.entry(ciphers.word(lang, w).to_string()).or_default() += 1;
        }
        pretrain.push(PretrainRecord {
            language: lang.clone(),
            text_a: ciphers.sentence(lang, &words),
            text_b: None,
        });
    }
    for _ in 0..spec.parallel_pairs {
        let lang = &spec.languages[rng.random_range(0..spec.languages.len())];
        let clause = inventory.clause(&mut rng);
        let first = inventory.render(&clause);
        let aligned = inventory.restate(&mut rng, &clause);
        let second: Vec<String> = inventory
            .render(&aligned)
            .iter()
            .map(|w| {
                let l = if rng.random_bool(spec.code_mix_rate) {
                    &spec.languages[rng.random_range(0..spec.languages.len())]
                } else {
                    lang
                };
                ciphers.word(l, w).to_string()
            })
            .collect();
        pretrain.push(PretrainRecord {
            language: format!("{lang}+mix"),
            text_a: ciphers.sentence(lang, &first),
            text_b: Some(second.join(" ")),
        });
    }

    let mut frequency_lists = BTreeMap::new();
    for lang in &spec.languages {
        let counter = counts.remove(lang).unwrap_or_default();
        let mut ranked: Vec<(String, usize)> = counter.into_iter().filter(|(w, _)| w != STOP).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut list: Vec<String> = ranked.into_iter().map(|(w, _)| w).collect();
        let present: BTreeSet<String> = list.iter().cloned().collect();
        for w in &source_forms {
            let t = ciphers.word(lang, w);
            if !present.contains(t) {
                list.push(t.to_string());
            }
        }
        frequency_lists.insert(lang.clone(), list);
    }

    // Task data: labels cycle over the classes, then the order is shuffled.
    let task_examples = |name: &str, n: usize, offset: u64| {
        let mut rng = stream(name);
        let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_LABELS).collect();
        labels.shuffle(&mut rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let p = inventory.clause(&mut rng);
                let h = inventory.hypothesis(&mut rng, &p, label);
                (offset + i as u64, inventory.render(&p), inventory.render(&h), label)
            })
            .map(|(i, p, h, l)| (i, p.join(" "), h.join(" "), l))
            .collect::<Vec<_>>()
    };
    let src = &spec.source_language;
    let to_examples = |rows: &[(u64, String, String, usize)], lang: &str| -> Vec<TaskExample> {
        rows.iter()
            .map(|(i, p, h, l)| {
                let pw: Vec<&str> = p.split(' ').collect();
                let hw: Vec<&str> = h.split(' ').collect();
                TaskExample::new(*i, lang, ciphers.sentence(lang, &pw), ciphers.sentence(lang, &hw), *l)
            })
            .collect()
    };
    let train_rows = task_examples("train", spec.task.train, 0);
    let dev_rows = task_examples("dev", spec.task.dev, 1_000_000);
    let test_rows = task_examples("test", spec.task.test, 2_000_000);
    let train = to_examples(&train_rows, src);
    let dev = to_examples(&dev_rows, src);
    let test = spec
        .languages
        .iter()
        .map(|l| (l.clone(), to_examples(&test_rows, l)))
        .collect();

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        vocabulary,
        lexicon,
        pretrain,
        frequency_lists,
        train,
        dev,
        test,
    })
}

pub const SPEC_FILE: &str = "spec.yaml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const PRETRAIN_FILE: &str = "corpus.jsonl";
pub const LEXICON_FILE: &str = "lexicon.json";

pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| SaltError::io(p, e));
    mkdir(&dir.join("freq"))?;
    mkdir(&dir.join("task/test"))?;
    let spec = serde_yaml::to_string(&corpus.spec).map_err(|e| SaltError::internal(e.to_string()))?;
    jsonl::atomic_write(&dir.join(SPEC_FILE), |w| {
        use std::io::Write;
        w.write_all(spec.as_bytes()).map_err(|e| SaltError::io(dir.join(SPEC_FILE), e))
    })?;
    let vocab = dir.join(VOCAB_FILE);
    fs::write(&vocab, corpus.vocabulary.join("\n") + "\n").map_err(|e| SaltError::io(&vocab, e))?;
    jsonl::write_jsonl(&dir.join(PRETRAIN_FILE), &corpus.pretrain)?;
    jsonl::write_json(&dir.join(LEXICON_FILE), &corpus.lexicon)?;
    for (lang, words) in &corpus.frequency_lists {
        let body: String = words.iter().enumerate().map(|(i, w)| format!("{}\t{w}\n", i + 1)).collect();
        let p = dir.join("freq").join(format!("{lang}.txt"));
        fs::write(&p, body).map_err(|e| SaltError::io(&p, e))?;
    }
    jsonl::write_jsonl(&dir.join("task/train.jsonl"), &corpus.train)?;
    jsonl::write_jsonl(&dir.join("task/dev.jsonl"), &corpus.dev)?;
    for (lang, set) in &corpus.test {
        jsonl::write_jsonl(&dir.join(format!("task/test/{lang}.jsonl")), set)?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<SyntheticCorpus> {
    let spec_path = dir.join(SPEC_FILE);
    let spec_text = fs::read_to_string(&spec_path).map_err(|e| SaltError::io(&spec_path, e))?;
    let spec: SyntheticLanguageSpec =
        serde_yaml::from_str(&spec_text).map_err(|e| SaltError::data(format!("{}: {e}", spec_path.display())))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocabulary = fs::read_to_string(&vocab_path)
        .map_err(|e| SaltError::io(&vocab_path, e))?
        .lines()
        .map(String::from)
        .collect();
    let mut frequency_lists = BTreeMap::new();
    for lang in &spec.languages {
        let list = crate::vocab::load_frequency_list(&dir.join("freq").join(format!("{lang}.txt")), lang, usize::MAX)?;
        frequency_lists.insert(lang.clone(), list.words);
    }
    let mut test = BTreeMap::new();
    for lang in &spec.languages {
        test.insert(lang.clone(), jsonl::read_jsonl(&dir.join(format!("task/test/{lang}.jsonl")))?);
    }
    Ok(SyntheticCorpus {
        vocabulary,
        lexicon: jsonl::read_json(&dir.join(LEXICON_FILE))?,
        pretrain: jsonl::read_jsonl(&dir.join(PRETRAIN_FILE))?,
        frequency_lists,
        train: jsonl::read_jsonl(&dir.join("task/train.jsonl"))?,
        dev: jsonl::read_jsonl(&dir.join("task/dev.jsonl"))?,
        test,
        spec,
    })
}
