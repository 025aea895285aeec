//! End-to-end recipe on the synthetic testbed: generate languages, pretrain
//! the toy encoder (cached), augment, fine-tune every variant for every seed,
//! and compare against vanilla fine-tuning.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use salt_core::codeswitch::{AugmentationConfig, AugmentationManifest, AugmentedExample, Augmenter};
use salt_core::config::{config_hash, RunConfig};
use salt_core::error::{Result, SaltError};
use salt_core::eval::{significance, EvaluationReport, GeneralizedReport, TTestResult};
use salt_core::jsonl;
use salt_core::scorer::Scorer;
use salt_core::synth::{self, SyntheticCorpus, NUM_LABELS};
use salt_core::tokenizer::WordPieceTokenizer;
use salt_core::vocab::{build_token_set, VocabularySet, WordList};
use serde::{Deserialize, Serialize};

use crate::bert::{Bert, BertConfig};
use crate::classifier::PairClassifier;
use crate::evaluate::{evaluate, evaluate_generalized};
use crate::mlm::{pretrain_mlm, MlmReport};
use crate::scorer::MlmScorer;
use crate::trainer::{TrainOutcome, Trainer};
use crate::rt;

const DONE_MARKER: &str = "COMPLETE";
const MLM_REPORT: &str = "mlm_report.json";

/// A generated corpus and its pretrained toy encoder.
pub struct Testbed {
    pub root: PathBuf,
    pub corpus: SyntheticCorpus,
    pub tokenizer: WordPieceTokenizer,
    pub pretrained_dir: PathBuf,
    pub vocab_sets: BTreeMap<String, VocabularySet>,
    pub pretrain: MlmReport,
    /// True when the corpus and encoder came from the cache.
    pub reused: bool,
}

/// Bumped whenever corpus generation or pretraining changes behaviour, so
/// stale cache entries are not reused.
const TESTBED_REVISION: u32 = 4;

#[derive(Serialize)]
struct TestbedKey<'a> {
    revision: u32,
    synth: &'a synth::SyntheticLanguageSpec,
    model: &'a salt_core::config::ModelConfig,
    pretrain: &'a salt_core::config::PretrainConfig,
}

/// Cache key over everything that determines the corpus and the encoder.
pub fn testbed_key(config: &RunConfig) -> String {
    config_hash(&TestbedKey {
        revision: TESTBED_REVISION,
        synth: &config.synth,
        model: &config.model,
        pretrain: &config.pretrain,
    })[..16]
        .to_string()
}

pub fn toy_bert_config(config: &RunConfig, vocab_size: usize) -> BertConfig {
    let m = &config.model;
    BertConfig {
        restart_pair_positions: m.restart_pair_positions,
        ..BertConfig::toy(vocab_size, m.hidden_size, m.num_layers, m.num_heads, m.intermediate_size, m.max_seq_len)
    }
}

/// Vocabulary sets for every testbed language from its frequency list.
pub fn testbed_vocab_sets(
    corpus: &SyntheticCorpus,
    tokenizer: &WordPieceTokenizer,
) -> Result<BTreeMap<String, VocabularySet>> {
    corpus
        .frequency_lists
        .iter()
        .map(|(lang, words)| {
            let list = WordList::from_words(lang.clone(), words, usize::MAX);
            Ok((lang.clone(), build_token_set(&list, tokenizer)?))
        })
        .collect()
}

/// Loads the testbed for `config` from `cache_root`, building whatever is missing.
pub fn prepare_testbed(config: &RunConfig, cache_root: &Path, progress: &mut dyn FnMut(&str)) -> Result<Testbed> {
    let root = cache_root.join(format!("testbed-{}", testbed_key(config)));
    let corpus_dir = root.join("corpus");
    let pretrained_dir = root.join("pretrained");
    let mut reused = true;
    let corpus = if corpus_dir.join(DONE_MARKER).exists() {
        synth::read_corpus(&corpus_dir)?
    } else {
        reused = false;
        progress("generating synthetic corpus");
        let c = synth::generate_corpus(&config.synth)?;
        synth::write_corpus(&c, &corpus_dir)?;
        mark_done(&corpus_dir)?;
        c
    };
    let tokenizer = corpus.tokenizer()?;
    let pretrain = if pretrained_dir.join(DONE_MARKER).exists() {
        jsonl::read_json(&pretrained_dir.join(MLM_REPORT))?
    } else {
        reused = false;
        let report = pretrain_toy(config, &corpus, &tokenizer, &pretrained_dir, progress)?;
        mark_done(&pretrained_dir)?;
        report
    };
    let vocab_sets = testbed_vocab_sets(&corpus, &tokenizer)?;
    Ok(Testbed {
        root,
        corpus,
        tokenizer,
        pretrained_dir,
        vocab_sets,
        pretrain,
        reused,
    })
}

fn mark_done(dir: &Path) -> Result<()> {
    let p = dir.join(DONE_MARKER);
    std::fs::write(&p, "").map_err(|e| SaltError::io(&p, e))
}

/// MLM-pretrains a fresh toy encoder on the corpus and saves it to `out`.
pub fn pretrain_toy(
    config: &RunConfig,
    corpus: &SyntheticCorpus,
    tokenizer: &WordPieceTokenizer,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<MlmReport> {
    let bert = rt(Bert::new(
        toy_bert_config(config, tokenizer.tokens().len()),
        config.pretrain.seed,
        DType::F32,
    ))?;
    let start = Instant::now();
    let report = pretrain_mlm(&bert, tokenizer, &corpus.pretrain, &config.pretrain, config.model.max_seq_len, |e, l| {
        progress(&format!("pretrain epoch {e}: mlm loss {l:.4} ({:.0}s)", start.elapsed().as_secs_f64()))
    })?;
    rt(bert.save(out, tokenizer.tokens()))?;
    jsonl::write_json(&out.join(MLM_REPORT), &report)?;
    Ok(report)
}

impl Testbed {
    pub fn scorer(&self) -> Result<MlmScorer> {
        MlmScorer::load(&self.pretrained_dir, true, DType::F32)
    }

    pub fn untrained_scorer(&self, config: &RunConfig, seed: u64) -> Result<MlmScorer> {
        let bert = rt(Bert::new(toy_bert_config(config, self.tokenizer.tokens().len()), seed, DType::F32))?;
        MlmScorer::new(bert, self.tokenizer.clone())
    }

    pub fn augment(&self, config: &AugmentationConfig, scorer: &dyn Scorer) -> Result<Vec<AugmentedExample>> {
        Augmenter::new(config, scorer, &self.vocab_sets)?.augment_all(&self.corpus.train)
    }

    pub fn source_sentences(&self) -> Vec<Vec<u32>> {
        use salt_core::tokenizer::Tokenizer;
        self.corpus.test[&self.corpus.spec.source_language]
            .iter()
            .flat_map(|e| [&e.sentence_a, &e.sentence_b])
            .map(|s| self.tokenizer.encode(s).ids)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Vanilla fine-tuning on the originals.
    Baseline,
    /// Code-switching in every configured language plus mixup.
    Salt,
    /// Code-switching without mixup.
    NoMixup,
    /// Source-language synonym substitution only, with mixup.
    EnOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Salt, Variant::NoMixup, Variant::EnOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Salt => "salt",
            Variant::NoMixup => "no-mixup",
            Variant::EnOnly => "en-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// The configuration this variant trains with.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Baseline => c.train.augmentation = false,
            Variant::Salt => {}
            Variant::NoMixup => c.mixup.enabled = false,
            Variant::EnOnly => c.augment.target_languages = vec![c.augment.source_language.clone()],
        }
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub report: EvaluationReport,
    pub generalized: GeneralizedReport,
    pub seconds: f64,
}

/// Fine-tunes one variant for one seed and evaluates it on every test language.
pub fn run_variant(
    testbed: &Testbed,
    base: &RunConfig,
    variant: Variant,
    seed: u64,
    augmented: &[AugmentedExample],
    out_dir: &Path,
) -> Result<VariantRun> {
    let start = Instant::now();
    let config = variant.apply(base);
    let init = PairClassifier::from_pretrained(&testbed.pretrained_dir, NUM_LABELS, seed, DType::F32)?;
    let trainer = Trainer {
        config: &config,
        seed,
        tokenizer: &testbed.tokenizer,
        dtype: DType::F32,
    };
    let aug = config.train.augmentation.then_some(augmented);
    let (model, outcome) = trainer.train(init, &testbed.corpus.train, &testbed.corpus.dev, aug, out_dir)?;
    let max_len = config.model.max_seq_len;
    let source = &config.augment.source_language;
    let report = evaluate(&model, &testbed.tokenizer, max_len, &testbed.corpus.test, source, seed)?;
    let generalized = evaluate_generalized(&model, &testbed.tokenizer, max_len, &testbed.corpus.test, seed)?;
    Ok(VariantRun {
        variant,
        seed,
        outcome,
        report,
        generalized,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub report: EvaluationReport,
    pub generalized: GeneralizedReport,
    /// Mean target-language accuracy per seed.
    pub target_by_seed: Vec<f64>,
    /// Generalized grand average per seed.
    pub generalized_by_seed: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub variant: Variant,
    pub delta_target: f64,
    pub delta_generalized: f64,
    pub target_test: Option<TTestResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E2eReport {
    pub seeds: Vec<u64>,
    pub testbed_key: String,
    pub manifest: AugmentationManifest,
    pub variants: BTreeMap<Variant, VariantSummary>,
    pub comparisons: Vec<Comparison>,
    pub runs: Vec<VariantRun>,
}

impl E2eReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (v, s) in &self.variants {
            out.push_str(&s.report.to_table(v.name()));
            out.push('\n');
        }
        out.push_str(&format!("{:<10}{:>12}{:>14}{:>10}\n", "vs base", "target avg", "generalized", "p"));
        for c in &self.comparisons {
            let p = c.target_test.as_ref().map_or("-".to_string(), |t| format!("{:.4}", t.p_value));
            out.push_str(&format!(
                "{:<10}{:>+12.2}{:>+14.2}{:>10}\n",
                c.variant.name(),
                c.delta_target * 100.0,
                c.delta_generalized * 100.0,
                p
            ));
        }
        out
    }
}

/// Runs `variants` (baseline always included) over `seeds` and writes
/// `report.json` and `report.txt` into `out_dir`.
pub fn synth_e2e(
    config: &RunConfig,
    seeds: &[u64],
    variants: &[Variant],
    cache_root: &Path,
    out_dir: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<E2eReport> {
    if seeds.is_empty() {
        return Err(SaltError::config("at least one seed is required"));
    }
    let testbed = prepare_testbed(config, cache_root, progress)?;
    let scorer = testbed.scorer()?;
    progress("augmenting training data");
    let augmented = testbed.augment(&config.augment, &scorer)?;
    let manifest =
        AugmentationManifest::summarize(&config.augment, &testbed.tokenizer, testbed.corpus.train.len(), &augmented);
    let mut variants: Vec<Variant> = variants.to_vec();
    if !variants.contains(&Variant::Baseline) {
        variants.insert(0, Variant::Baseline);
    }
    variants.sort();
    variants.dedup();

    let mut runs = Vec::new();
    for &v in &variants {
        for &seed in seeds {
            let dir = out_dir.join(v.name()).join(format!("seed-{seed}"));
            let run = run_variant(&testbed, config, v, seed, &augmented, &dir)?;
            progress(&format!(
                "{} seed {seed}: dev {:.3}, target avg {:.3}, generalized {:.3} ({:.0}s)",
                v.name(),
                run.outcome.best_dev_acc,
                run.report.avg_excl_source,
                run.generalized.average,
                run.seconds
            ));
            runs.push(run);
        }
    }
    let mut summaries = BTreeMap::new();
    for &v in &variants {
        let mine: Vec<&VariantRun> = runs.iter().filter(|r| r.variant == v).collect();
        let report = EvaluationReport::aggregate(&mine.iter().map(|r| r.report.clone()).collect::<Vec<_>>())?;
        let generalized =
            GeneralizedReport::aggregate(&mine.iter().map(|r| r.generalized.clone()).collect::<Vec<_>>())?;
        summaries.insert(
            v,
            VariantSummary {
                target_by_seed: report.per_seed_target_average(),
                generalized_by_seed: generalized.per_seed_average(),
                report,
                generalized,
            },
        );
    }
    let base = &summaries[&Variant::Baseline];
    let comparisons = variants
        .iter()
        .filter(|v| **v != Variant::Baseline)
        .map(|v| {
            let s = &summaries[v];
            let target_test = (seeds.len() >= 2)
                .then(|| significance(&s.target_by_seed, &base.target_by_seed, config.eval.ttest, config.eval.alpha))
                .transpose()?;
            Ok(Comparison {
                variant: *v,
                delta_target: s.report.avg_excl_source - base.report.avg_excl_source,
                delta_generalized: s.generalized.average - base.generalized.average,
                target_test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = E2eReport {
        seeds: seeds.to_vec(),
        testbed_key: testbed_key(config),
        manifest,
        variants: summaries,
        comparisons,
        runs,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| SaltError::io(out_dir, e))?;
    jsonl::write_json(&out_dir.join("report.json"), &report)?;
    let txt = out_dir.join("report.txt");
    std::fs::write(&txt, report.to_text()).map_err(|e| SaltError::io(&txt, e))?;
    Ok(report)
}
