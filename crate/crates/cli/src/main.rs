use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use salt_core::codeswitch::{augment_dataset, read_augmented};
use salt_core::config::RunConfig;
use salt_core::error::{Result, SaltError};
use salt_core::jsonl;
use salt_core::synth;
use salt_core::tokenizer::WordPieceTokenizer;
use salt_core::types::TaskExample;
use salt_core::vocab::{build_token_set, load_frequency_list, VocabularySet};
use salt_nn::bert::VOCAB_FILE;
use salt_nn::classifier::{Classifier, PairClassifier};
use salt_nn::scorer::MlmScorer;
use salt_nn::testbed::{self, Variant};
use salt_nn::trainer::{num_labels, Trainer};

const CACHE_ENV: &str = "SALT_CACHE_DIR";

#[derive(Parser)]
#[command(name = "salt", version, about = "Self-augmented code-switching and embedding mixup for zero-shot cross-lingual transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// YAML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::from_yaml_str("", &self.overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compile a frequency list into the single-token vocabulary set of one language.
    BuildVocab {
        #[arg(long)]
        lang: String,
        #[arg(long)]
        list: PathBuf,
        #[arg(long, default_value_t = salt_core::vocab::DEFAULT_WORD_LIMIT)]
        limit: usize,
        /// Output JSON file, or a directory that receives `{lang}.json`.
        #[arg(long)]
        out: PathBuf,
        /// Model directory whose vocab.txt defines the tokenizer (default: model.checkpoint).
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Code-switch a JSONL task dataset with the configured masked language model.
    Augment {
        #[arg(long)]
        data: PathBuf,
        /// Directory of `{lang}.json` vocabulary sets (default: vocab.dir).
        #[arg(long)]
        vocab_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune a sentence-pair classifier from model.checkpoint.
    Train {
        /// Directory with train.jsonl and dev.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `augment`; required unless train.augmentation=false.
        #[arg(long)]
        augmented: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training seed (default: the config seed).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Zero-shot accuracy of a checkpoint on every `{lang}.jsonl` test set.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Also evaluate every premise/hypothesis language pair.
        #[arg(long)]
        generalized: bool,
        /// Report directory (default: <ckpt>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy matrix over premise/hypothesis language pairs.
    EvalGeneralized {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic cipher-language testbed.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Run baseline, SALT and the ablations on the testbed over several seeds.
    SynthE2e {
        /// Seeds as a list or inclusive range: `1..5`, `1,2,7`.
        #[arg(long, default_value = "1..5")]
        seed: String,
        /// Variants to run besides the baseline.
        #[arg(long, value_delimiter = ',', default_value = "salt,no-mixup,en-only")]
        variants: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Generate a corpus, lexicon, frequency lists and task data.
    Gen {
        /// Language spec YAML (default: the built-in testbed spec).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// MLM-pretrain the toy encoder on a generated corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SaltError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| SaltError::io(path, e))
}

fn checkpoint(config: &RunConfig) -> Result<&Path> {
    config
        .model
        .checkpoint
        .as_deref()
        .ok_or_else(|| SaltError::config("model.checkpoint: required for this command"))
}

fn cache_root(config: &RunConfig) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| config.output_dir.join("cache"))
}

/// `1..5` (inclusive) or a comma-separated list.
fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || SaltError::config(format!("--seed: cannot parse {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

/// First existing file among `dir/name` and `dir/task/name`.
fn find_in(dir: &Path, name: &str) -> Result<PathBuf> {
    let candidates = [dir.join(name), dir.join("task").join(name)];
    candidates.iter().find(|p| p.exists()).cloned().ok_or_else(|| {
        SaltError::io(
            &candidates[0],
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        )
    })
}

/// Every `{lang}.jsonl` under `dir`, `dir/test` or `dir/task/test`.
fn load_test_sets(dir: &Path) -> Result<BTreeMap<String, Vec<TaskExample>>> {
    let root = [dir.join("test"), dir.join("task/test")]
        .into_iter()
        .find(|p| p.is_dir())
        .unwrap_or_else(|| dir.to_path_buf());
    let entries = std::fs::read_dir(&root).map_err(|e| SaltError::io(&root, e))?;
    let mut sets = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| SaltError::io(&root, e))?.path();
        if path.extension().is_some_and(|x| x == "jsonl") {
            let lang = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            sets.insert(lang, jsonl::read_jsonl(&path)?);
        }
    }
    if sets.is_empty() {
        return Err(SaltError::input(format!("{}: no {{lang}}.jsonl test files", root.display())));
    }
    Ok(sets)
}

fn load_vocab_dir(dir: &Path, languages: &[String]) -> Result<BTreeMap<String, VocabularySet>> {
    languages
        .iter()
        .map(|l| Ok((l.clone(), VocabularySet::load(&dir.join(format!("{l}.json")))?)))
        .collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildVocab {
            lang,
            list,
            limit,
            out,
            model,
            cfg,
        } => {
            let config = cfg.load()?;
            let model = match model {
                Some(m) => m,
                None => checkpoint(&config)?.to_path_buf(),
            };
            let tokenizer = WordPieceTokenizer::from_vocab_file(&model.join(VOCAB_FILE), config.model.lowercase)?;
            let words = load_frequency_list(&list, &lang, limit)?;
            let set = build_token_set(&words, &tokenizer)?;
            let path = if out.extension().is_some_and(|x| x == "json") {
                out
            } else {
                mkdir(&out)?;
                out.join(format!("{lang}.json"))
            };
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                mkdir(parent)?;
                config.write_snapshot(parent)?;
            }
            set.save(&path)?;
            println!(
                "{lang}: {} tokens from {}/{} words (coverage {:.3}) -> {}",
                set.len(),
                set.word_count_in,
                set.word_count_total,
                set.coverage(),
                path.display()
            );
            Ok(())
        }
        Command::Augment {
            data,
            vocab_dir,
            out,
            cfg,
        } => {
            let config = cfg.load()?;
            let dir = vocab_dir
                .or_else(|| config.vocab.dir.clone())
                .ok_or_else(|| SaltError::config("vocab.dir: required (or pass --vocab-dir)"))?;
            let dataset: Vec<TaskExample> = jsonl::read_jsonl(&data)?;
            let vocab_sets = load_vocab_dir(&dir, &config.augment.target_languages)?;
            let scorer = MlmScorer::load(checkpoint(&config)?, config.model.lowercase, candle_dtype())?;
            mkdir(&out)?;
            config.write_snapshot(&out)?;
            let manifest = augment_dataset(&dataset, &config.augment, &scorer, &vocab_sets, &out)?;
            println!("{}", serde_json_pretty(&manifest)?);
            Ok(())
        }
        Command::Train {
            data,
            augmented,
            out,
            seed,
            cfg,
        } => {
            let config = cfg.load()?;
            let seed = seed.unwrap_or(config.seed);
            let train: Vec<TaskExample> = jsonl::read_jsonl(&find_in(&data, "train.jsonl")?)?;
            let dev: Vec<TaskExample> = jsonl::read_jsonl(&find_in(&data, "dev.jsonl")?)?;
            let augmented = match (config.train.augmentation, augmented) {
                (true, Some(dir)) => Some(read_augmented(&dir)?),
                (true, None) => {
                    return Err(SaltError::config(
                        "--augmented is required unless train.augmentation=false",
                    ))
                }
                (false, _) => None,
            };
            let ckpt = checkpoint(&config)?;
            let tokenizer = WordPieceTokenizer::from_vocab_file(&ckpt.join(VOCAB_FILE), config.model.lowercase)?;
            let init = PairClassifier::from_pretrained(ckpt, num_labels(&[&train, &dev]), seed, candle_dtype())?;
            mkdir(&out)?;
            config.write_snapshot(&out)?;
            let trainer = Trainer {
                config: &config,
                seed,
                tokenizer: &tokenizer,
                dtype: candle_dtype(),
            };
            let (_, outcome) = trainer.train(init, &train, &dev, augmented.as_deref(), &out)?;
            for e in &outcome.log {
                println!("epoch {:>3}  loss {:.4}  dev {:.4}", e.epoch, e.train_loss, e.dev_acc);
            }
            println!(
                "best epoch {} (dev {:.4}), {} instances per epoch -> {}",
                outcome.best_epoch,
                outcome.best_dev_acc,
                outcome.instances_per_epoch,
                out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            ckpt,
            data_dir,
            generalized,
            out,
        } => evaluate(&ckpt, &data_dir, out, true, generalized),
        Command::EvalGeneralized { ckpt, data_dir, out } => evaluate(&ckpt, &data_dir, out, false, true),
        Command::Synth { command } => match command {
            SynthCommand::Gen { spec, out } => {
                let spec: synth::SyntheticLanguageSpec = match spec {
                    Some(p) => {
                        let text = std::fs::read_to_string(&p).map_err(|e| SaltError::io(&p, e))?;
                        serde_yaml_from(&text, &p)?
                    }
                    None => Default::default(),
                };
                let corpus = synth::generate_corpus(&spec)?;
                synth::write_corpus(&corpus, &out)?;
                println!(
                    "{} languages, {} vocabulary entries, {} pretraining records, {} train / {} dev / {} test per language -> {}",
                    spec.languages.len(),
                    corpus.vocabulary.len(),
                    corpus.pretrain.len(),
                    corpus.train.len(),
                    corpus.dev.len(),
                    spec.task.test,
                    out.display()
                );
                Ok(())
            }
            SynthCommand::Pretrain { corpus, out, cfg } => {
                let config = cfg.load()?;
                let corpus = synth::read_corpus(&corpus)?;
                let tokenizer = corpus.tokenizer()?;
                mkdir(&out)?;
                config.write_snapshot(&out)?;
                let report = testbed::pretrain_toy(&config, &corpus, &tokenizer, &out, &mut |m| progress(m))?;
                println!("{} steps over {} sequences -> {}", report.steps, report.sequences, out.display());
                Ok(())
            }
        },
        Command::SynthE2e {
            seed,
            variants,
            out,
            cfg,
        } => {
            let config = cfg.load()?;
            let seeds = parse_seeds(&seed)?;
            let variants = variants
                .iter()
                .map(|v| Variant::parse(v).ok_or_else(|| SaltError::config(format!("--variants: unknown variant {v}"))))
                .collect::<Result<Vec<_>>>()?;
            let out = out.unwrap_or_else(|| config.output_dir.join("synth-e2e"));
            mkdir(&out)?;
            config.write_snapshot(&out)?;
            let report = testbed::synth_e2e(&config, &seeds, &variants, &cache_root(&config), &out, &mut |m| progress(m))?;
            print!("{}", report.to_text());
            println!("report -> {}", out.join("report.json").display());
            Ok(())
        }
    }
}

fn evaluate(ckpt: &Path, data_dir: &Path, out: Option<PathBuf>, per_language: bool, generalized: bool) -> Result<()> {
    let classifier = Classifier::load(ckpt)?;
    let sets = load_test_sets(data_dir)?;
    let out = out.unwrap_or_else(|| ckpt.join("eval"));
    mkdir(&out)?;
    if per_language {
        let report = classifier.evaluate(&sets)?;
        jsonl::write_json(&out.join("report.json"), &report)?;
        let table = report.to_table("accuracy");
        write_text(&out.join("report.txt"), &table)?;
        print!("{table}");
    }
    if generalized {
        let report = classifier.evaluate_generalized(&sets)?;
        jsonl::write_json(&out.join("generalized.json"), &report)?;
        let table = report.to_table();
        write_text(&out.join("generalized.txt"), &table)?;
        print!("{table}");
    }
    Ok(())
}

fn candle_dtype() -> salt_nn::DType {
    salt_nn::DType::F32
}

fn serde_json_pretty<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| SaltError::internal(e.to_string()))
}

fn serde_yaml_from<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_yaml::from_str(text).map_err(|e| SaltError::config(format!("{}: {e}", path.display())))
}
