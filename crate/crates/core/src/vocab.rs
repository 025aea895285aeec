//! Per-language frequency word lists and the token-id sets compiled from them.
//!
//! A target language's [`VocabularySet`] holds the ids of every list word that
//! the model tokenizer maps to exactly one non-special token. Multi-piece words
//! are dropped so that substitution never changes sequence length.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaltError};
use crate::tokenizer::Tokenizer;
use crate::types::TokenId;

pub const DEFAULT_WORD_LIMIT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordList {
    pub language: String,
    /// Case-folded, unique, most frequent first.
    pub words: Vec<String>,
    pub source_path: PathBuf,
}

impl WordList {
    /// Case-folds and deduplicates `words`, keeping the first occurrence and at
    /// most `limit` entries.
    pub fn from_words<I, S>(language: impl Into<String>, words: I, limit: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for w in words {
            if out.len() >= limit {
                break;
            }
            let folded = w.as_ref().trim().to_lowercase();
            if folded.is_empty() || !seen.insert(folded.clone()) {
                continue;
            }
            out.push(folded);
        }
        Self {
            language: language.into(),
            words: out,
            source_path: PathBuf::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Reads a frequency list with one entry per line. Lines are either a bare word
/// or tab-separated fields where the word is the first non-numeric field
/// (`rank<TAB>word`, `word<TAB>count`, ...).
pub fn load_frequency_list(path: &Path, language: &str, limit: usize) -> Result<WordList> {
    if limit == 0 {
        return Err(SaltError::input("word limit must be positive"));
    }
    let text = fs::read_to_string(path).map_err(|e| SaltError::io(path, e))?;
    let words = text.lines().filter_map(parse_line);
    let mut list = WordList::from_words(language, words, limit);
    if list.is_empty() {
        return Err(SaltError::input(format!("{}: no words in frequency list", path.display())));
    }
    list.source_path = path.to_path_buf();
    Ok(list)
}

fn parse_line(line: &str) -> Option<&str> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    if !line.contains('\t') {
        return Some(line);
    }
    line.split('\t')
        .map(str::trim)
        .find(|f| !f.is_empty() && f.parse::<f64>().is_err())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularySet {
    pub language: String,
    /// Serialized sorted ascending.
    pub token_ids: BTreeSet<TokenId>,
    pub word_count_in: usize,
    pub word_count_total: usize,
}

impl VocabularySet {
    pub fn contains(&self, id: TokenId) -> bool {
        self.token_ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn coverage(&self) -> f64 {
        if self.word_count_total == 0 {
            0.0
        } else {
            self.word_count_in as f64 / self.word_count_total as f64
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::jsonl::read_json(path)
    }
}

fn compile(word_list: &WordList, tokenizer: &dyn Tokenizer) -> VocabularySet {
    let mut token_ids = BTreeSet::new();
    let mut word_count_in = 0;
    for word in &word_list.words {
        let mut forms = vec![word.clone()];
        if !tokenizer.lowercases() {
            let capitalized = capitalize(word);
            if capitalized != *word {
                forms.push(capitalized);
            }
        }
        let mut kept = false;
        for form in forms {
            let enc = tokenizer.encode(&form);
            if let [id] = enc.ids[..] {
                if !tokenizer.is_special(id) {
                    token_ids.insert(id);
                    kept = true;
                }
            }
        }
        word_count_in += usize::from(kept);
    }
    VocabularySet {
        language: word_list.language.clone(),
        token_ids,
        word_count_in,
        word_count_total: word_list.len(),
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Compiles a word list into the set of single-token ids it covers.
pub fn build_token_set(word_list: &WordList, tokenizer: &dyn Tokenizer) -> Result<VocabularySet> {
    if word_list.is_empty() {
        return Err(SaltError::input(format!("word list for {} is empty", word_list.language)));
    }
    let set = compile(word_list, tokenizer);
    if set.is_empty() {
        return Err(SaltError::config(format!(
            "no word of language {} maps to a single token under tokenizer {}",
            word_list.language,
            tokenizer.identifier()
        )));
    }
    Ok(set)
}

/// Fraction of list words that survive the single-token filter.
pub fn coverage_ratio(word_list: &WordList, tokenizer: &dyn Tokenizer) -> Result<f64> {
    if word_list.is_empty() {
        return Err(SaltError::input(format!("word list for {} is empty", word_list.language)));
    }
    Ok(compile(word_list, tokenizer).coverage())
}

/// Ranks candidate languages by coverage ratio, highest first (ties by code),
/// and returns the top `k`.
pub fn select_target_languages(
    lists: &[WordList],
    tokenizer: &dyn Tokenizer,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let mut ranked = lists
        .iter()
        .map(|l| Ok((l.language.clone(), coverage_ratio(l, tokenizer)?)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WordPieceTokenizer;
    use proptest::prelude::*;

    fn tokenizer(words: &[&str], lowercase: bool) -> WordPieceTokenizer {
        let mut v: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend(words.iter().map(|s| s.to_string()));
        WordPieceTokenizer::new(v, lowercase, "test").unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn limit_truncates_in_rank_order() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..12_000).map(|i| format!("w{i}\n")).collect();
        let p = write(dir.path(), "en.txt", &body);
        let list = load_frequency_list(&p, "en", DEFAULT_WORD_LIMIT).unwrap();
        assert_eq!(list.len(), 10_000);
        assert_eq!(list.words[0], "w0");
        assert_eq!(list.words[9_999], "w9999");
        assert_eq!(list.source_path, p);
    }

    #[test]
    fn short_file_keeps_everything() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "x.txt", "a\nb\nc\nd\ne\n");
        assert_eq!(load_frequency_list(&p, "x", 10_000).unwrap().len(), 5);
    }

    #[test]
    fn case_fold_dedup_keeps_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "de.txt", "Der\nder\ndie\n");
        let list = load_frequency_list(&p, "de", 3).unwrap();
        assert_eq!(list.words, ["der", "die"]);
    }

    #[test]
    fn rank_tab_and_count_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "fr.txt", "1\tde\n2\tla\nle\t1234\n\n# comment\net\n");
        let list = load_frequency_list(&p, "fr", 10).unwrap();
        assert_eq!(list.words, ["de", "la", "le", "et"]);
    }

    #[test]
    fn missing_and_empty_files_are_input_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_frequency_list(&dir.path().join("nope.txt"), "en", 10).unwrap_err();
        assert!(missing.to_string().contains("nope.txt"));
        let p = write(dir.path(), "empty.txt", "\n\n");
        assert!(matches!(load_frequency_list(&p, "en", 10), Err(SaltError::Input(_))));
    }

    #[test]
    fn multi_piece_words_are_dropped() {
        let tok = tokenizer(&["house", "anti", "##dis", "##establishment"], true);
        let list = WordList::from_words("en", ["house", "antidisestablishment"], 10);
        let set = build_token_set(&list, &tok).unwrap();
        assert_eq!(set.token_ids.iter().copied().collect::<Vec<_>>(), [5]);
        assert_eq!((set.word_count_in, set.word_count_total), (1, 2));
        assert_eq!(coverage_ratio(&list, &tok).unwrap(), 0.5);
    }

    #[test]
    fn unknown_words_do_not_count_as_single_tokens() {
        let tok = tokenizer(&["a", "b", "c", "d"], true);
        let words = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
        let list = WordList::from_words("xx", words, 10);
        assert_eq!(coverage_ratio(&list, &tok).unwrap(), 0.4);
        let set = build_token_set(&list, &tok).unwrap();
        assert!(!set.contains(tok.special_tokens().unk));
    }

    #[test]
    fn cased_tokenizer_collects_both_forms() {
        let tok = tokenizer(&["paris", "Paris", "Berlin"], false);
        let list = WordList::from_words("fr", ["paris", "berlin"], 10);
        let set = build_token_set(&list, &tok).unwrap();
        assert_eq!(set.token_ids.iter().copied().collect::<Vec<_>>(), [5, 6, 7]);
        assert_eq!(set.word_count_in, 2);
    }

    #[test]
    fn character_split_language_is_config_error() {
        let tok = tokenizer(&["的", "是", "我", "们", "你", "好"], true);
        let list = WordList::from_words("zh", ["我们", "你好"], 10);
        let err = build_token_set(&list, &tok).unwrap_err();
        assert!(matches!(err, SaltError::Config(ref m) if m.contains("zh")), "{err}");
        assert_eq!(coverage_ratio(&list, &tok).unwrap(), 0.0);
    }

    #[test]
    fn empty_list_is_input_error() {
        let tok = tokenizer(&["a"], true);
        let list = WordList::from_words("en", Vec::<String>::new(), 10);
        assert!(matches!(coverage_ratio(&list, &tok), Err(SaltError::Input(_))));
        assert!(matches!(build_token_set(&list, &tok), Err(SaltError::Input(_))));
    }

    #[test]
    fn json_has_sorted_ids() {
        let tok = tokenizer(&["c", "b", "a"], true);
        let list = WordList::from_words("en", ["a", "c", "b"], 10);
        let json = serde_json::to_value(build_token_set(&list, &tok).unwrap()).unwrap();
        assert_eq!(json["token_ids"], serde_json::json!([5, 6, 7]));
        assert_eq!(json["word_count_in"], 3);
    }

    proptest! {
        #[test]
        fn token_set_ignores_order_and_excludes_specials(
            words in proptest::collection::vec("[a-f]{1,2}", 1..30),
            seed in any::<u64>(),
        ) {
            let vocab_words = ["a", "b", "c", "d", "ab", "cd", "ee", "[MASK]"];
            let tok = tokenizer(&vocab_words, true);
            let list = WordList::from_words("xx", &words, 100);
            let mut shuffled = list.words.clone();
            let mut state = seed;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            let other = WordList::from_words("xx", &shuffled, 100);
            let a = compile(&list, &tok);
            let b = compile(&other, &tok);
            prop_assert_eq!(&a.token_ids, &b.token_ids);
            prop_assert_eq!(a.word_count_in, b.word_count_in);
            for id in tok.special_tokens().ids() {
                prop_assert!(!a.contains(id));
            }
        }

        #[test]
        fn coverage_never_grows_when_vocabulary_shrinks(
            words in proptest::collection::vec("[a-h]{1,2}", 1..30),
            drop in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let full = ["a", "b", "c", "d", "e", "f", "g", "h", "ab", "cd", "ef", "gh"];
            let kept: Vec<&str> = full.iter().zip(&drop).filter(|(_, d)| !**d).map(|(w, _)| *w).collect();
            let list = WordList::from_words("xx", &words, 100);
            let big = coverage_ratio(&list, &tokenizer(&full, true)).unwrap();
            let small = coverage_ratio(&list, &tokenizer(&kept, true)).unwrap();
            prop_assert!(small <= big);
        }
    }
}
