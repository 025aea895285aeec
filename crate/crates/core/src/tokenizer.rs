//! Text to token-id mapping.
//!
//! [`Tokenizer`] is the interface every scorer backend exposes. The shipped
//! implementation is a BERT-style WordPiece tokenizer that reads a plain
//! `vocab.txt` (one token per line, line number = id). A vocabulary without any
//! `##` continuation pieces degenerates into a word-level tokenizer, which is
//! what the synthetic testbed uses.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use unicode_categories::UnicodeCategories;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Result, SaltError};
use crate::types::TokenId;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const CONTINUATION_PREFIX: &str = "##";
const MAX_CHARS_PER_WORD: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

impl SpecialTokens {
    pub fn ids(&self) -> [TokenId; 5] {
        [self.pad, self.unk, self.cls, self.sep, self.mask]
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids().contains(&id)
    }
}

/// Token ids of one piece of text plus, for every token, the index of the
/// whitespace/punctuation-delimited word it came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<TokenId>,
    pub word_ids: Vec<usize>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of tokens belonging to the same word as position `i`.
    pub fn word_len(&self, i: usize) -> usize {
        let w = self.word_ids[i];
        self.word_ids.iter().filter(|&&x| x == w).count()
    }
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Encoding;

    fn vocab_size(&self) -> usize;

    fn id_to_token(&self, id: TokenId) -> Option<&str>;

    fn token_to_id(&self, token: &str) -> Option<TokenId>;

    fn special_tokens(&self) -> SpecialTokens;

    /// True when input text is case-folded before lookup.
    fn lowercases(&self) -> bool;

    /// Stable name recorded in checkpoints.
    fn identifier(&self) -> String;

    fn is_special(&self, id: TokenId) -> bool {
        self.special_tokens().contains(id)
    }

    fn is_continuation(&self, id: TokenId) -> bool {
        self.id_to_token(id)
            .is_some_and(|t| t.starts_with(CONTINUATION_PREFIX) && t.len() > CONTINUATION_PREFIX.len())
    }

    /// True for tokens made only of punctuation or symbol characters.
    fn is_punctuation(&self, id: TokenId) -> bool {
        self.id_to_token(id).is_some_and(|t| {
            let t = t.strip_prefix(CONTINUATION_PREFIX).unwrap_or(t);
            !t.is_empty() && t.chars().all(is_punct_or_symbol)
        })
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.id_to_token(id).unwrap_or(UNK);
            match tok.strip_prefix(CONTINUATION_PREFIX) {
                Some(rest) if !rest.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: SpecialTokens,
    lowercase: bool,
    name: String,
}

impl WordPieceTokenizer {
    /// Builds a tokenizer from an ordered token list. All five special tokens
    /// (`[PAD] [UNK] [CLS] [SEP] [MASK]`) must be present.
    pub fn new(tokens: Vec<String>, lowercase: bool, name: impl Into<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            // First occurrence wins, like the reference BERT vocab loader.
            index.entry(tok.clone()).or_insert(i as TokenId);
        }
        let find = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| SaltError::config(format!("vocabulary lacks special token {name}")))
        };
        let specials = SpecialTokens {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
        };
        Ok(Self {
            tokens,
            index,
            specials,
            lowercase,
            name: name.into(),
        })
    }

    pub fn from_vocab_file(path: &Path, lowercase: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SaltError::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        if tokens.is_empty() {
            return Err(SaltError::data(format!("{}: empty vocabulary", path.display())));
        }
        let name = format!(
            "wordpiece:{}:{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("vocab"),
            tokens.len()
        );
        Self::new(tokens, lowercase, name)
    }

    pub fn save_vocab(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| SaltError::io(path, e))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn basic_split(&self, text: &str) -> Vec<String> {
        let mut spaced = String::with_capacity(text.len());
        for c in text.chars() {
            if c == '\0' || c == '\u{fffd}' || (c.is_control() && !c.is_whitespace()) {
                continue;
            }
            if is_cjk(c) {
                spaced.push(' ');
                spaced.push(c);
                spaced.push(' ');
            } else if c.is_whitespace() {
                spaced.push(' ');
            } else {
                spaced.push(c);
            }
        }
        let mut words = Vec::new();
        for raw in spaced.split_whitespace() {
            let word = if self.lowercase {
                raw.to_lowercase().nfd().filter(|c| !c.is_mark_nonspacing()).collect::<String>()
            } else {
                raw.to_string()
            };
            let mut current = String::new();
            for c in word.chars() {
                if c.is_ascii_punctuation() || c.is_punctuation() {
                    if !current.is_empty() {
                        words.push(std::mem::take(&mut current));
                    }
                    words.push(c.to_string());
                } else {
                    current.push(c);
                }
            }
            if !current.is_empty() {
                words.push(current);
            }
        }
        words
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<TokenId>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_CHARS_PER_WORD {
            out.push(self.specials.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION_PREFIX);
                }
                if let Some(&id) = self.index.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.specials.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }
}

impl Tokenizer for WordPieceTokenizer {
    fn encode(&self, text: &str) -> Encoding {
        let mut enc = Encoding::default();
        for (w, word) in self.basic_split(text).iter().enumerate() {
            let before = enc.ids.len();
            self.word_pieces(word, &mut enc.ids);
            enc.word_ids.extend(std::iter::repeat_n(w, enc.ids.len() - before));
        }
        enc
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn id_to_token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn token_to_id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    fn special_tokens(&self) -> SpecialTokens {
        self.specials
    }

    fn lowercases(&self) -> bool {
        self.lowercase
    }

    fn identifier(&self) -> String {
        self.name.clone()
    }
}

fn is_punct_or_symbol(c: char) -> bool {
    c.is_ascii_punctuation() || c.is_punctuation() || c.is_symbol()
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F
        | 0x2B820..=0x2CEAF
        | 0xF900..=0xFAFF
        | 0x2F800..=0x2FA1F)
}
