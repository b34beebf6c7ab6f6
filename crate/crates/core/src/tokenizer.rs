//! BERT-compatible uncased WordPiece tokenization.
//!
//! The pipeline mirrors the reference BERT tokenizer:
//!
//! 1. drop NUL / U+FFFD / control characters and map whitespace to spaces,
//! 2. surround CJK ideographs with spaces,
//! 3. lowercase, NFD-decompose and drop combining marks,
//! 4. split on whitespace and punctuation (punctuation becomes its own word),
//! 5. greedy longest-match-first WordPiece with the `##` continuation prefix.
//!
//! Words longer than [`MAX_WORD_CHARS`] characters, and words that cannot be
//! fully covered by vocabulary pieces, become a single `[UNK]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use unicode_general_category::get_general_category;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const CONTINUATION_PREFIX: &str = "##";
pub const MAX_WORD_CHARS: usize = 100;
pub const DEFAULT_MAX_LEN: usize = 128;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

/// Token strings indexed by id, with the five special tokens resolved.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    specials: SpecialIds,
}

impl Vocabulary {
    /// Builds a vocabulary where `tokens[i]` has id `i`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if let Some(prev) = index.insert(tok.clone(), i as u32) {
                return Err(Error::config(format!(
                    "duplicate vocabulary token {tok:?} at lines {} and {}",
                    prev + 1,
                    i + 1
                )));
            }
        }
        let find = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::config(format!("vocabulary is missing special token {name}")))
        };
        let specials = SpecialIds {
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
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        let s = self.specials;
        id == s.pad || id == s.unk || id == s.cls || id == s.sep || id == s.mask
    }
}

/// Reads a `vocab.txt`: one token per line, id = 0-based line number.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect::<Vec<_>>();
    // A trailing newline does not introduce an extra token.
    let tokens = match tokens.split_last() {
        Some((last, rest)) if last.is_empty() => rest.to_vec(),
        _ => tokens,
    };
    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn is_control(c: char) -> bool {
    if matches!(c, '\t' | '\n' | '\r') {
        return false;
    }
    get_general_category(c).abbreviation().starts_with('C')
}

fn is_whitespace(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r') || get_general_category(c).abbreviation() == "Zs"
}

fn is_punctuation(c: char) -> bool {
    let cp = c as u32;
    if (33..=47).contains(&cp)
        || (58..=64).contains(&cp)
        || (91..=96).contains(&cp)
        || (123..=126).contains(&cp)
    {
        return true;
    }
    get_general_category(c).abbreviation().starts_with('P')
}

fn is_cjk(c: char) -> bool {
    let cp = c as u32;
    (0x4E00..=0x9FFF).contains(&cp)
        || (0x3400..=0x4DBF).contains(&cp)
        || (0x20000..=0x2A6DF).contains(&cp)
        || (0x2A700..=0x2B73F).contains(&cp)
        || (0x2B740..=0x2B81F).contains(&cp)
        || (0x2B820..=0x2CEAF).contains(&cp)
        || (0xF900..=0xFAFF).contains(&cp)
        || (0x2F800..=0x2FA1F).contains(&cp)
}

/// Normalization and whitespace/punctuation splitting ahead of WordPiece.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len());
    for c in text.chars() {
        if c == '\0' || c == '\u{FFFD}' || is_control(c) {
            continue;
        }
        if is_whitespace(c) {
            cleaned.push(' ');
        } else if is_cjk(c) {
            cleaned.push(' ');
            cleaned.push(c);
            cleaned.push(' ');
        } else {
            cleaned.push(c);
        }
    }

    let mut words = Vec::new();
    for raw in cleaned.split_whitespace() {
        let normalized: String = raw
            .to_lowercase()
            .nfd()
            .filter(|&c| !is_combining_mark(c))
            .collect();
        let mut current = String::new();
        for c in normalized.chars() {
            if is_punctuation(c) {
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

/// Greedy longest-match-first segmentation of one word.
pub fn wordpiece(word: &str, vocab: &Vocabulary, out: &mut Vec<u32>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        out.push(vocab.specials.unk);
        return;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION_PREFIX);
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&candidate) {
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
                out.push(vocab.specials.unk);
                return;
            }
        }
    }
    out.extend(pieces);
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenizedSequence {
    let mut ids = Vec::new();
    for word in basic_tokenize(text) {
        wordpiece(&word, vocab, &mut ids);
    }
    TokenizedSequence { ids }
}

/// How two-sentence inputs are presented to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairScheme {
    /// `[CLS] a [SEP] b [SEP]` as one sequence.
    Joint,
    /// `[CLS] a [SEP]` and `[CLS] b [SEP]` encoded separately.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelInput {
    Single(Vec<u32>),
    Pair(Vec<u32>, Vec<u32>),
}

/// Adds special tokens and applies truncation.
///
/// `max_len` bounds every emitted sequence including its special tokens. For
/// joint pairs the longer of the two token lists is shortened first, one
/// token at a time from its end. Without `b`, both schemes produce the single
/// form `[CLS] a [SEP]`.
pub fn build_model_input(
    a: &TokenizedSequence,
    b: Option<&TokenizedSequence>,
    scheme: PairScheme,
    specials: SpecialIds,
    max_len: usize,
) -> Result<ModelInput> {
    if a.is_empty() {
        return Err(Error::structural("first sequence of a model input is empty"));
    }
    let wrap = |ids: &[u32]| {
        let keep = ids.len().min(max_len.saturating_sub(2));
        let mut out = Vec::with_capacity(keep + 2);
        out.push(specials.cls);
        out.extend_from_slice(&ids[..keep]);
        out.push(specials.sep);
        out
    };
    let Some(b) = b else {
        return Ok(ModelInput::Single(wrap(&a.ids)));
    };
    match scheme {
        PairScheme::Separate => Ok(ModelInput::Pair(wrap(&a.ids), wrap(&b.ids))),
        PairScheme::Joint => {
            let budget = max_len.saturating_sub(3);
            let (mut la, mut lb) = (a.len(), b.len());
            while la + lb > budget {
                if la >= lb {
                    la -= 1;
                } else {
                    lb -= 1;
                }
            }
            let mut out = Vec::with_capacity(la + lb + 3);
            out.push(specials.cls);
            out.extend_from_slice(&a.ids[..la]);
            out.push(specials.sep);
            out.extend_from_slice(&b.ids[..lb]);
            out.push(specials.sep);
            Ok(ModelInput::Single(out))
        }
    }
}

/// Compares `tokenize` against a golden file of `text<TAB>id id id` lines.
/// Returns the 1-based line numbers that disagree.
pub fn check_golden(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut mismatches = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let (sentence, ids) = line.split_once('\t').ok_or_else(|| {
            Error::data(format!("{}:{}: missing tab separator", path.display(), lineno + 1))
        })?;
        let want = ids
            .split_whitespace()
            .map(|s| {
                s.parse::<u32>().map_err(|_| {
                    Error::data(format!("{}:{}: bad id {s:?}", path.display(), lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if tokenize(sentence, vocab).ids != want {
            mismatches.push(lineno + 1);
        }
    }
    Ok(mismatches)
}
