//! Word-level tokenization and attribute position matching.
//!
//! Captions are lowercased, stripped of ASCII punctuation and split on
//! whitespace; every word becomes exactly one token. Token ids come from a
//! stable FNV-1a hash folded into `FIRST_TEXT_ID..=MAX_ID`, so they do not
//! depend on insertion order or process state.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const START_ID: u32 = 1;
pub const END_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const FIRST_TEXT_ID: u32 = 4;
pub const MAX_ID: u32 = 65_535;
/// Number of rows an embedding table needs to cover every id.
pub const VOCAB_SIZE: usize = MAX_ID as usize + 1;

pub const PAD_TOKEN: &str = "[PAD]";

/// Which attention family the caption is prepared for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    /// BERT-style self-attention, `[CLS] ... [SEP] [PAD]*`.
    Bidirectional,
    /// CLIP-style causal attention, `<|startoftext|> ... <|endoftext|> [PAD]*`.
    Causal,
}

impl Flavor {
    pub fn start_token(self) -> &'static str {
        match self {
            Flavor::Bidirectional => "[CLS]",
            Flavor::Causal => "<|startoftext|>",
        }
    }

    pub fn end_token(self) -> &'static str {
        match self {
            Flavor::Bidirectional => "[SEP]",
            Flavor::Causal => "<|endoftext|>",
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flavor::Bidirectional => "bidirectional",
            Flavor::Causal => "causal",
        })
    }
}

impl std::str::FromStr for Flavor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bidirectional" | "bert" => Ok(Flavor::Bidirectional),
            "causal" | "clip" => Ok(Flavor::Causal),
            other => Err(format!("unknown encoder flavor `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Start,
    Text,
    End,
    Pad,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("caption has {words} words but total length {total_len} leaves room for only {capacity}")]
    TooLong {
        words: usize,
        total_len: usize,
        capacity: usize,
    },
}

/// A tokenized caption, padded to a fixed total length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    flavor: Flavor,
    tokens: Vec<String>,
    ids: Vec<u32>,
    kinds: Vec<TokenKind>,
    text_len: usize,
}

impl TokenSequence {
    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    /// Number of TEXT positions (L).
    pub fn text_len(&self) -> usize {
        self.text_len
    }

    /// Total number of positions including specials and padding (S).
    pub fn total_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn end_index(&self) -> usize {
        self.text_len + 1
    }

    /// Indices `1..=L`.
    pub fn text_positions(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.text_len
    }

    /// Returns a copy with the token at `index` replaced by `word`.
    ///
    /// Only TEXT positions can be replaced; other indices return `None`.
    pub fn with_text_token(&self, index: usize, word: &str) -> Option<TokenSequence> {
        if self.kinds.get(index) != Some(&TokenKind::Text) {
            return None;
        }
        let mut out = self.clone();
        out.tokens[index] = word.to_string();
        out.ids[index] = token_id(word);
        Some(out)
    }
}

/// Lowercases, strips ASCII punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .map(|c| c.to_ascii_lowercase())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Stable id of a text token: FNV-1a 64 folded into the text id range.
pub fn token_id(token: &str) -> u32 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let hash = token
        .bytes()
        .fold(OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(PRIME));
    let span = u64::from(MAX_ID - FIRST_TEXT_ID + 1);
    FIRST_TEXT_ID + (hash % span) as u32
}

pub fn tokenize(text: &str, total_len: usize, flavor: Flavor) -> Result<TokenSequence, TokenizeError> {
    let words = normalize_words(text);
    let capacity = total_len.saturating_sub(2);
    if words.len() > capacity {
        return Err(TokenizeError::TooLong {
            words: words.len(),
            total_len,
            capacity,
        });
    }

    let text_len = words.len();
    let mut tokens = Vec::with_capacity(total_len);
    let mut ids = Vec::with_capacity(total_len);
    let mut kinds = Vec::with_capacity(total_len);

    tokens.push(flavor.start_token().to_string());
    ids.push(START_ID);
    kinds.push(TokenKind::Start);
    for word in words {
        ids.push(token_id(&word));
        tokens.push(word);
        kinds.push(TokenKind::Text);
    }
    tokens.push(flavor.end_token().to_string());
    ids.push(END_ID);
    kinds.push(TokenKind::End);
    while tokens.len() < total_len {
        tokens.push(PAD_TOKEN.to_string());
        ids.push(PAD_ID);
        kinds.push(TokenKind::Pad);
    }

    Ok(TokenSequence {
        flavor,
        tokens,
        ids,
        kinds,
        text_len,
    })
}

/// Sorted, duplicate-free token indices selected as attribute positions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttributePositions {
    positions: Vec<usize>,
    source_words: Vec<String>,
}

impl AttributePositions {
    pub fn new(positions: impl IntoIterator<Item = usize>, source_words: Vec<String>) -> Self {
        let set: BTreeSet<usize> = positions.into_iter().collect();
        Self {
            positions: set.into_iter().collect(),
            source_words,
        }
    }

    /// Every position `0..total_len`.
    pub fn all(total_len: usize) -> Self {
        Self::new(0..total_len, Vec::new())
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn source_words(&self) -> &[String] {
        &self.source_words
    }

    pub fn contains(&self, index: usize) -> bool {
        self.positions.binary_search(&index).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// True when at least one TEXT position of `seq` is selected.
    pub fn has_text(&self, seq: &TokenSequence) -> bool {
        self.positions
            .iter()
            .any(|&i| seq.kinds().get(i) == Some(&TokenKind::Text))
    }

    pub fn union(&self, other: &AttributePositions) -> AttributePositions {
        let mut words = self.source_words.clone();
        words.extend(other.source_words.iter().cloned());
        Self::new(
            self.positions.iter().chain(other.positions.iter()).copied(),
            words,
        )
    }

    pub fn without(&self, drop: impl Fn(usize) -> bool) -> AttributePositions {
        Self {
            positions: self.positions.iter().copied().filter(|&i| !drop(i)).collect(),
            source_words: self.source_words.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchOptions {
    /// Add every `[PAD]` position for the bidirectional flavor, as the
    /// BERT branch of the matcher does.
    pub bidirectional_pads: bool,
    /// Add START/END for the causal flavor.
    pub causal_specials: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            bidirectional_pads: true,
            causal_specials: true,
        }
    }
}

pub fn match_positions<S: AsRef<str>>(
    seq: &TokenSequence,
    attrs: &[S],
    flavor: Flavor,
) -> AttributePositions {
    match_positions_with(seq, attrs, flavor, MatchOptions::default())
}

/// Locates every TEXT position whose token equals a token of any attribute.
///
/// Multi-word attributes contribute each of their tokens independently, and
/// every occurrence counts. Flavor-specific extras are added regardless of
/// whether any attribute matched.
pub fn match_positions_with<S: AsRef<str>>(
    seq: &TokenSequence,
    attrs: &[S],
    flavor: Flavor,
    opts: MatchOptions,
) -> AttributePositions {
    let attr_tokens: BTreeSet<String> = attrs
        .iter()
        .flat_map(|a| normalize_words(a.as_ref()))
        .collect();

    let mut index: Vec<usize> = seq
        .kinds()
        .iter()
        .zip(seq.tokens())
        .enumerate()
        .filter(|(_, (kind, tok))| **kind == TokenKind::Text && attr_tokens.contains(*tok))
        .map(|(i, _)| i)
        .collect();

    match flavor {
        Flavor::Bidirectional if opts.bidirectional_pads => index.extend(
            seq.kinds()
                .iter()
                .enumerate()
                .filter(|(_, k)| **k == TokenKind::Pad)
                .map(|(i, _)| i),
        ),
        Flavor::Causal if opts.causal_specials => {
            index.push(0);
            index.push(seq.end_index());
        }
        _ => {}
    }

    let words = attrs.iter().map(|a| a.as_ref().to_string()).collect();
    AttributePositions::new(index, words)
}
