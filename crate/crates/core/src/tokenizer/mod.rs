//! Byte-level BPE with atomic single-character extension tokens.
//!
//! Id layout: the 256 byte tokens, then one id per merge in merge order, then
//! special tokens, then extension tokens in the order they were added. Later
//! additions never renumber earlier ids.

mod file;
mod pretok;
mod resize;
mod train;

use std::collections::HashMap;

use thiserror::Error;

use crate::model::ModelError;
use crate::text::is_cjk_ideograph;

pub use resize::resize_embeddings;
pub use train::{frequent_chars, train_bpe};

pub const END_OF_TEXT: &str = "<|endoftext|>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("token id {id} outside vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("extension entry {0:?} is not a single character")]
    NotSingleChar(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("corpus contains no Chinese characters")]
    NoChineseChars,
    #[error("vocabulary file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("vocabularies are not prefix-compatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Kind {
    Byte,
    Merge,
    Special,
    Extension,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(u32, u32)>,
    specials: Vec<String>,
    extensions: Vec<char>,
    /// Bytes of every id.
    tokens: Vec<Vec<u8>>,
    kinds: Vec<Kind>,
    merge_rank: HashMap<(u32, u32), u32>,
    /// Byte string of every byte, merge and extension token.
    by_bytes: HashMap<Vec<u8>, u32>,
    ext_ids: HashMap<char, u32>,
}

impl Vocabulary {
    /// 256 byte tokens plus the end-of-text special token.
    pub fn byte_level() -> Self {
        Self::from_parts(Vec::new(), vec![END_OF_TEXT.to_string()], Vec::new())
    }

    /// Builds id maps; callers guarantee merge operands precede their merge
    /// and that all byte strings are distinct.
    fn from_parts(merges: Vec<(u32, u32)>, specials: Vec<String>, extensions: Vec<char>) -> Self {
        let mut v = Self {
            merges: Vec::new(),
            specials: Vec::new(),
            extensions: Vec::new(),
            tokens: (0..=255u8).map(|b| vec![b]).collect(),
            kinds: vec![Kind::Byte; 256],
            merge_rank: HashMap::new(),
            by_bytes: HashMap::new(),
            ext_ids: HashMap::new(),
        };
        for (i, t) in v.tokens.iter().enumerate() {
            v.by_bytes.insert(t.clone(), i as u32);
        }
        for (a, b) in merges {
            v.push_merge(a, b);
        }
        for s in specials {
            v.tokens.push(s.as_bytes().to_vec());
            v.kinds.push(Kind::Special);
            v.specials.push(s);
        }
        for c in extensions {
            v.push_extension(c);
        }
        v
    }

    fn push_merge(&mut self, a: u32, b: u32) -> u32 {
        let id = self.tokens.len() as u32;
        let mut bytes = self.tokens[a as usize].clone();
        bytes.extend_from_slice(&self.tokens[b as usize]);
        self.merge_rank.insert((a, b), self.merges.len() as u32);
        self.merges.push((a, b));
        self.by_bytes.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        self.kinds.push(Kind::Merge);
        id
    }

    fn push_extension(&mut self, c: char) -> u32 {
        let id = self.tokens.len() as u32;
        let bytes = c.to_string().into_bytes();
        self.by_bytes.insert(bytes.clone(), id);
        self.ext_ids.insert(c, id);
        self.tokens.push(bytes);
        self.kinds.push(Kind::Extension);
        self.extensions.push(c);
        id
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn extensions(&self) -> &[char] {
        &self.extensions
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn special_id(&self, name: &str) -> Option<u32> {
        let pos = self.specials.iter().position(|s| s == name)?;
        Some((256 + self.merges.len() + pos) as u32)
    }

    /// Id of the end-of-text token.
    pub fn eot_id(&self) -> u32 {
        self.special_id(END_OF_TEXT).expect("every vocabulary carries end-of-text")
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Adds an atomic token for each character that does not already encode
    /// to a single token. Existing ids are unchanged.
    pub fn extend_vocab<S: AsRef<str>>(&self, chars: &[S]) -> Result<Self, TokenizerError> {
        let mut parsed = Vec::with_capacity(chars.len());
        for s in chars {
            let s = s.as_ref();
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => parsed.push(c),
                _ => return Err(TokenizerError::NotSingleChar(s.to_string())),
            }
        }
        let mut out = self.clone();
        for c in parsed {
            // ASCII characters are byte tokens already.
            if out.encode(&c.to_string()).len() > 1 {
                out.push_extension(c);
            }
        }
        Ok(out)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Encodes arbitrary bytes; invalid UTF-8 falls back to byte tokens.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len());
        for piece in pretok::pieces(bytes) {
            if let pretok::Piece::Char(c, _) = piece {
                if let Some(&id) = self.ext_ids.get(&c) {
                    out.push(id);
                    continue;
                }
            }
            self.bpe_into(piece.bytes(), &mut out);
        }
        out
    }

    fn bpe_into(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        if self.merges.is_empty() {
            out.extend(ids);
            return;
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            ids = apply_merge(&ids, pair, 256 + rank);
        }
        out.extend(ids);
    }

    /// Exact concatenation of token bytes.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.token_bytes(id).ok_or(TokenizerError::IdOutOfRange { id, size: self.size() })?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// Decodes to text, replacing invalid UTF-8 with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    fn is_prefix_of(&self, other: &Self) -> Result<(), TokenizerError> {
        if other.size() < self.size() {
            return Err(TokenizerError::Incompatible(format!(
                "new vocabulary has {} ids, old has {}",
                other.size(),
                self.size()
            )));
        }
        for id in 0..self.size() {
            if self.tokens[id] != other.tokens[id] || self.kinds[id] != other.kinds[id] {
                return Err(TokenizerError::Incompatible(format!("id {id} differs")));
            }
        }
        Ok(())
    }
}

/// Replaces every non-overlapping left-to-right occurrence of `pair`.
pub(crate) fn apply_merge(ids: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Fraction of Chinese-character occurrences in `corpus` that encode to a
/// single token. Pre-tokenization isolates each such character, so the
/// check is per character.
pub fn coverage(vocab: &Vocabulary, corpus: &str) -> Result<f64, TokenizerError> {
    let mut single: HashMap<char, bool> = HashMap::new();
    let (mut total, mut hit) = (0usize, 0usize);
    for c in corpus.chars().filter(|&c| is_cjk_ideograph(c)) {
        total += 1;
        let ok = *single.entry(c).or_insert_with(|| vocab.encode(&c.to_string()).len() == 1);
        hit += ok as usize;
    }
    if total == 0 {
        return Err(TokenizerError::NoChineseChars);
    }
    Ok(hit as f64 / total as f64)
}
