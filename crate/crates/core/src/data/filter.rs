use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::kv::{self, KvMap};
use crate::text::{is_cjk_ideograph, is_punctuation};

use super::PipelineError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DocStats {
    /// Maximal runs of ASCII letters.
    pub english_word_count: usize,
    pub chinese_char_count: usize,
    /// In characters, not bytes.
    pub char_length: usize,
    pub max_punctuationless_run: usize,
}

pub fn compute_stats(text: &str) -> DocStats {
    let mut s = DocStats::default();
    let (mut in_word, mut run) = (false, 0usize);
    for c in text.chars() {
        s.char_length += 1;
        let letter = c.is_ascii_alphabetic();
        if letter && !in_word {
            s.english_word_count += 1;
        }
        in_word = letter;
        if is_cjk_ideograph(c) {
            s.chinese_char_count += 1;
        }
        if is_punctuation(c) {
            run = 0;
        } else {
            run += 1;
            s.max_punctuationless_run = s.max_punctuationless_run.max(run);
        }
    }
    s
}

/// Rules in evaluation order; the first that fires names the rejection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooShort,
    PunctuationRun,
    LangCount,
    Nsfw,
}

impl RejectReason {
    pub const ALL: [RejectReason; 4] = [Self::TooShort, Self::PunctuationRun, Self::LangCount, Self::Nsfw];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TooShort => "too_short",
            Self::PunctuationRun => "punctuation_run",
            Self::LangCount => "lang_count",
            Self::Nsfw => "nsfw",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterRules {
    /// Shorter documents (in chars) are rejected.
    pub min_chars: usize,
    /// A longer run without punctuation is rejected.
    pub max_punctuationless_run: usize,
    /// More occurrences than this are rejected.
    pub max_nsfw_terms: usize,
    /// Fewer English words plus Chinese characters are rejected.
    pub min_lang_tokens: usize,
    pub nsfw_list: Option<PathBuf>,
    /// Lowercased terms.
    nsfw_terms: Vec<String>,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            min_chars: 50,
            max_punctuationless_run: 2048,
            max_nsfw_terms: 3,
            min_lang_tokens: 20,
            nsfw_list: None,
            nsfw_terms: Vec::new(),
        }
    }
}

impl FilterRules {
    /// Loads the term list, one term per line; `#` starts a comment line.
    pub fn with_nsfw_list(mut self, path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        self.nsfw_terms = parse_terms(&text);
        self.nsfw_list = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn with_nsfw_terms<S: AsRef<str>>(mut self, terms: &[S]) -> Self {
        self.nsfw_terms = parse_terms(&terms.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join("\n"));
        self
    }

    pub fn nsfw_terms(&self) -> &[String] {
        &self.nsfw_terms
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.min_chars == 0 || self.max_punctuationless_run == 0 || self.max_nsfw_terms == 0 || self.min_lang_tokens == 0 {
            return Err(PipelineError::Config("filter thresholds must be positive".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        kv::put(map, &format!("{prefix}min_chars"), self.min_chars);
        kv::put(map, &format!("{prefix}max_punctuationless_run"), self.max_punctuationless_run);
        kv::put(map, &format!("{prefix}max_nsfw_terms"), self.max_nsfw_terms);
        kv::put(map, &format!("{prefix}min_lang_tokens"), self.min_lang_tokens);
        if let Some(p) = &self.nsfw_list {
            kv::put(map, &format!("{prefix}nsfw_list"), p.display());
        }
    }

    /// Reads `prefix`-keys from `map`; a named term list must exist.
    pub fn take_kv(map: &mut KvMap, prefix: &str) -> Result<Self, PipelineError> {
        let d = Self::default();
        let rules = Self {
            min_chars: kv::take_or(map, &format!("{prefix}min_chars"), d.min_chars)?,
            max_punctuationless_run: kv::take_or(map, &format!("{prefix}max_punctuationless_run"), d.max_punctuationless_run)?,
            max_nsfw_terms: kv::take_or(map, &format!("{prefix}max_nsfw_terms"), d.max_nsfw_terms)?,
            min_lang_tokens: kv::take_or(map, &format!("{prefix}min_lang_tokens"), d.min_lang_tokens)?,
            ..d
        };
        rules.validate()?;
        match map.remove(&format!("{prefix}nsfw_list")) {
            Some(p) => rules.with_nsfw_list(Path::new(&p)),
            None => Ok(rules),
        }
    }

    /// Occurrences of any term in `text`, case-insensitively. A match that
    /// begins or ends inside an ASCII alphanumeric word does not count.
    pub fn nsfw_occurrences(&self, text: &str) -> usize {
        if self.nsfw_terms.is_empty() {
            return 0;
        }
        let lower = text.to_lowercase();
        self.nsfw_terms.iter().map(|t| count_bounded(&lower, t)).sum()
    }
}

fn parse_terms(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

fn count_bounded(hay: &str, term: &str) -> usize {
    let word = |c: Option<char>| c.is_some_and(|c| c.is_ascii_alphanumeric());
    let (first, last) = (term.chars().next(), term.chars().last());
    let mut n = 0;
    let mut from = 0;
    while let Some(pos) = hay[from..].find(term) {
        let start = from + pos;
        let end = start + term.len();
        let before = hay[..start].chars().next_back();
        let after = hay[end..].chars().next();
        let left_ok = !(word(before) && word(first));
        let right_ok = !(word(after) && word(last));
        if left_ok && right_ok {
            n += 1;
            from = end;
        } else {
            from = start + first.map_or(1, char::len_utf8);
        }
    }
    n
}

pub fn filter_document(text: &str, stats: &DocStats, rules: &FilterRules) -> Option<RejectReason> {
    if stats.char_length < rules.min_chars {
        Some(RejectReason::TooShort)
    } else if stats.max_punctuationless_run > rules.max_punctuationless_run {
        Some(RejectReason::PunctuationRun)
    } else if stats.english_word_count + stats.chinese_char_count < rules.min_lang_tokens {
        Some(RejectReason::LangCount)
    } else if rules.nsfw_occurrences(text) > rules.max_nsfw_terms {
        Some(RejectReason::Nsfw)
    } else {
        None
    }
}
