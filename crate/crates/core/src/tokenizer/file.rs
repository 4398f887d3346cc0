//! `JVOC 1` vocabulary files.
//!
//! ```text
//! JVOC 1
//! <hex left> <hex right>      one line per merge, in merge order
//! EXT
//! <char>                      one line per extension token, in id order
//! SPECIAL
//! <token>                     one line per special token, in id order
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{TokenizerError, Vocabulary, END_OF_TEXT};

const HEADER: &str = "JVOC 1";

impl Vocabulary {
    pub fn to_jvoc(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for &(a, b) in &self.merges {
            let _ = writeln!(out, "{} {}", hex::encode(&self.tokens[a as usize]), hex::encode(&self.tokens[b as usize]));
        }
        out.push_str("EXT\n");
        for c in &self.extensions {
            let _ = writeln!(out, "{c}");
        }
        out.push_str("SPECIAL\n");
        for s in &self.specials {
            let _ = writeln!(out, "{s}");
        }
        out
    }

    pub fn from_jvoc(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, msg: String| TokenizerError::Format { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            other => return Err(err(1, format!("expected {HEADER:?}, got {:?}", other.map(|o| o.1)))),
        }
        let mut v = Vocabulary::from_parts(Vec::new(), Vec::new(), Vec::new());
        let mut section = "MERGES";
        let mut extensions = Vec::new();
        let mut specials = Vec::new();
        for (n, line) in lines {
            match (section, line) {
                ("MERGES", "EXT") => section = "EXT",
                ("EXT", "SPECIAL") => section = "SPECIAL",
                ("MERGES", _) => {
                    let (l, r) = line
                        .split_once(' ')
                        .ok_or_else(|| err(n, format!("expected two hex fields, got {line:?}")))?;
                    let lookup = |h: &str| -> Result<u32, TokenizerError> {
                        let bytes = hex::decode(h).map_err(|e| err(n, e.to_string()))?;
                        v.by_bytes.get(&bytes).copied().ok_or_else(|| err(n, format!("unknown token {h}")))
                    };
                    let (a, b) = (lookup(l)?, lookup(r)?);
                    let mut joined = v.tokens[a as usize].clone();
                    joined.extend_from_slice(&v.tokens[b as usize]);
                    if v.by_bytes.contains_key(&joined) {
                        return Err(err(n, "merge duplicates an existing token".into()));
                    }
                    v.push_merge(a, b);
                }
                ("EXT", _) => {
                    let mut cs = line.chars();
                    match (cs.next(), cs.next()) {
                        (Some(c), None) if !c.is_ascii() => extensions.push(c),
                        _ => return Err(err(n, format!("extension {line:?} is not one non-ASCII character"))),
                    }
                }
                ("SPECIAL", _) => {
                    if line.is_empty() {
                        return Err(err(n, "empty special token".into()));
                    }
                    specials.push(line.to_string());
                }
                _ => unreachable!("sections are fixed"),
            }
        }
        if section != "SPECIAL" {
            return Err(err(0, "missing EXT or SPECIAL section".into()));
        }
        if !specials.iter().any(|s| s == END_OF_TEXT) {
            return Err(err(0, format!("SPECIAL section lacks {END_OF_TEXT}")));
        }
        let out = Vocabulary::from_parts(v.merges, specials, Vec::new());
        out.extend_vocab_exact(&extensions)
            .ok_or_else(|| err(0, "extension characters are duplicated or already single tokens".into()))
    }

    /// Adds every char as a new id, failing if any would not be new.
    fn extend_vocab_exact(mut self, chars: &[char]) -> Option<Self> {
        for &c in chars {
            if self.encode(&c.to_string()).len() == 1 {
                return None;
            }
            self.push_extension(c);
        }
        Some(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_jvoc())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_jvoc(&fs::read_to_string(path)?)
    }
}
