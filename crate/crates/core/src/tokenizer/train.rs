use std::collections::{BTreeMap, HashMap};

use crate::text::is_cjk_ideograph;

use super::pretok::pieces;
use super::{apply_merge, TokenizerError, Vocabulary, END_OF_TEXT};

/// Greedy BPE: repeatedly merges the most frequent adjacent pair, breaking
/// ties by the lexicographically smaller `(left bytes, right bytes)`.
/// Stops early when no pair remains. A pair whose concatenation already
/// exists as a token is skipped so every token's bytes stay unique.
pub fn train_bpe<I, S>(corpus: I, target_merges: usize) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut freq: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
    let mut any = false;
    for text in corpus {
        let text = text.as_ref();
        any |= !text.is_empty();
        for p in pieces(text.as_bytes()) {
            if p.bytes().len() > 1 {
                *freq.entry(p.bytes().to_vec()).or_default() += 1;
            }
        }
    }
    if !any {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<u32>, usize)> = freq
        .into_iter()
        .map(|(b, n)| (b.into_iter().map(u32::from).collect(), n))
        .collect();

    let mut vocab = Vocabulary::from_parts(Vec::new(), Vec::new(), Vec::new());
    for _ in 0..target_merges {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (w, n) in &words {
            for pair in w.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&((a, b), _)| {
                let mut joined = vocab.tokens[a as usize].clone();
                joined.extend_from_slice(&vocab.tokens[b as usize]);
                !vocab.by_bytes.contains_key(&joined)
            })
            .min_by(|&(pa, ca), &(pb, cb)| {
                cb.cmp(&ca).then_with(|| {
                    let key = |(a, b): (u32, u32)| (&vocab.tokens[a as usize], &vocab.tokens[b as usize]);
                    key(pa).cmp(&key(pb))
                })
            });
        let Some((pair, _)) = best else { break };
        let id = vocab.push_merge(pair.0, pair.1);
        for (w, _) in &mut words {
            if w.len() > 1 {
                *w = apply_merge(w, pair, id);
            }
        }
        words.retain(|(w, _)| w.len() > 1);
    }
    Ok(Vocabulary::from_parts(vocab.merges, vec![END_OF_TEXT.to_string()], Vec::new()))
}

/// Chinese characters of `corpus` by descending frequency (ties by code
/// point), at most `cap` of them.
pub fn frequent_chars(corpus: &str, cap: usize) -> Vec<char> {
    let mut counts: HashMap<char, usize> = HashMap::new();
    for c in corpus.chars().filter(|&c| is_cjk_ideograph(c)) {
        *counts.entry(c).or_default() += 1;
    }
    let mut ranked: Vec<(char, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(cap).map(|(c, _)| c).collect()
}
