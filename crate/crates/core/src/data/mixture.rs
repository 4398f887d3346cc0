use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kv;

use super::{Document, PipelineError};

/// Default pretraining mixture proportions. They sum to 0.9998.
pub const DEFAULT_MIXTURE: [(&str, f64); 8] = [
    ("chinese_internet", 0.4368),
    ("wikipedia", 0.0515),
    ("thepile", 0.1773),
    ("github", 0.1876),
    ("clcf", 0.0963),
    ("business_reports", 0.0354),
    ("ulcf", 0.0138),
    ("lccc", 0.0011),
];

/// Per-source sampling proportions, normalized to sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    raw: BTreeMap<String, f64>,
    normalized: BTreeMap<String, f64>,
}

impl MixtureSpec {
    pub fn default_mix() -> Self {
        Self::new(DEFAULT_MIXTURE.iter().map(|&(k, v)| (k.to_string(), v)).collect()).expect("table is valid")
    }

    /// Normalizes by the sum, then sets the last proportion (in tag order)
    /// to one minus the others so the tag-order sum is exactly 1.0.
    pub fn new(raw: BTreeMap<String, f64>) -> Result<Self, PipelineError> {
        if raw.is_empty() {
            return Err(PipelineError::Config("mixture has no sources".into()));
        }
        if let Some((k, v)) = raw.iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(PipelineError::Config(format!("proportion for {k:?} must be positive, got {v}")));
        }
        let total: f64 = raw.values().sum();
        let mut normalized: BTreeMap<String, f64> = raw.iter().map(|(k, v)| (k.clone(), v / total)).collect();
        let last = normalized.keys().next_back().expect("nonempty").clone();
        let others: f64 = normalized.iter().filter(|(k, _)| **k != last).map(|(_, v)| v).sum();
        normalized.insert(last, 1.0 - others);
        Ok(Self { raw, normalized })
    }

    /// One `tag=proportion` per line.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let map = kv::parse(text)?;
        let mut raw = BTreeMap::new();
        for (k, v) in map {
            let p: f64 = v.parse().map_err(|_| kv::KvError::Value { key: k.clone(), value: v })?;
            raw.insert(k, p);
        }
        Self::new(raw)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?)
    }

    pub fn raw_sum(&self) -> f64 {
        self.raw.values().sum()
    }

    pub fn proportions(&self) -> &BTreeMap<String, f64> {
        &self.normalized
    }

    pub fn get(&self, tag: &str) -> Option<f64> {
        self.normalized.get(tag).copied()
    }
}

/// Draws source tags in proportion to a spec.
#[derive(Clone, Debug)]
pub struct SourceSampler {
    tags: Vec<String>,
    index: WeightedIndex<f64>,
}

impl SourceSampler {
    /// Every tag the spec names must be among `available`.
    pub fn new<'a>(spec: &MixtureSpec, available: impl IntoIterator<Item = &'a str>) -> Result<Self, PipelineError> {
        let have: Vec<&str> = available.into_iter().collect();
        if let Some(tag) = spec.proportions().keys().find(|t| !have.contains(&t.as_str())) {
            return Err(PipelineError::UnknownSource(tag.clone()));
        }
        let tags: Vec<String> = spec.proportions().keys().cloned().collect();
        let index = WeightedIndex::new(spec.proportions().values().copied()).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self { tags, index })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> &str {
        &self.tags[self.index.sample(rng)]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixtureSample {
    /// Exactly the requested number of tokens.
    pub tokens: Vec<u32>,
    /// `(source, document index)` of each sequence drawn, in order.
    pub draws: Vec<(String, usize)>,
}

/// Concatenates documents, each drawn from a source chosen by proportion.
/// Sources recycle their documents in order once exhausted; the last
/// document is cut so exactly `total_tokens` tokens are emitted.
pub fn mixture_sample(
    sources: &BTreeMap<String, Vec<Vec<u32>>>,
    spec: &MixtureSpec,
    total_tokens: usize,
    seed: u64,
) -> Result<MixtureSample, PipelineError> {
    let sampler = SourceSampler::new(spec, sources.keys().map(String::as_str))?;
    for tag in spec.proportions().keys() {
        if sources[tag].iter().all(Vec::is_empty) {
            return Err(PipelineError::EmptySource(tag.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cursor: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = MixtureSample {
        tokens: Vec::with_capacity(total_tokens),
        draws: Vec::new(),
    };
    while out.tokens.len() < total_tokens {
        let tag = sampler.draw(&mut rng);
        let docs = &sources[tag];
        let c = cursor.entry(tag).or_insert(0);
        let idx = *c % docs.len();
        *c += 1;
        out.tokens.extend_from_slice(&docs[idx]);
        out.draws.push((tag.to_string(), idx));
    }
    out.tokens.truncate(total_tokens);
    Ok(out)
}

/// Document-level mixture: `count` documents, recycling per source.
pub fn mix_documents(
    sources: &BTreeMap<String, Vec<Document>>,
    spec: &MixtureSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Document>, PipelineError> {
    let sampler = SourceSampler::new(spec, sources.keys().map(String::as_str))?;
    for tag in spec.proportions().keys() {
        if sources[tag].is_empty() {
            return Err(PipelineError::EmptySource(tag.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cursor: BTreeMap<&str, usize> = BTreeMap::new();
    Ok((0..count)
        .map(|_| {
            let tag = sampler.draw(&mut rng);
            let c = cursor.entry(tag).or_insert(0);
            let doc = sources[tag][*c % sources[tag].len()].clone();
            *c += 1;
            doc
        })
        .collect())
}
