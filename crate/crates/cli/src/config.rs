use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use jiang_core::data::{FilterRules, MixtureSpec, PipelineConfig};
use jiang_core::kv::{self, KvMap};
use jiang_core::model::ModelConfig;
use jiang_core::tokenizer::Vocabulary;
use jiang_core::train::{Normalization, TrainSchedule};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "JIANG_SEED";

/// `--seed`, then `JIANG_SEED`, then the config's `seed`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"));
    }
    Ok(config.unwrap_or(0))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub train_corpus: Option<PathBuf>,
    /// Defaults to the training corpus.
    pub eval_corpus: Option<PathBuf>,
    pub eval_task: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Every section of a run, validated together. Relative paths are resolved
/// against the config file's directory.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub filter: FilterRules,
    pub selection: PipelineConfig,
    pub mixture: Option<MixtureSpec>,
    pub normalization: Normalization,
    pub paths: Paths,
    pub vocab: Vocabulary,
    hash: String,
}

impl RunConfig {
    pub fn load(path: &Path, seed_flag: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, seed_flag).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path, seed_flag: Option<u64>) -> Result<Self> {
        let mut map = kv::parse(text)?;
        let mut take_path = |key: &str| map.remove(key).map(|p| base.join(p));
        let paths = Paths {
            vocab: take_path("paths.vocab"),
            train_corpus: take_path("paths.train_corpus"),
            eval_corpus: take_path("paths.eval_corpus"),
            eval_task: take_path("paths.eval_task"),
            output: take_path("paths.output"),
        };
        if let Some(list) = map.get("filter.nsfw_list").cloned() {
            map.insert("filter.nsfw_list".into(), base.join(list).display().to_string());
        }
        let config_seed = match map.remove("seed") {
            Some(s) => Some(s.parse().with_context(|| format!("seed {s:?} is not an unsigned integer"))?),
            None => None,
        };
        let seed = resolve_seed(seed_flag, config_seed)?;

        let vocab = match &paths.vocab {
            Some(p) => Vocabulary::load(p)?,
            None => Vocabulary::byte_level(),
        };
        if !map.contains_key("model.vocab_size") {
            kv::put(&mut map, "model.vocab_size", vocab.size());
        }
        let model = ModelConfig::take_kv(&mut map, "model.")?;
        model.validate()?;
        if model.vocab_size != vocab.size() {
            bail!("model.vocab_size {} does not match the vocabulary's {} tokens", model.vocab_size, vocab.size());
        }
        let schedule = TrainSchedule::take_kv(&mut map, "train.")?;
        let filter = FilterRules::take_kv(&mut map, "filter.")?;
        let selection = PipelineConfig::take_kv(&mut map, "div.")?;
        let normalization: Normalization = map.remove("eval.normalization").as_deref().unwrap_or("none").parse()?;
        let tags: Vec<String> = map.keys().filter_map(|k| k.strip_prefix("mix.").map(str::to_string)).collect();
        let mix: BTreeMap<String, String> = tags
            .into_iter()
            .map(|tag| {
                let v = map.remove(&format!("mix.{tag}")).expect("key listed");
                (tag, v)
            })
            .collect();
        let mixture = if mix.is_empty() {
            None
        } else {
            Some(MixtureSpec::parse(&kv::render(&mix))?)
        };
        kv::ensure_empty(&map)?;

        let mut cfg = Self {
            seed,
            model,
            schedule,
            filter,
            selection,
            mixture,
            normalization,
            paths,
            vocab,
            hash: String::new(),
        };
        cfg.hash = cfg.compute_hash();
        Ok(cfg)
    }

    /// The validated config in canonical form, defaults included.
    pub fn render(&self) -> String {
        let mut map = KvMap::new();
        kv::put(&mut map, "seed", self.seed);
        self.model.write_kv(&mut map, "model.");
        self.schedule.write_kv(&mut map, "train.");
        self.filter.write_kv(&mut map, "filter.");
        map.remove("filter.nsfw_list");
        self.selection.write_kv(&mut map, "div.");
        if let Some(m) = &self.mixture {
            for (tag, p) in m.proportions() {
                kv::put(&mut map, &format!("mix.{tag}"), p);
            }
        }
        kv::put(
            &mut map,
            "eval.normalization",
            match self.normalization {
                Normalization::None => "none",
                Normalization::PerChar => "per_char",
            },
        );
        kv::render(&map)
    }

    fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.render());
        h.update(self.filter.nsfw_terms().join("\n"));
        h.update(self.vocab.to_jvoc());
        hex::encode(h.finalize())
    }

    /// SHA-256 over the canonical config, the term list and the vocabulary.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

/// Plain text gives one document per nonblank line; `.jsonl` gives the
/// `text` field of each line.
pub fn read_texts(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let d: jiang_core::data::Document =
                    serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))?;
                Ok(d.text)
            })
            .collect()
    } else {
        Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
    }
}
