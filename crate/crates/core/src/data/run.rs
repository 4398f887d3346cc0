//! Directory-level driver: read JSONL, filter, select per source, write
//! results and a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::kv::{self, KvMap};

use super::embed::fnv1a_str;
use super::{compute_stats, diversity_select, filter_document, DiversityConfig, Document, Embedder, FilterRules, PipelineError, RejectReason, TrigramEmbedder};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub candidate_quantile: f64,
    /// Per source; sources with fewer kept documents select all of them.
    pub target_per_source: usize,
    pub seed: u64,
    pub embed_buckets: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            candidate_quantile: 0.10,
            target_per_source: 50,
            seed: 0,
            embed_buckets: 256,
        }
    }
}

impl PipelineConfig {
    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        kv::put(map, &format!("{prefix}candidate_quantile"), self.candidate_quantile);
        kv::put(map, &format!("{prefix}target_per_source"), self.target_per_source);
        kv::put(map, &format!("{prefix}seed"), self.seed);
        kv::put(map, &format!("{prefix}embed_buckets"), self.embed_buckets);
    }

    pub fn take_kv(map: &mut KvMap, prefix: &str) -> Result<Self, PipelineError> {
        let d = Self::default();
        let cfg = Self {
            candidate_quantile: kv::take_or(map, &format!("{prefix}candidate_quantile"), d.candidate_quantile)?,
            target_per_source: kv::take_or(map, &format!("{prefix}target_per_source"), d.target_per_source)?,
            seed: kv::take_or(map, &format!("{prefix}seed"), d.seed)?,
            embed_buckets: kv::take_or(map, &format!("{prefix}embed_buckets"), d.embed_buckets)?,
        };
        if cfg.target_per_source == 0 || cfg.embed_buckets == 0 {
            return Err(PipelineError::Config("target_per_source and embed_buckets must be positive".into()));
        }
        if !(cfg.candidate_quantile > 0.0 && cfg.candidate_quantile <= 1.0) {
            return Err(PipelineError::Config(format!("candidate_quantile {} outside (0, 1]", cfg.candidate_quantile)));
        }
        Ok(cfg)
    }
}

/// An input file or line that could not be read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub file: String,
    pub line: Option<usize>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// SHA-256 over the rendered rules, selection config and term list.
    pub config_hash: String,
    pub input_files: Vec<String>,
    pub documents_read: usize,
    pub kept: usize,
    pub rejected: BTreeMap<String, usize>,
    pub selected: BTreeMap<String, Vec<String>>,
    pub skipped: Vec<Skip>,
}

#[derive(Serialize)]
struct Rejected<'a> {
    id: &'a str,
    source: &'a str,
    text: &'a str,
    reason: RejectReason,
}

fn config_hash(rules: &FilterRules, cfg: &PipelineConfig) -> String {
    let mut map = KvMap::new();
    rules.write_kv(&mut map, "filter.");
    map.remove("filter.nsfw_list");
    cfg.write_kv(&mut map, "div.");
    let mut h = Sha256::new();
    h.update(kv::render(&map));
    h.update(rules.nsfw_terms().join("\n"));
    hex::encode(h.finalize())
}

fn read_inputs(dir: &Path, manifest: &mut Manifest) -> Result<Vec<Document>, PipelineError> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| PipelineError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut docs = Vec::new();
    for path in files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        manifest.input_files.push(name.clone());
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                manifest.skipped.push(Skip {
                    file: name,
                    line: None,
                    error: e.to_string(),
                });
                continue;
            }
        };
        for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            if raw.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let skip = |error: String| Skip {
                file: name.clone(),
                line: Some(i + 1),
                error,
            };
            let line = match std::str::from_utf8(raw) {
                Ok(l) => l,
                Err(e) => {
                    manifest.skipped.push(skip(format!("invalid UTF-8: {e}")));
                    continue;
                }
            };
            match serde_json::from_str::<Document>(line) {
                Ok(d) => docs.push(d),
                Err(e) => manifest.skipped.push(skip(e.to_string())),
            }
        }
    }
    Ok(docs)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| PipelineError::io(path, e))
}

/// Filters every `*.jsonl` file of `input` (in name order), runs diversity
/// selection per source over the kept documents, and writes `kept.jsonl`,
/// `rejected.jsonl`, `selected.jsonl` and `manifest.json` to `output`.
/// Unreadable files and malformed lines are recorded and skipped.
pub fn pipeline_run(input: &Path, rules: &FilterRules, cfg: &PipelineConfig, output: &Path) -> Result<Manifest, PipelineError> {
    rules.validate()?;
    let mut manifest = Manifest {
        seed: cfg.seed,
        config_hash: config_hash(rules, cfg),
        input_files: Vec::new(),
        documents_read: 0,
        kept: 0,
        rejected: RejectReason::ALL.iter().map(|r| (r.to_string(), 0)).collect(),
        selected: BTreeMap::new(),
        skipped: Vec::new(),
    };
    let docs = read_inputs(input, &mut manifest)?;
    manifest.documents_read = docs.len();

    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for d in &docs {
        match filter_document(&d.text, &compute_stats(&d.text), rules) {
            None => kept.push(d),
            Some(reason) => {
                *manifest.rejected.get_mut(reason.as_str()).expect("all reasons listed") += 1;
                rejected.push(Rejected {
                    id: &d.id,
                    source: &d.source,
                    text: &d.text,
                    reason,
                });
            }
        }
    }
    manifest.kept = kept.len();

    let mut by_source: BTreeMap<&str, Vec<&Document>> = BTreeMap::new();
    for d in &kept {
        by_source.entry(d.source.as_str()).or_default().push(d);
    }
    let embedder = TrigramEmbedder {
        buckets: cfg.embed_buckets,
    };
    let mut selected_docs = Vec::new();
    for (source, group) in &by_source {
        let embedded = group
            .iter()
            .map(|d| Ok((d.id.clone(), embedder.embed(&d.text)?)))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let dcfg = DiversityConfig {
            candidate_quantile: cfg.candidate_quantile,
            target_count: cfg.target_per_source.min(group.len()),
            seed: cfg.seed ^ fnv1a_str(source),
        };
        let ids = diversity_select(&embedded, &dcfg)?;
        for id in &ids {
            selected_docs.push(*group.iter().find(|d| &d.id == id).expect("selected from group"));
        }
        manifest.selected.insert(source.to_string(), ids);
    }

    fs::create_dir_all(output).map_err(|e| PipelineError::io(output, e))?;
    write_jsonl(&output.join("kept.jsonl"), &kept)?;
    write_jsonl(&output.join("rejected.jsonl"), &rejected)?;
    write_jsonl(&output.join("selected.jsonl"), &selected_docs)?;
    let path = output.join("manifest.json");
    let mut f = fs::File::create(&path).map_err(|e| PipelineError::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| PipelineError::io(&path, e))?;
    Ok(manifest)
}
