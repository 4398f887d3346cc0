use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use jiang_core::data::{
    compute_stats, diversity_select, filter_document, mix_documents, pipeline_run, DiversityConfig, Document, Embedder, FilterRules,
    MixtureSpec, PipelineConfig, TrigramEmbedder,
};
use jiang_core::kv;
use jiang_core::model::{Checkpoint, DecoderWeights};
use jiang_core::tokenizer::Vocabulary;
use jiang_core::train::{
    evaluate_multichoice, evaluate_ppl, generate as generate_text, parse_csv, run_training, EvalTask, Milestones, Normalization, RunOptions,
    Sampling, TokenStream, Trainer,
};
use serde::Serialize;

use crate::config::{read_texts, resolve_seed, RunConfig};
use crate::tok::load_vocab;
use crate::{EvalMcArgs, EvalPplArgs, GenerateArgs, ModelArgs, PipelineCommand, TrainArgs};

/// Filter rules from a flat key=value file; `nsfw_list` is relative to it.
fn load_rules(path: Option<&Path>) -> Result<FilterRules> {
    let Some(path) = path else {
        return Ok(FilterRules::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading rules {}", path.display()))?;
    let mut map = kv::parse(&text).with_context(|| format!("rules {}", path.display()))?;
    if let Some(list) = map.get("nsfw_list").cloned() {
        let base = path.parent().unwrap_or(Path::new("."));
        map.insert("nsfw_list".into(), base.join(list).display().to_string());
    }
    let rules = FilterRules::take_kv(&mut map, "").with_context(|| format!("rules {}", path.display()))?;
    kv::ensure_empty(&map).with_context(|| format!("rules {}", path.display()))?;
    Ok(rules)
}

/// One `.jsonl` file, or every `.jsonl` file in a directory in name order.
fn read_documents(path: &Path) -> Result<Vec<Document>> {
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .with_context(|| format!("listing {}", path.display()))?;
        files.retain(|f| f.extension().is_some_and(|e| e == "jsonl"));
        files.sort();
        let mut docs = Vec::new();
        for f in &files {
            docs.extend(read_documents(f)?);
        }
        return Ok(docs);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn pipeline(cmd: PipelineCommand) -> Result<()> {
    match cmd {
        PipelineCommand::Run {
            input,
            output,
            rules,
            target_per_source,
            sel,
        } => {
            let rules = load_rules(rules.as_deref())?;
            let d = PipelineConfig::default();
            let cfg = PipelineConfig {
                candidate_quantile: sel.quantile.unwrap_or(d.candidate_quantile),
                target_per_source: target_per_source.unwrap_or(d.target_per_source),
                seed: resolve_seed(sel.seed, None)?,
                embed_buckets: d.embed_buckets,
            };
            let m = pipeline_run(&input, &rules, &cfg, &output)?;
            let rejected: Vec<String> = m.rejected.iter().map(|(k, v)| format!("{k}={v}")).collect();
            outln!("read={} kept={} {}", m.documents_read, m.kept, rejected.join(" "));
            for s in &m.skipped {
                eprintln!("skipped {} line {:?}: {}", s.file, s.line, s.error);
            }
        }
        PipelineCommand::Stats { input, rules } => {
            let rules = load_rules(rules.as_deref())?;
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                source: &'a str,
                #[serde(flatten)]
                stats: jiang_core::data::DocStats,
                verdict: Option<&'static str>,
            }
            for d in read_documents(&input)? {
                let stats = compute_stats(&d.text);
                let row = Row {
                    id: &d.id,
                    source: &d.source,
                    stats,
                    verdict: filter_document(&d.text, &stats, &rules).map(|r| r.as_str()),
                };
                outln!("{}", serde_json::to_string(&row)?);
            }
        }
        PipelineCommand::Select { input, target, sel } => {
            let docs = read_documents(&input)?;
            let embedder = TrigramEmbedder { buckets: 256 };
            let embedded = docs
                .iter()
                .map(|d| Ok((d.id.clone(), embedder.embed(&d.text).with_context(|| format!("document {}", d.id))?)))
                .collect::<Result<Vec<_>>>()?;
            let cfg = DiversityConfig {
                candidate_quantile: sel.quantile.unwrap_or(0.10),
                target_count: target,
                seed: resolve_seed(sel.seed, None)?,
            };
            for id in diversity_select(&embedded, &cfg)? {
                outln!("{id}");
            }
        }
        PipelineCommand::Mix {
            input,
            spec,
            count,
            seed,
            out,
        } => {
            let spec = match spec {
                Some(p) => MixtureSpec::load(&p)?,
                None => MixtureSpec::default_mix(),
            };
            let mut sources: BTreeMap<String, Vec<Document>> = BTreeMap::new();
            for path in &input {
                for d in read_documents(path)? {
                    sources.entry(d.source.clone()).or_default().push(d);
                }
            }
            let mixed = mix_documents(&sources, &spec, count, resolve_seed(seed, None)?)?;
            write_jsonl(&out, &mixed)?;
            let mut per: BTreeMap<&str, usize> = BTreeMap::new();
            for d in &mixed {
                *per.entry(&d.source).or_default() += 1;
            }
            let shares: Vec<String> = per.iter().map(|(k, v)| format!("{k}={v}")).collect();
            outln!("{}", shares.join(" "));
        }
    }
    Ok(())
}

fn encode_all(vocab: &Vocabulary, texts: &[String]) -> Vec<Vec<u32>> {
    texts.iter().map(|t| vocab.encode(t)).collect()
}

#[derive(Serialize)]
struct RunManifest {
    seed: u64,
    config_hash: String,
    resumed_from: Option<String>,
    steps: u64,
    tokens_seen: u64,
    final_loss: Option<f64>,
    final_eval_ppl: Option<f64>,
    final_eval_acc: Option<f64>,
}

pub(crate) fn train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config, a.seed)?;
    let out = a
        .out
        .or_else(|| cfg.paths.output.clone())
        .context("no output directory: set paths.output or pass --out")?;
    let Some(corpus) = &cfg.paths.train_corpus else {
        bail!("paths.train_corpus is not set");
    };
    let docs = encode_all(&cfg.vocab, &read_texts(corpus)?);
    let eval_docs = match &cfg.paths.eval_corpus {
        Some(p) => encode_all(&cfg.vocab, &read_texts(p)?),
        None => docs.clone(),
    };
    let task = cfg.paths.eval_task.as_deref().map(EvalTask::load).transpose()?;
    let stream = TokenStream::pack(&docs, cfg.vocab.eot_id())?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ck.config != cfg.model {
                bail!("checkpoint {} was written for a different model config", path.display());
            }
            Trainer::from_checkpoint(&ck, cfg.schedule.clone(), stream)?
        }
        None => Trainer::new(DecoderWeights::init(&cfg.model, cfg.seed)?, cfg.schedule.clone(), stream)?,
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join("metrics.csv");
    let milestones = Milestones {
        eval_docs: &eval_docs,
        eot: cfg.vocab.eot_id(),
        multichoice: task.as_ref().map(|t| (&cfg.vocab, t, cfg.normalization)),
    };
    let opts = RunOptions {
        checkpoint_dir: Some(out.join("checkpoints")),
        metrics_path: Some(metrics_path.clone()),
        stop_after: a.stop_after,
    };
    run_training(&mut trainer, &milestones, &opts)?;

    let rows = parse_csv(&fs::read_to_string(&metrics_path)?)?;
    let last = rows.last();
    let last_eval = rows.iter().rev().find(|r| r.eval_ppl.is_some() || r.eval_acc.is_some());
    let manifest = RunManifest {
        seed: cfg.seed,
        config_hash: cfg.hash().to_string(),
        resumed_from: a.resume.as_ref().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()),
        steps: trainer.step_count(),
        tokens_seen: trainer.tokens_seen(),
        final_loss: last.map(|r| r.loss),
        final_eval_ppl: last_eval.and_then(|r| r.eval_ppl),
        final_eval_acc: last_eval.and_then(|r| r.eval_acc),
    };
    let path = out.join("run_manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    if let Some(r) = last {
        outln!("step={} tokens_seen={} seq_len={} loss={:.6}", r.step, r.tokens_seen, r.seq_len, r.loss);
    }
    Ok(())
}

struct Loaded {
    weights: DecoderWeights,
    vocab: Vocabulary,
    config: Option<RunConfig>,
    seed: u64,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let config = a.config.as_deref().map(|p| RunConfig::load(p, a.seed)).transpose()?;
    let vocab = match (&a.vocab, &config) {
        (Some(p), _) => load_vocab(Some(p))?,
        (None, Some(c)) => c.vocab.clone(),
        (None, None) => Vocabulary::byte_level(),
    };
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let weights = ck.weights()?;
    if weights.config().vocab_size != vocab.size() {
        bail!(
            "checkpoint has vocab_size {} but the vocabulary has {} tokens",
            weights.config().vocab_size,
            vocab.size()
        );
    }
    let seed = match &config {
        Some(c) => c.seed,
        None => resolve_seed(a.seed, None)?,
    };
    Ok(Loaded {
        weights,
        vocab,
        config,
        seed,
    })
}

fn from_config(explicit: Option<PathBuf>, config: &Option<RunConfig>, pick: fn(&RunConfig) -> Option<PathBuf>) -> Option<PathBuf> {
    explicit.or_else(|| config.as_ref().and_then(pick))
}

pub(crate) fn eval_ppl(a: EvalPplArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let corpus = from_config(a.corpus, &m.config, |c| c.paths.eval_corpus.clone().or_else(|| c.paths.train_corpus.clone()))
        .context("no corpus: pass --corpus or set paths.eval_corpus")?;
    let ppl = evaluate_ppl(&m.weights, &m.vocab, &read_texts(&corpus)?)?;
    outln!("{ppl:.6}");
    Ok(())
}

pub(crate) fn eval_mc(a: EvalMcArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let task_path = from_config(a.task, &m.config, |c| c.paths.eval_task.clone()).context("no task: pass --task or set paths.eval_task")?;
    let task = EvalTask::load(&task_path)?;
    let norm: Normalization = match (&a.normalization, &m.config) {
        (Some(s), _) => s.parse()?,
        (None, Some(c)) => c.normalization,
        (None, None) => Normalization::None,
    };
    let report = evaluate_multichoice(&m.weights, &m.vocab, &task, norm)?;
    outln!("accuracy={:.6} items={} ties={}", report.accuracy, report.items.len(), report.ties);
    Ok(())
}

pub(crate) fn generate(a: GenerateArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let strategy = match a.strategy.as_str() {
        "greedy" => Sampling::Greedy,
        "temperature" => Sampling::Temperature(a.temperature),
        _ => Sampling::TopK {
            k: a.top_k,
            temperature: a.temperature,
        },
    };
    let text = generate_text(&m.weights, &m.vocab, &a.prompt, a.max_new, strategy, m.seed)?;
    outln!("{text}");
    Ok(())
}
