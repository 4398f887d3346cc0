use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{decoder_forward, AttentionPath, DecoderWeights};
use crate::tokenizer::Vocabulary;

use super::TrainError;

/// `log p(targets[i] | inputs[..=i])` for every position.
pub fn token_logprobs(weights: &DecoderWeights, inputs: &[u32], targets: &[u32]) -> Result<Vec<f64>, TrainError> {
    if inputs.len() != targets.len() {
        return Err(TrainError::Config(format!("{} inputs but {} targets", inputs.len(), targets.len())));
    }
    let logits = decoder_forward(inputs, weights, AttentionPath::Naive)?;
    let v = weights.config().vocab_size;
    Ok(logits
        .data()
        .chunks(v)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row[t as usize] - lse
        })
        .collect())
}

/// Sum of negative log-likelihood and number of predicted tokens for one
/// document, evaluated in windows of at most `max_seq_len` predictions.
fn doc_nll(weights: &DecoderWeights, tokens: &[u32]) -> Result<(f64, usize), TrainError> {
    let window = weights.config().max_seq_len;
    let (mut nll, mut n) = (0.0, 0);
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + window).min(tokens.len() - 1);
        let lp = token_logprobs(weights, &tokens[start..end], &tokens[start + 1..end + 1])?;
        nll -= lp.iter().sum::<f64>();
        n += lp.len();
        start = end;
    }
    Ok((nll, n))
}

/// Perplexity over already-tokenized documents, each preceded by `eot`.
pub fn evaluate_ppl_tokens(weights: &DecoderWeights, docs: &[Vec<u32>], eot: u32) -> Result<f64, TrainError> {
    if docs.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let (mut nll, mut n) = (0.0, 0usize);
    for d in docs {
        let mut seq = Vec::with_capacity(d.len() + 1);
        seq.push(eot);
        seq.extend_from_slice(d);
        let (a, b) = doc_nll(weights, &seq)?;
        nll += a;
        n += b;
    }
    if n == 0 {
        return Err(TrainError::EmptyEvalSet);
    }
    Ok((nll / n as f64).exp())
}

/// `exp(mean token cross-entropy)`, teacher-forced, documents independent.
pub fn evaluate_ppl<S: AsRef<str>>(weights: &DecoderWeights, vocab: &Vocabulary, texts: &[S]) -> Result<f64, TrainError> {
    let docs: Vec<Vec<u32>> = texts.iter().map(|t| vocab.encode(t.as_ref())).collect();
    evaluate_ppl_tokens(weights, &docs, vocab.eot_id())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub context: String,
    pub choices: Vec<String>,
    pub answer: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalTask {
    pub items: Vec<McItem>,
}

impl EvalTask {
    pub fn new(items: Vec<McItem>) -> Result<Self, TrainError> {
        for (i, it) in items.iter().enumerate() {
            if it.choices.len() < 2 || it.answer >= it.choices.len() {
                return Err(TrainError::Task {
                    line: i + 1,
                    msg: format!("{} choices with answer {}", it.choices.len(), it.answer),
                });
            }
        }
        Ok(Self { items })
    }

    /// One `{"context","choices","answer"}` object per line.
    pub fn parse_jsonl(text: &str) -> Result<Self, TrainError> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: McItem = serde_json::from_str(line).map_err(|e| TrainError::Task {
                line: i + 1,
                msg: e.to_string(),
            })?;
            items.push(item);
        }
        Self::new(items)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse_jsonl(&fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    #[default]
    None,
    /// Divide each choice's log-likelihood by its length in characters.
    PerChar,
}

impl std::str::FromStr for Normalization {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "per_char" => Ok(Self::PerChar),
            _ => Err(TrainError::Config(format!("unknown normalization {s:?}; expected none or per_char"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemScore {
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub correct: bool,
    /// More than one choice reached the best score; the lowest index won.
    pub tied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McReport {
    pub accuracy: f64,
    pub ties: usize,
    pub items: Vec<ItemScore>,
}

/// Log-likelihood of `choice` after `context` (preceded by end-of-text).
fn choice_loglik(weights: &DecoderWeights, context: &[u32], cont: &[u32]) -> Result<f64, TrainError> {
    let mut seq = Vec::with_capacity(context.len() + cont.len());
    seq.extend_from_slice(context);
    seq.extend_from_slice(cont);
    let max = weights.config().max_seq_len;
    if cont.len() > max {
        return Err(TrainError::PromptTooLong { len: cont.len(), max });
    }
    // keep the most recent `max + 1` tokens
    let from = seq.len().saturating_sub(max + 1);
    let seq = &seq[from..];
    let lp = token_logprobs(weights, &seq[..seq.len() - 1], &seq[1..])?;
    Ok(lp[lp.len() - cont.len()..].iter().sum())
}

pub fn evaluate_multichoice(
    weights: &DecoderWeights,
    vocab: &Vocabulary,
    task: &EvalTask,
    norm: Normalization,
) -> Result<McReport, TrainError> {
    if task.items.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let mut items = Vec::with_capacity(task.items.len());
    for (i, it) in task.items.iter().enumerate() {
        let mut ctx = vec![vocab.eot_id()];
        ctx.extend(vocab.encode(&it.context));
        let mut scores = Vec::with_capacity(it.choices.len());
        for (j, c) in it.choices.iter().enumerate() {
            let cont = vocab.encode(c);
            if cont.is_empty() {
                return Err(TrainError::EmptyChoice { item: i, choice: j });
            }
            let ll = choice_loglik(weights, &ctx, &cont)?;
            scores.push(match norm {
                Normalization::None => ll,
                Normalization::PerChar => ll / c.chars().count() as f64,
            });
        }
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let predicted = scores.iter().position(|&s| s == best).expect("at least two choices");
        let tied = scores.iter().filter(|&&s| s == best).count() > 1;
        items.push(ItemScore {
            correct: predicted == it.answer,
            scores,
            predicted,
            tied,
        });
    }
    let correct = items.iter().filter(|s| s.correct).count();
    Ok(McReport {
        accuracy: correct as f64 / items.len() as f64,
        ties: items.iter().filter(|s| s.tied).count(),
        items,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
    TopK { k: usize, temperature: f64 },
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn sample_scaled(row: &[f64], candidates: &[usize], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = candidates.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates.iter().map(|&i| ((row[i] - max) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&weights).expect("the maximum has weight one");
    candidates[dist.sample(rng)]
}

/// Continues `prompt` by up to `max_new` tokens, stopping early at
/// end-of-text. The context is the prompt preceded by end-of-text, and the
/// model sees at most its last `max_seq_len` tokens.
pub fn generate(
    weights: &DecoderWeights,
    vocab: &Vocabulary,
    prompt: &str,
    max_new: usize,
    strategy: Sampling,
    seed: u64,
) -> Result<String, TrainError> {
    let temp_ok = |t: f64| t > 0.0 && t.is_finite();
    match strategy {
        Sampling::Temperature(t) | Sampling::TopK { temperature: t, .. } if !temp_ok(t) => {
            return Err(TrainError::Config(format!("temperature must be positive, got {t}")));
        }
        Sampling::TopK { k: 0, .. } => return Err(TrainError::Config("top-k needs k >= 1".into())),
        _ => {}
    }
    let max = weights.config().max_seq_len;
    let mut seq = vec![vocab.eot_id()];
    seq.extend(vocab.encode(prompt));
    if seq.len() > max {
        return Err(TrainError::PromptTooLong { len: seq.len(), max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vsize = weights.config().vocab_size;
    let mut out = Vec::new();
    for _ in 0..max_new {
        let from = seq.len().saturating_sub(max);
        let logits = decoder_forward(&seq[from..], weights, AttentionPath::Naive)?;
        let row = &logits.data()[logits.numel() - vsize..];
        let next = match strategy {
            Sampling::Greedy => argmax(row),
            Sampling::Temperature(t) => {
                let all: Vec<usize> = (0..vsize).collect();
                sample_scaled(row, &all, t, &mut rng)
            }
            Sampling::TopK { k, temperature } => {
                let mut idx: Vec<usize> = (0..vsize).collect();
                // stable: equal logits keep the lower id first
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
                idx.truncate(k.min(vsize));
                sample_scaled(row, &idx, temperature, &mut rng)
            }
        } as u32;
        if next == vocab.eot_id() {
            break;
        }
        seq.push(next);
        out.push(next);
    }
    Ok(vocab.decode(&out)?)
}
