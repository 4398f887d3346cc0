use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use jiang_core::model::Checkpoint;
use jiang_core::tokenizer::{coverage, frequent_chars, resize_embeddings, train_bpe, Vocabulary};

use crate::config::{read_texts, resolve_seed};
use crate::TokCommand;

pub(crate) fn load_vocab(path: Option<&Path>) -> Result<Vocabulary> {
    match path {
        Some(p) => Vocabulary::load(p).with_context(|| format!("loading vocabulary {}", p.display())),
        None => Ok(Vocabulary::byte_level()),
    }
}

fn read_chars(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

pub(crate) fn execute(cmd: TokCommand) -> Result<()> {
    match cmd {
        TokCommand::Train { corpus, merges, out } => {
            let vocab = train_bpe(read_texts(&corpus)?, merges)?;
            vocab.save(&out)?;
            outln!("{} tokens ({} merges)", vocab.size(), vocab.merges().len());
        }
        TokCommand::Extend {
            vocab,
            chars,
            from_corpus,
            cap,
            out,
            checkpoint,
            checkpoint_out,
            seed,
        } => {
            let old = load_vocab(Some(&vocab))?;
            let chars: Vec<String> = match (chars, from_corpus) {
                (Some(p), _) => read_chars(&p)?,
                (None, Some(p)) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    frequent_chars(&text, cap).into_iter().map(String::from).collect()
                }
                (None, None) => bail!("give --chars or --from-corpus"),
            };
            let new = old.extend_vocab(&chars)?;
            if let (Some(src), Some(dst)) = (checkpoint, checkpoint_out) {
                let ck = Checkpoint::load(&src)?;
                let resized = resize_embeddings(&ck.weights()?, &old, &new, resolve_seed(seed, None)?)?;
                Checkpoint::from_weights(&resized, ck.tokens_seen).save(&dst)?;
            }
            new.save(&out)?;
            outln!("{} tokens ({} added)", new.size(), new.size() - old.size());
        }
        TokCommand::Encode { vocab, text } => {
            let ids = load_vocab(vocab.as_deref())?.encode(&text);
            outln!("{}", ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" "));
        }
        TokCommand::Decode { vocab, ids } => {
            outln!("{}", load_vocab(vocab.as_deref())?.decode(&ids)?);
        }
        TokCommand::Coverage { vocab, corpus } => {
            let v = load_vocab(vocab.as_deref())?;
            let text = fs::read_to_string(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
            outln!("{:.6}", coverage(&v, &text)?);
        }
        TokCommand::Chars { corpus, cap, out } => {
            let text = fs::read_to_string(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
            let chars = frequent_chars(&text, cap);
            let body: String = chars.iter().map(|c| format!("{c}\n")).collect();
            fs::write(&out, body).with_context(|| format!("writing {}", out.display()))?;
            outln!("{} characters", chars.len());
        }
    }
    Ok(())
}
