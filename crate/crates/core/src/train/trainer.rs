use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::model::{loss_and_grads, Checkpoint, DecoderWeights};
use crate::tensor::{round_to_f32, Tensor};
use crate::tokenizer::Vocabulary;

use super::eval::{evaluate_multichoice, evaluate_ppl_tokens, EvalTask, Normalization};
use super::metrics::{parse_csv, MetricsRow, METRICS_HEADER};
use super::optim::{adamw_step, AdamHyper, OptState};
use super::{TrainError, TrainSchedule};

/// Documents packed into one cyclic token stream, each preceded by
/// end-of-text. Sequences are read at a cursor that advances by the
/// sequence length and wraps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    tokens: Vec<u32>,
    cursor: usize,
}

impl TokenStream {
    pub fn pack(docs: &[Vec<u32>], eot: u32) -> Result<Self, TrainError> {
        let mut tokens = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
        for d in docs {
            tokens.push(eot);
            tokens.extend_from_slice(d);
        }
        if tokens.len() < 2 {
            return Err(TrainError::Config("training corpus has fewer than two tokens".into()));
        }
        Ok(Self { tokens, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Inputs and next-token targets of length `seq_len`.
    pub fn next_sequence(&mut self, seq_len: usize) -> (Vec<u32>, Vec<u32>) {
        let n = self.tokens.len();
        let window: Vec<u32> = (0..=seq_len).map(|i| self.tokens[(self.cursor + i) % n]).collect();
        self.cursor = (self.cursor + seq_len) % n;
        (window[..seq_len].to_vec(), window[1..].to_vec())
    }
}

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

/// Owns the weights and optimizer state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    weights: DecoderWeights,
    opt: OptState,
    schedule: TrainSchedule,
    stream: TokenStream,
    decay: Vec<bool>,
    step: u64,
    tokens_seen: u64,
}

impl Trainer {
    pub fn new(weights: DecoderWeights, schedule: TrainSchedule, stream: TokenStream) -> Result<Self, TrainError> {
        schedule.validate()?;
        let max = weights.config().max_seq_len;
        if schedule.seq_len_extended > max {
            return Err(TrainError::Config(format!(
                "seq_len_extended {} exceeds the model's max_seq_len {max}",
                schedule.seq_len_extended
            )));
        }
        if let Some(&bad) = stream.tokens.iter().find(|&&t| t as usize >= weights.config().vocab_size) {
            return Err(TrainError::Config(format!(
                "token {bad} outside the model vocabulary of {}",
                weights.config().vocab_size
            )));
        }
        let opt = OptState::zeros(weights.tensors().iter().map(Tensor::data));
        // matrices decay; gains and biases do not
        let decay = weights.tensors().iter().map(|t| t.rank() == 2).collect();
        Ok(Self {
            weights,
            opt,
            schedule,
            stream,
            decay,
            step: 0,
            tokens_seen: 0,
        })
    }

    /// Restores weights, moments, step, token count and stream position.
    pub fn from_checkpoint(ck: &Checkpoint, schedule: TrainSchedule, stream: TokenStream) -> Result<Self, TrainError> {
        let weights = ck.weights()?;
        let mut t = Self::new(weights, schedule, stream)?;
        let meta = |k: &str| -> Result<u64, TrainError> {
            ck.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TrainError::Config(format!("checkpoint lacks meta.{k}")))
        };
        if meta("stream_len")? != t.stream.len() as u64 {
            return Err(TrainError::Config("checkpoint was trained on a different corpus".into()));
        }
        t.step = meta("step")?;
        t.opt.step = meta("opt_step")?;
        t.stream.cursor = meta("cursor")? as usize;
        t.tokens_seen = ck.tokens_seen;
        for (i, name) in t.weights.names().iter().enumerate() {
            for (prefix, dst) in [(OPT_M, &mut t.opt.m[i]), (OPT_V, &mut t.opt.v[i])] {
                let src = ck
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| TrainError::Config(format!("checkpoint lacks {prefix}{name}")))?;
                if src.numel() != dst.len() {
                    return Err(TrainError::Config(format!("moment {prefix}{name} has the wrong size")));
                }
                dst.copy_from_slice(src.data());
            }
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_weights(&self.weights, self.tokens_seen);
        ck.meta.insert("step".into(), self.step.to_string());
        ck.meta.insert("opt_step".into(), self.opt.step.to_string());
        ck.meta.insert("cursor".into(), self.stream.cursor.to_string());
        ck.meta.insert("stream_len".into(), self.stream.len().to_string());
        for (i, (name, t)) in self.weights.iter().enumerate() {
            for (prefix, src) in [(OPT_M, &self.opt.m[i]), (OPT_V, &self.opt.v[i])] {
                let moment = Tensor::new(t.shape(), src.clone()).expect("moment matches its parameter");
                ck.tensors.push((format!("{prefix}{name}"), moment));
            }
        }
        ck
    }

    pub fn weights(&self) -> &DecoderWeights {
        &self.weights
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.schedule
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    pub fn is_done(&self) -> bool {
        self.tokens_seen >= self.schedule.total_tokens
    }

    /// One optimizer step over a full token budget. Per-sequence gradients
    /// are summed within each accumulation micro-batch, then averaged.
    pub fn train_step(&mut self) -> Result<MetricsRow, TrainError> {
        let seq_len = self.schedule.seq_len_at(self.tokens_seen);
        let (n_seq, consumed) = self.schedule.batch_at(self.tokens_seen);
        let micro = n_seq.div_ceil(self.schedule.grad_accum);
        let zeros = || -> Vec<Vec<f64>> { self.weights.tensors().iter().map(|t| vec![0.0; t.numel()]).collect() };
        let mut total = zeros();
        let mut loss_sum = 0.0;
        let mut done = 0;
        while done < n_seq {
            let mut acc = zeros();
            for _ in done..(done + micro).min(n_seq) {
                let (inputs, targets) = self.stream.next_sequence(seq_len);
                let (loss, grads) = loss_and_grads(&self.weights, &inputs, &targets)?;
                loss_sum += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            for (t, a) in total.iter_mut().zip(&acc) {
                t.iter_mut().zip(a).for_each(|(x, y)| *x += y);
            }
            done = (done + micro).min(n_seq);
        }
        let inv = 1.0 / n_seq as f64;
        total.iter_mut().flatten().for_each(|g| *g *= inv);

        let lr = self.schedule.lr_at(self.step);
        let hyper = AdamHyper {
            lr,
            beta1: self.schedule.beta1,
            beta2: self.schedule.beta2,
            eps: self.schedule.adam_eps,
            weight_decay: self.schedule.weight_decay,
            grad_clip: Some(self.schedule.grad_clip),
        };
        {
            let mut params: Vec<&mut [f64]> = self.weights.tensors_mut().iter_mut().map(Tensor::data_mut).collect();
            adamw_step(&mut params, &total, &self.decay, &mut self.opt, &hyper)?;
            // state stays FP32-representable so checkpoints resume exactly
            for p in params {
                round_to_f32(p);
            }
        }
        for m in self.opt.m.iter_mut().chain(self.opt.v.iter_mut()) {
            round_to_f32(m);
        }
        self.step += 1;
        self.tokens_seen += consumed as u64;
        Ok(MetricsRow {
            step: self.step,
            tokens_seen: self.tokens_seen,
            seq_len,
            loss: loss_sum * inv,
            lr,
            eval_ppl: None,
            eval_acc: None,
        })
    }
}

/// Held-out material scored at each milestone.
#[derive(Clone, Copy, Debug)]
pub struct Milestones<'a> {
    pub eval_docs: &'a [Vec<u32>],
    pub eot: u32,
    pub multichoice: Option<(&'a Vocabulary, &'a EvalTask, Normalization)>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoints go to `step_NNNNNN.jckp` here at every milestone.
    pub checkpoint_dir: Option<PathBuf>,
    /// Rows are appended as they are produced; on resume, rows past the
    /// resumed step are dropped first.
    pub metrics_path: Option<PathBuf>,
    /// Stop (and checkpoint) after this step, as if interrupted.
    pub stop_after: Option<u64>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.jckp"))
}

fn open_metrics(path: &Path, resumed_step: u64) -> Result<fs::File, TrainError> {
    let mut text = format!("{METRICS_HEADER}\n");
    if resumed_step > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for row in parse_csv(&old)?.into_iter().filter(|r| r.step <= resumed_step) {
                text.push_str(&row.to_csv_line());
                text.push('\n');
            }
        }
    }
    fs::write(path, &text).map_err(|e| TrainError::io(path, e))?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| TrainError::io(path, e))
}

/// Trains until the token total is reached (or `stop_after`), evaluating
/// and checkpointing every `eval_every_steps` steps and at the end.
pub fn run_training(trainer: &mut Trainer, milestones: &Milestones<'_>, opts: &RunOptions) -> Result<Vec<MetricsRow>, TrainError> {
    let mut csv = match &opts.metrics_path {
        Some(p) => Some((p.clone(), open_metrics(p, trainer.step)?)),
        None => None,
    };
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    let mut rows = Vec::new();
    while !trainer.is_done() {
        let mut row = trainer.train_step()?;
        let milestone = row.step % trainer.schedule.eval_every_steps == 0 || trainer.is_done();
        if milestone {
            if !milestones.eval_docs.is_empty() {
                row.eval_ppl = Some(evaluate_ppl_tokens(&trainer.weights, milestones.eval_docs, milestones.eot)?);
            }
            if let Some((vocab, task, norm)) = milestones.multichoice {
                row.eval_acc = Some(evaluate_multichoice(&trainer.weights, vocab, task, norm)?.accuracy);
            }
        }
        let stopping = opts.stop_after.is_some_and(|s| row.step >= s);
        if let Some(dir) = &opts.checkpoint_dir {
            if milestone || stopping {
                trainer.checkpoint().save(&checkpoint_path(dir, row.step))?;
            }
        }
        if let Some((path, f)) = &mut csv {
            writeln!(f, "{}", row.to_csv_line()).map_err(|e| TrainError::io(&*path, e))?;
        }
        rows.push(row);
        if stopping {
            break;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_schedule() -> TrainSchedule {
        TrainSchedule {
            batch_token_budget: 32,
            seq_len_initial: 8,
            seq_len_extended: 16,
            switch_threshold_tokens: 96,
            total_tokens: 192,
            lr: 1e-2,
            eval_every_steps: 2,
            ..TrainSchedule::default()
        }
    }

    fn setup() -> (DecoderWeights, TokenStream) {
        let docs: Vec<Vec<u32>> = (0..4).map(|d| (0..20).map(|i| ((i * 3 + d) % 30) as u32).collect()).collect();
        let w = DecoderWeights::init(&ModelConfig::tiny(32), 1).unwrap();
        (w, TokenStream::pack(&docs, 31).unwrap())
    }

    #[test]
    fn stream_wraps_and_shifts_targets() {
        let mut s = TokenStream::pack(&[vec![1, 2, 3]], 0).unwrap();
        assert_eq!(s.next_sequence(3), (vec![0, 1, 2], vec![1, 2, 3]));
        assert_eq!(s.next_sequence(3), (vec![3, 0, 1], vec![0, 1, 2]));
        assert_eq!(s.cursor(), 2);
        assert!(TokenStream::pack(&[], 0).is_err());
    }

    #[test]
    fn switch_shows_in_rows() {
        let (w, s) = setup();
        let mut t = Trainer::new(w, small_schedule(), s).unwrap();
        let eval = vec![vec![1, 4, 7, 10]];
        let m = Milestones {
            eval_docs: &eval,
            eot: 31,
            multichoice: None,
        };
        let rows = run_training(&mut t, &m, &RunOptions::default()).unwrap();
        let lens: Vec<usize> = rows.iter().map(|r| r.seq_len).collect();
        assert_eq!(lens, [8, 8, 8, 16, 16, 16]);
        assert_eq!(rows[2].tokens_seen, 96);
        assert!(rows.iter().all(|r| r.eval_ppl.is_some() == (r.step % 2 == 0)));
        assert!(rows.last().unwrap().loss < rows[0].loss);
    }

    #[test]
    fn resume_reproduces_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let (w, s) = setup();
        let eval = vec![vec![1, 4, 7, 10]];
        let m = Milestones {
            eval_docs: &eval,
            eot: 31,
            multichoice: None,
        };
        let full_csv = dir.path().join("full.csv");
        let mut a = Trainer::new(w.clone(), small_schedule(), s.clone()).unwrap();
        let full = run_training(
            &mut a,
            &m,
            &RunOptions {
                metrics_path: Some(full_csv.clone()),
                ..RunOptions::default()
            },
        )
        .unwrap();

        let ck_dir = dir.path().join("ck");
        let part_csv = dir.path().join("part.csv");
        let mut b = Trainer::new(w, small_schedule(), s.clone()).unwrap();
        let opts = RunOptions {
            checkpoint_dir: Some(ck_dir.clone()),
            metrics_path: Some(part_csv.clone()),
            stop_after: Some(3),
        };
        assert_eq!(run_training(&mut b, &m, &opts).unwrap().len(), 3);
        let ck = Checkpoint::load(&checkpoint_path(&ck_dir, 3)).unwrap();
        let mut c = Trainer::from_checkpoint(&ck, small_schedule(), s).unwrap();
        let rest = run_training(
            &mut c,
            &m,
            &RunOptions {
                metrics_path: Some(part_csv.clone()),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(&full[3..], rest.as_slice());
        assert_eq!(fs::read(&full_csv).unwrap(), fs::read(&part_csv).unwrap());
        assert_eq!(c.weights(), a.weights());
    }

    #[test]
    fn rejects_mismatched_setups() {
        let (w, s) = setup();
        let long = TrainSchedule {
            seq_len_extended: 128,
            batch_token_budget: 128,
            ..small_schedule()
        };
        assert!(Trainer::new(w.clone(), long, s).is_err());
        let oov = TokenStream::pack(&[vec![40]], 0).unwrap();
        assert!(Trainer::new(w, small_schedule(), oov).is_err());
    }

    #[test]
    fn checkpoint_failure_leaves_previous_intact() {
        let dir = tempfile::tempdir().unwrap();
        let (w, s) = setup();
        let mut t = Trainer::new(w, small_schedule(), s).unwrap();
        let m = Milestones {
            eval_docs: &[],
            eot: 31,
            multichoice: None,
        };
        let ck_dir = dir.path().join("ck");
        let opts = RunOptions {
            checkpoint_dir: Some(ck_dir.clone()),
            stop_after: Some(2),
            ..RunOptions::default()
        };
        run_training(&mut t, &m, &opts).unwrap();
        let good = fs::read(checkpoint_path(&ck_dir, 2)).unwrap();
        // occupy the next checkpoint path with a directory so the rename fails
        fs::create_dir_all(checkpoint_path(&ck_dir, 4)).unwrap();
        fs::write(checkpoint_path(&ck_dir, 4).join("blocker"), b"x").unwrap();
        let opts = RunOptions {
            checkpoint_dir: Some(ck_dir.clone()),
            ..RunOptions::default()
        };
        assert!(run_training(&mut t, &m, &opts).is_err());
        assert_eq!(fs::read(checkpoint_path(&ck_dir, 2)).unwrap(), good);
        let leftovers: Vec<_> = fs::read_dir(&ck_dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
