use crate::flash::{self, TileConfig};
use crate::tensor::{Tape, Tensor, Var};

use super::layers::attention_tape;
use super::{DecoderWeights, ModelError};

/// How the forward pass computes attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionPath {
    /// Score matrix on the autograd tape; differentiable.
    #[default]
    Naive,
    /// Online-softmax kernel; forward only.
    Tiled(TileConfig),
}

impl AttentionPath {
    pub fn from_flag(use_tiled: bool) -> Self {
        if use_tiled {
            AttentionPath::Tiled(TileConfig::default())
        } else {
            AttentionPath::Naive
        }
    }
}

/// Weights recorded on a tape, addressable by parameter name.
pub(crate) struct Bound<'w> {
    weights: &'w DecoderWeights,
    vars: Vec<Var>,
}

impl<'w> Bound<'w> {
    pub(crate) fn bind(tape: &mut Tape, weights: &'w DecoderWeights, track_grad: bool) -> Self {
        let vars = weights
            .tensors()
            .iter()
            .map(|t| {
                if track_grad {
                    tape.leaf(&t.clone().with_grad(true))
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self { weights, vars }
    }

    fn var(&self, name: &str) -> Var {
        self.opt(name).unwrap_or_else(|| panic!("parameter {name} bound"))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.weights.position(name).map(|i| self.vars[i])
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn check_tokens(tokens: &[u32], weights: &DecoderWeights) -> Result<Vec<usize>, ModelError> {
    let cfg = weights.config();
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    tokens
        .iter()
        .map(|&id| {
            if (id as usize) < cfg.vocab_size {
                Ok(id as usize)
            } else {
                Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: cfg.vocab_size,
                })
            }
        })
        .collect()
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, ModelError> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        Some(b) => tape.add(y, b)?,
        None => y,
    })
}

/// Records the full decoder on `tape` and returns the `[T × vocab]` logits.
pub(crate) fn forward_on_tape(tape: &mut Tape, w: &Bound<'_>, tokens: &[u32], path: AttentionPath) -> Result<Var, ModelError> {
    let cfg = w.weights.config();
    let ids = check_tokens(tokens, w.weights)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let mut x = tape.embedding(w.var("tok_embedding"), &ids)?;
    for l in 0..cfg.n_layers {
        let p = |part: &str| format!("layers.{l}.{part}");
        let h = tape.rms_norm(x, w.var(&p("attn_norm")), cfg.rmsnorm_eps)?;
        let q = linear(tape, h, w.var(&p("wq")), w.opt(&p("bq")))?;
        let k = linear(tape, h, w.var(&p("wk")), w.opt(&p("bk")))?;
        let v = linear(tape, h, w.var(&p("wv")), w.opt(&p("bv")))?;
        let q = tape.split_heads(q, cfg.n_heads)?;
        let k = tape.split_heads(k, cfg.n_heads)?;
        let v = tape.split_heads(v, cfg.n_heads)?;
        let q = tape.rope(q, &positions, cfg.rope_base)?;
        let k = tape.rope(k, &positions, cfg.rope_base)?;
        let attn = match path {
            AttentionPath::Naive => attention_tape(tape, q, k, v, true)?,
            AttentionPath::Tiled(tiles) => {
                if tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v) {
                    return Err(ModelError::ForwardOnly);
                }
                let out = flash::tiled_attention(
                    tape.value(q),
                    tape.value(k),
                    tape.value(v),
                    cfg.n_heads,
                    ids.len(),
                    cfg.head_dim(),
                    true,
                    tiles,
                )?;
                let shape = tape.shape(q).to_vec();
                tape.constant(Tensor::new(&shape, out)?)
            }
        };
        let merged = tape.merge_heads(attn)?;
        let o = linear(tape, merged, w.var(&p("wo")), w.opt(&p("bo")))?;
        x = tape.add(x, o)?;

        let h = tape.rms_norm(x, w.var(&p("ffn_norm")), cfg.rmsnorm_eps)?;
        let f = ffn(tape, h, w, l)?;
        x = tape.add(x, f)?;
    }
    let x = tape.rms_norm(x, w.var("final_norm"), cfg.rmsnorm_eps)?;
    let logits = match w.opt("head") {
        Some(head) => tape.matmul(x, head)?,
        None => tape.matmul_t(x, w.var("tok_embedding"))?,
    };
    Ok(logits)
}

fn ffn(tape: &mut Tape, x: Var, w: &Bound<'_>, l: usize) -> Result<Var, ModelError> {
    let p = |part: &str| format!("layers.{l}.{part}");
    let u = linear(tape, x, w.var(&p("w_up")), w.opt(&p("b_up")))?;
    let hidden = match w.opt(&p("w_gate")) {
        Some(g) => {
            let gx = linear(tape, x, g, w.opt(&p("b_gate")))?;
            let act = tape.silu(gx)?;
            tape.mul(act, u)?
        }
        None => tape.silu(u)?,
    };
    linear(tape, hidden, w.var(&p("w_down")), w.opt(&p("b_down")))
}

/// Logits `[T × vocab]` for `tokens`; deterministic in `(tokens, weights)`.
pub fn decoder_forward(tokens: &[u32], weights: &DecoderWeights, path: AttentionPath) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, weights, false);
    let logits = forward_on_tape(&mut tape, &bound, tokens, path)?;
    Ok(tape.to_tensor(logits))
}

/// Mean next-token cross-entropy of `targets` given `inputs` and its gradient
/// for every parameter, aligned with [`DecoderWeights::tensors`].
pub fn loss_and_grads(weights: &DecoderWeights, inputs: &[u32], targets: &[u32]) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    if inputs.len() != targets.len() {
        return Err(ModelError::Config(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, weights, true);
    let logits = forward_on_tape(&mut tape, &bound, inputs, AttentionPath::Naive)?;
    let tgt: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let loss = tape.cross_entropy(logits, &tgt, None)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    tape.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(weights.tensors())
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Mean cross-entropy without gradients.
pub fn sequence_loss(weights: &DecoderWeights, inputs: &[u32], targets: &[u32]) -> Result<f64, ModelError> {
    let logits = decoder_forward(inputs, weights, AttentionPath::Naive)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let tgt: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let loss = tape.cross_entropy(l, &tgt, None)?;
    Ok(tape.value(loss)[0])
}
