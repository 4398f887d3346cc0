use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::DecoderWeights;
use crate::tensor::{round_to_f32, Tensor};

use super::{TokenizerError, Vocabulary};

/// Mean and population standard deviation of `n` samples read by `at`.
fn moments(n: usize, at: impl Fn(usize) -> f64) -> (f64, f64) {
    let mean = (0..n).map(&at).sum::<f64>() / n as f64;
    let var = (0..n).map(|i| (at(i) - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

fn sampler(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("std is finite and non-negative")
}

/// Grows the embedding (and an untied head) to `new_vocab`. Existing rows
/// are copied bit for bit; each new row is drawn per dimension from a
/// normal with that dimension's mean and std over the existing rows.
pub fn resize_embeddings(
    weights: &DecoderWeights,
    old_vocab: &Vocabulary,
    new_vocab: &Vocabulary,
    seed: u64,
) -> Result<DecoderWeights, TokenizerError> {
    let (old, new) = (old_vocab.size(), new_vocab.size());
    if weights.config().vocab_size != old {
        return Err(TokenizerError::Incompatible(format!(
            "weights have vocab_size {}, old vocabulary has {old} ids",
            weights.config().vocab_size
        )));
    }
    old_vocab.is_prefix_of(new_vocab)?;
    if new == old {
        return Ok(weights.clone());
    }
    let d = weights.config().d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let emb = weights.get("tok_embedding").expect("embedding exists").data();
    let col: Vec<Normal<f64>> = (0..d)
        .map(|j| {
            let (m, s) = moments(old, |i| emb[i * d + j]);
            sampler(m, s)
        })
        .collect();
    let mut data = emb.to_vec();
    let mut fresh: Vec<f64> = (0..(new - old) * d).map(|k| col[k % d].sample(&mut rng)).collect();
    round_to_f32(&mut fresh);
    data.extend(fresh);
    let embedding = Tensor::new(&[new, d], data).map_err(crate::model::ModelError::from)?;

    let head = match weights.get("head") {
        None => None,
        Some(h) => {
            let h = h.data();
            let mut data = Vec::with_capacity(d * new);
            for r in 0..d {
                let row = &h[r * old..(r + 1) * old];
                let (m, s) = moments(old, |i| row[i]);
                let dist = sampler(m, s);
                let mut fresh: Vec<f64> = (0..new - old).map(|_| dist.sample(&mut rng)).collect();
                round_to_f32(&mut fresh);
                data.extend_from_slice(row);
                data.extend(fresh);
            }
            Some(Tensor::new(&[d, new], data).map_err(crate::model::ModelError::from)?)
        }
    };
    Ok(weights.with_vocab(new, embedding, head)?)
}
