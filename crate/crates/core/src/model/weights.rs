use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{round_to_f32, Tensor};

use super::{BiasPolicy, ModelConfig, ModelError};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Ones,
    Zeros,
    Normal,
    /// Projections that write into the residual stream.
    ResidualOut,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("layers.{layer}.{part}")
}

/// Every parameter the configuration implies, in canonical order.
fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, v, h) = (cfg.d_model, cfg.vocab_size, cfg.ffn_hidden());
    let qkv_bias = cfg.bias_policy != BiasPolicy::None;
    let other_bias = cfg.bias_policy == BiasPolicy::All;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });

    push("tok_embedding".into(), vec![v, d], Init::Normal);
    for l in 0..cfg.n_layers {
        push(layer_name(l, "attn_norm"), vec![d], Init::Ones);
        for p in ["q", "k", "v"] {
            push(layer_name(l, &format!("w{p}")), vec![d, d], Init::Normal);
            if qkv_bias {
                push(layer_name(l, &format!("b{p}")), vec![d], Init::Zeros);
            }
        }
        push(layer_name(l, "wo"), vec![d, d], Init::ResidualOut);
        if other_bias {
            push(layer_name(l, "bo"), vec![d], Init::Zeros);
        }
        push(layer_name(l, "ffn_norm"), vec![d], Init::Ones);
        if cfg.gated {
            push(layer_name(l, "w_gate"), vec![d, h], Init::Normal);
            if other_bias {
                push(layer_name(l, "b_gate"), vec![h], Init::Zeros);
            }
        }
        push(layer_name(l, "w_up"), vec![d, h], Init::Normal);
        if other_bias {
            push(layer_name(l, "b_up"), vec![h], Init::Zeros);
        }
        push(layer_name(l, "w_down"), vec![h, d], Init::ResidualOut);
        if other_bias {
            push(layer_name(l, "b_down"), vec![d], Init::Zeros);
        }
    }
    push("final_norm".into(), vec![d], Init::Ones);
    if !cfg.tied_head {
        push("head".into(), vec![d, v], Init::Normal);
    }
    specs
}

/// Exact number of scalar parameters for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Named parameter tensors of a decoder, in canonical order.
#[derive(Clone, Debug)]
pub struct DecoderWeights {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl PartialEq for DecoderWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

impl DecoderWeights {
    /// Seeded initialization: norm gains one, biases zero, residual-output
    /// projections `N(0, 0.02/√(2L))`, everything else `N(0, 0.02)`. Values
    /// are rounded to FP32.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for spec in param_specs(config) {
            let n: usize = spec.shape.iter().product();
            let mut data: Vec<f64> = match spec.init {
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::ResidualOut => (0..n).map(|_| resid.sample(&mut rng)).collect(),
            };
            round_to_f32(&mut data);
            tensors.push(Tensor::new(&spec.shape, data)?);
            names.push(spec.name);
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    /// Rebuilds weights from named tensors, requiring exactly the parameter
    /// set and shapes `config` implies (order is free).
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(named.len());
        for (name, t) in named {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(ModelError::Weights(format!("duplicate tensor {name:?}")));
            }
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for spec in param_specs(config) {
            let t = by_name
                .remove(&spec.name)
                .ok_or_else(|| ModelError::Weights(format!("missing tensor {:?}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Weights(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            names.push(spec.name);
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(ModelError::Weights(format!("unexpected tensor {extra:?}")));
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            tensors,
            index,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub(crate) fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Swaps in a new vocabulary size together with replacement embedding
    /// (and untied head) tensors.
    pub(crate) fn with_vocab(&self, vocab_size: usize, embedding: Tensor, head: Option<Tensor>) -> Result<Self, ModelError> {
        let config = ModelConfig {
            vocab_size,
            ..self.config.clone()
        };
        let mut named = self.to_named();
        for (name, t) in &mut named {
            if name == "tok_embedding" {
                *t = embedding.clone();
            } else if name == "head" {
                *t = head.clone().ok_or_else(|| ModelError::Weights("untied head missing".into()))?;
            }
        }
        Self::from_named(&config, named)
    }
}
