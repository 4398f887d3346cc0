use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::embed::cosine;
use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiversityConfig {
    /// Fraction of the least-similar remaining documents to draw from.
    pub candidate_quantile: f64,
    pub target_count: usize,
    pub seed: u64,
}

impl DiversityConfig {
    pub fn new(target_count: usize, seed: u64) -> Self {
        Self {
            candidate_quantile: 0.10,
            target_count,
            seed,
        }
    }
}

/// Grows a pool one document at a time. The first member is uniform; each
/// later one is uniform among the `ceil(q · remaining)` documents whose
/// maximum cosine to the pool is lowest (ties broken by id). Returns ids in
/// selection order.
pub fn diversity_select(docs: &[(String, Vec<f64>)], cfg: &DiversityConfig) -> Result<Vec<String>, PipelineError> {
    let q = cfg.candidate_quantile;
    if !(q > 0.0 && q <= 1.0) {
        return Err(PipelineError::Config(format!("candidate_quantile {q} outside (0, 1]")));
    }
    if docs.is_empty() {
        return Err(PipelineError::NoDocuments);
    }
    if cfg.target_count == 0 {
        return Err(PipelineError::Config("target_count must be at least 1".into()));
    }
    if cfg.target_count > docs.len() {
        return Err(PipelineError::TargetCount {
            target: cfg.target_count,
            available: docs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut remaining: Vec<usize> = (0..docs.len()).collect();
    remaining.sort_by(|&a, &b| docs[a].0.cmp(&docs[b].0));
    let mut sim = vec![f64::NEG_INFINITY; docs.len()];
    let mut chosen = Vec::with_capacity(cfg.target_count);

    let mut pick = remaining.remove(rng.random_range(0..remaining.len()));
    loop {
        chosen.push(docs[pick].0.clone());
        if chosen.len() == cfg.target_count {
            break;
        }
        for &i in &remaining {
            sim[i] = sim[i].max(cosine(&docs[i].1, &docs[pick].1));
        }
        // stable sort keeps id order among equal similarities
        remaining.sort_by(|&a, &b| sim[a].total_cmp(&sim[b]));
        let k = ((q * remaining.len() as f64).ceil() as usize).clamp(1, remaining.len());
        pick = remaining.remove(rng.random_range(0..k));
        remaining.sort_by(|&a, &b| docs[a].0.cmp(&docs[b].0));
    }
    Ok(chosen)
}
