use super::PipelineError;

/// Maps text to a fixed-dimension unit vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, PipelineError>;
}

/// Counts of character trigrams hashed (FNV-1a, 64-bit) into buckets, then
/// L2-normalized. Texts shorter than three characters hash as one gram.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrigramEmbedder {
    pub buckets: usize,
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        Self { buckets: 256 }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub(crate) fn fnv1a_str(s: &str) -> u64 {
    fnv1a(s.as_bytes())
}

impl TrigramEmbedder {
    fn bucket(&self, gram: &[char]) -> usize {
        let s: String = gram.iter().collect();
        (fnv1a(s.as_bytes()) % self.buckets as u64) as usize
    }
}

impl Embedder for TrigramEmbedder {
    fn dim(&self) -> usize {
        self.buckets
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, PipelineError> {
        if text.is_empty() {
            return Err(PipelineError::EmptyText);
        }
        let chars: Vec<char> = text.chars().collect();
        let mut v = vec![0.0; self.buckets];
        if chars.len() < 3 {
            v[self.bucket(&chars)] += 1.0;
        } else {
            for g in chars.windows(3) {
                v[self.bucket(g)] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Dot product; equals cosine similarity for unit vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
