//! Tiled attention with an online softmax.
//!
//! Keys and values are consumed in blocks of `block_kv` rows for each block of
//! `block_q` queries. Per query row only a [`SoftmaxState`] (running max,
//! running denominator, weighted value accumulator) is kept, so the `T × T`
//! score matrix is never materialized: peak scratch is one
//! `block_q × block_kv` score tile plus the states.
//!
//! The kernels are generic over the float type so the same code can be checked
//! in FP32 and FP64. [`naive_attention`] is the materializing reference.

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("q/k/v must each hold heads·T·d_head = {expected} values, got {q}/{k}/{v}")]
    Shape { expected: usize, q: usize, k: usize, v: usize },
    #[error("attention needs positive sizes, got heads={heads} T={t} d_head={d}")]
    Empty { heads: usize, t: usize, d: usize },
    #[error("tile sizes must be at least 1, got block_q={block_q} block_kv={block_kv}")]
    Tile { block_q: usize, block_kv: usize },
}

/// Online-softmax accumulator for one query row.
///
/// With scores `s_j` and values `v_j` seen so far it holds `m = max s_j`,
/// `l = Σ exp(s_j − m)` and `acc = Σ exp(s_j − m)·v_j`, so `acc / l` is the
/// attention output over those keys.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxState<F> {
    pub m: F,
    pub l: F,
    pub acc: Vec<F>,
}

impl<F: Float> SoftmaxState<F> {
    /// Identity element of [`SoftmaxState::merge`].
    pub fn empty(d: usize) -> Self {
        Self {
            m: F::neg_infinity(),
            l: F::zero(),
            acc: vec![F::zero(); d],
        }
    }

    /// State after seeing exactly one key with `score` and value row `v`.
    pub fn singleton(score: F, v: &[F]) -> Self {
        Self {
            m: score,
            l: F::one(),
            acc: v.to_vec(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.l == F::zero()
    }

    pub fn merge(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.absorb(other.m, other.l, &other.acc);
        out
    }

    /// In-place merge with the partial state `(m, l, acc)`.
    pub fn absorb(&mut self, m: F, l: F, acc: &[F]) {
        debug_assert_eq!(acc.len(), self.acc.len());
        if l == F::zero() {
            return;
        }
        if self.is_empty() {
            self.m = m;
            self.l = l;
            self.acc.copy_from_slice(acc);
            return;
        }
        let m_new = self.m.max(m);
        let a = (self.m - m_new).exp();
        let b = (m - m_new).exp();
        self.l = self.l * a + l * b;
        for (x, &y) in self.acc.iter_mut().zip(acc) {
            *x = *x * a + y * b;
        }
        self.m = m_new;
    }

    /// `acc / l`; zeros for an empty state.
    pub fn output(&self) -> Vec<F> {
        if self.is_empty() {
            return vec![F::zero(); self.acc.len()];
        }
        self.acc.iter().map(|&x| x / self.l).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileConfig {
    pub block_q: usize,
    pub block_kv: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            block_q: 64,
            block_kv: 64,
        }
    }
}

impl TileConfig {
    pub fn new(block_q: usize, block_kv: usize) -> Result<Self, AttentionError> {
        if block_q == 0 || block_kv == 0 {
            return Err(AttentionError::Tile { block_q, block_kv });
        }
        Ok(Self { block_q, block_kv })
    }

    /// Block sizes clamped to the sequence length.
    pub fn clamped(self, t: usize) -> Self {
        Self {
            block_q: self.block_q.min(t).max(1),
            block_kv: self.block_kv.min(t).max(1),
        }
    }
}

fn check_dims(q: usize, k: usize, v: usize, heads: usize, t: usize, d: usize) -> Result<(), AttentionError> {
    if heads == 0 || t == 0 || d == 0 {
        return Err(AttentionError::Empty { heads, t, d });
    }
    let expected = heads * t * d;
    if q != expected || k != expected || v != expected {
        return Err(AttentionError::Shape { expected, q, k, v });
    }
    Ok(())
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

/// Tiled attention over row-major `[heads × T × d]` inputs.
///
/// Same contract as the materializing reference: `softmax(q·kᵀ/√d + mask)·v`
/// with key `j` hidden from query `i` when `causal && j > i`.
pub fn tiled_attention<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    heads: usize,
    t: usize,
    d: usize,
    causal: bool,
    tiles: TileConfig,
) -> Result<Vec<F>, AttentionError> {
    check_dims(q.len(), k.len(), v.len(), heads, t, d)?;
    let TileConfig { block_q, block_kv } = TileConfig::new(tiles.block_q, tiles.block_kv)?.clamped(t);
    let scale = F::one() / F::from(d).expect("d fits in float").sqrt();

    let mut out = vec![F::zero(); heads * t * d];
    let mut scores = vec![F::zero(); block_q * block_kv];
    let mut states: Vec<SoftmaxState<F>> = (0..block_q).map(|_| SoftmaxState::empty(d)).collect();
    let mut partial = vec![F::zero(); d];

    for h in 0..heads {
        let base = h * t * d;
        let (qh, kh, vh) = (&q[base..base + t * d], &k[base..base + t * d], &v[base..base + t * d]);
        for qs in (0..t).step_by(block_q) {
            let qe = (qs + block_q).min(t);
            for s in &mut states[..qe - qs] {
                s.m = F::neg_infinity();
                s.l = F::zero();
                s.acc.iter_mut().for_each(|x| *x = F::zero());
            }
            for ks in (0..t).step_by(block_kv) {
                if causal && ks > qe - 1 {
                    break;
                }
                let ke = (ks + block_kv).min(t);
                let width = ke - ks;
                for i in qs..qe {
                    let row = &mut scores[(i - qs) * block_kv..(i - qs) * block_kv + width];
                    let qi = &qh[i * d..(i + 1) * d];
                    for (jj, sc) in row.iter_mut().enumerate() {
                        let j = ks + jj;
                        *sc = dot(qi, &kh[j * d..(j + 1) * d]) * scale;
                    }
                }
                for i in qs..qe {
                    // Keys visible to row i inside this block.
                    let visible = if causal { (i + 1).min(ke).saturating_sub(ks) } else { width };
                    if visible == 0 {
                        continue;
                    }
                    let row = &scores[(i - qs) * block_kv..(i - qs) * block_kv + visible];
                    let mb = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut lb = F::zero();
                    partial.iter_mut().for_each(|x| *x = F::zero());
                    for (jj, &sc) in row.iter().enumerate() {
                        let p = (sc - mb).exp();
                        lb = lb + p;
                        let vj = &vh[(ks + jj) * d..(ks + jj + 1) * d];
                        for (acc, &x) in partial.iter_mut().zip(vj) {
                            *acc = *acc + p * x;
                        }
                    }
                    states[i - qs].absorb(mb, lb, &partial);
                }
            }
            for i in qs..qe {
                let st = &states[i - qs];
                let o = &mut out[base + i * d..base + (i + 1) * d];
                for (dst, &a) in o.iter_mut().zip(&st.acc) {
                    *dst = a / st.l;
                }
            }
        }
    }
    Ok(out)
}

/// Materializing reference: full score row per query, stable softmax, then
/// the weighted sum of values.
pub fn naive_attention<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    heads: usize,
    t: usize,
    d: usize,
    causal: bool,
) -> Result<Vec<F>, AttentionError> {
    check_dims(q.len(), k.len(), v.len(), heads, t, d)?;
    let scale = F::one() / F::from(d).expect("d fits in float").sqrt();
    let mut out = vec![F::zero(); heads * t * d];
    let mut scores = vec![F::zero(); t * t];
    for h in 0..heads {
        let base = h * t * d;
        for i in 0..t {
            for j in 0..t {
                scores[i * t + j] = dot(&q[base + i * d..base + (i + 1) * d], &k[base + j * d..base + (j + 1) * d]) * scale;
            }
        }
        for i in 0..t {
            let n = if causal { i + 1 } else { t };
            let row = &mut scores[i * t..i * t + n];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum = sum + *s;
            }
            for (j, &p) in row.iter().enumerate() {
                let w = p / sum;
                for c in 0..d {
                    out[base + i * d + c] = out[base + i * d + c] + w * v[base + j * d + c];
                }
            }
        }
    }
    Ok(out)
}

/// Auxiliary attention storage in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryEstimate {
    /// `heads · T² · elem` for the full score matrix.
    pub naive_bytes: u64,
    /// `heads · block_q · block_kv · elem` for the score tile, plus the
    /// per-row softmax states (`block_q · (d_head + 2)` values per head) when
    /// more than one key block is needed. A single key block is an ordinary
    /// one-pass softmax and needs no running state.
    pub tiled_bytes: u64,
}

pub fn memory_estimate(t: usize, d_head: usize, heads: usize, tiles: TileConfig, elem_size: usize) -> MemoryEstimate {
    let TileConfig { block_q, block_kv } = tiles.clamped(t);
    let (t, d, h, e) = (t as u64, d_head as u64, heads as u64, elem_size as u64);
    let naive_bytes = h * t * t * e;
    let tile = h * block_q as u64 * block_kv as u64 * e;
    let state = if (block_kv as u64) < t {
        h * block_q as u64 * (d + 2) * e
    } else {
        0
    };
    MemoryEstimate {
        naive_bytes,
        tiled_bytes: tile + state,
    }
}
