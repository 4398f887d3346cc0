use std::fmt::Write as _;
use std::time::Instant;

use anyhow::Result;
use jiang_core::flash::{memory_estimate, naive_attention, tiled_attention, TileConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BENCH_HEADER: &str = "t,heads,d_head,block_q,block_kv,naive_bytes,tiled_bytes,naive_ms,tiled_ms,max_abs_diff";

pub struct BenchArgs {
    pub lengths: Vec<usize>,
    pub heads: usize,
    pub d_head: usize,
    pub tiles: TileConfig,
    pub reps: usize,
    pub seed: u64,
    /// Leave the timing columns empty so the output is reproducible.
    pub no_timing: bool,
}

fn best_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .fold(f64::INFINITY, f64::min)
}

/// Naive against tiled causal attention in FP32, one CSV row per length.
pub fn bench_attention(a: &BenchArgs) -> Result<String> {
    let mut out = format!("{BENCH_HEADER}\n");
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for &t in &a.lengths {
        let n = a.heads * t * a.d_head;
        let mut gen = || -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
        let (q, k, v) = (gen(), gen(), gen());
        let naive = naive_attention(&q, &k, &v, a.heads, t, a.d_head, true)?;
        let tiled = tiled_attention(&q, &k, &v, a.heads, t, a.d_head, true, a.tiles)?;
        let diff = naive.iter().zip(&tiled).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        let est = memory_estimate(t, a.d_head, a.heads, a.tiles, std::mem::size_of::<f32>());
        let (naive_ms, tiled_ms) = if a.no_timing {
            (String::new(), String::new())
        } else {
            let nm = best_ms(a.reps, || {
                let _ = naive_attention(&q, &k, &v, a.heads, t, a.d_head, true);
            });
            let tm = best_ms(a.reps, || {
                let _ = tiled_attention(&q, &k, &v, a.heads, t, a.d_head, true, a.tiles);
            });
            (format!("{nm:.3}"), format!("{tm:.3}"))
        };
        let c = a.tiles.clamped(t);
        let _ = writeln!(
            out,
            "{t},{},{},{},{},{},{},{naive_ms},{tiled_ms},{diff:e}",
            a.heads, a.d_head, c.block_q, c.block_kv, est.naive_bytes, est.tiled_bytes
        );
    }
    Ok(out)
}
