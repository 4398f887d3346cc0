//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs without the test harness so every verdict is printed; exits
//! nonzero if any criterion fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use jiang_cli::config::RunConfig;
use jiang_core::data::{
    compute_stats, cosine, diversity_select, filter_document, mixture_sample, DiversityConfig, FilterRules, MixtureSpec, RejectReason,
};
use jiang_core::flash::{memory_estimate, naive_attention, tiled_attention, TileConfig};
use jiang_core::model::{loss_and_grads, rope_apply, sequence_loss, BiasPolicy, Checkpoint, DecoderWeights, ModelConfig};
use jiang_core::tensor::{relative_error, Tensor};
use jiang_core::tokenizer::{coverage, train_bpe, Vocabulary};
use jiang_core::train::{
    evaluate_multichoice, parse_csv, run_training, EvalTask, McItem, Milestones, Normalization, RunOptions, TokenStream, TrainSchedule, Trainer,
};
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Per-thread allocation accounting, switched on around the code under test.
struct Counting;

thread_local! {
    static TRACK: Cell<bool> = const { Cell::new(false) };
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
    static BIGGEST: Cell<usize> = const { Cell::new(0) };
    static LARGE: Cell<usize> = const { Cell::new(0) };
    static LARGE_AT: Cell<usize> = const { Cell::new(usize::MAX) };
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let _ = TRACK.try_with(|t| {
            if t.get() {
                let live = LIVE.get() + layout.size() as isize;
                LIVE.set(live);
                PEAK.set(PEAK.get().max(live));
                BIGGEST.set(BIGGEST.get().max(layout.size()));
                if layout.size() >= LARGE_AT.get() {
                    LARGE.set(LARGE.get() + 1);
                }
            }
        });
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        let _ = TRACK.try_with(|t| {
            if t.get() {
                LIVE.set(LIVE.get() - layout.size() as isize);
            }
        });
        unsafe { System.dealloc(ptr, layout) }
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

struct AllocStats {
    peak: usize,
    biggest: usize,
    /// Allocations of at least the threshold size.
    large: usize,
}

fn track<T>(large_at: usize, f: impl FnOnce() -> T) -> (T, AllocStats) {
    LIVE.set(0);
    PEAK.set(0);
    BIGGEST.set(0);
    LARGE.set(0);
    LARGE_AT.set(large_at);
    TRACK.set(true);
    let out = f();
    TRACK.set(false);
    let stats = AllocStats {
        peak: PEAK.get().max(0) as usize,
        biggest: BIGGEST.get(),
        large: LARGE.get(),
    };
    (out, stats)
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn jiang(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_jiang"))
        .args(args)
        .env_remove("JIANG_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Verdict plus one line of evidence.
type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, t0: Instant) -> Result<Duration, String> {
    let el = t0.elapsed();
    if el < limit {
        Ok(el)
    } else {
        Err(format!("took {el:.1?}, limit {limit:?}"))
    }
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        vocab_size: 64,
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    let mut w = DecoderWeights::init(&cfg, 11).map_err(|e| e.to_string())?;
    // nonzero biases so their gradients are not trivially symmetric
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, t) in w.to_named() {
        if name.contains(".b") {
            let fresh: Vec<f64> = (0..t.numel()).map(|_| rng.random_range(-0.1..0.1)).collect();
            w.get_mut(&name).unwrap().data_mut().copy_from_slice(&fresh);
        }
    }
    let inputs: Vec<u32> = (0..10).map(|_| rng.random_range(0..64)).collect();
    let targets: Vec<u32> = (0..10).map(|_| rng.random_range(0..64)).collect();
    let (_, grads) = loss_and_grads(&w, &inputs, &targets).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut coords = 0;
    let names: Vec<String> = w.names().to_vec();
    for (pi, name) in names.iter().enumerate() {
        let n = w.get(name).unwrap().numel();
        for j in 0..n {
            let orig = w.get(name).unwrap().data()[j];
            w.get_mut(name).unwrap().data_mut()[j] = orig + h;
            let up = sequence_loss(&w, &inputs, &targets).map_err(|e| e.to_string())?;
            w.get_mut(name).unwrap().data_mut()[j] = orig - h;
            let down = sequence_loss(&w, &inputs, &targets).map_err(|e| e.to_string())?;
            w.get_mut(name).unwrap().data_mut()[j] = orig;
            worst = worst.max(relative_error(grads[pi][j], (up - down) / (2.0 * h)));
            coords += 1;
        }
    }
    let el = within(Duration::from_secs(30), t0)?;
    check(worst < 1e-3, format!("max relative error {worst:.2e} over {coords} parameters, {el:.1?}"))
}

fn rand_vec<F: Float>(rng: &mut ChaCha8Rng, n: usize) -> Vec<F> {
    (0..n).map(|_| F::from(rng.random_range(-2.0..2.0)).unwrap()).collect()
}

/// Largest deviation between the kernels, plus whether the tiled call made
/// any allocation of `T×T` elements or more beyond its own output.
fn tiled_case<F: Float>(rng: &mut ChaCha8Rng) -> Result<(f64, bool, String), String> {
    let t = rng.random_range(1..=128);
    let heads = rng.random_range(1..=4);
    let d = rng.random_range(1..=32);
    let tiles = TileConfig::new(rng.random_range(1..=80), rng.random_range(1..=80)).unwrap();
    let causal = rng.random_bool(0.5);
    let n = heads * t * d;
    let (q, k, v) = (rand_vec::<F>(rng, n), rand_vec::<F>(rng, n), rand_vec::<F>(rng, n));
    let naive = naive_attention(&q, &k, &v, heads, t, d, causal).map_err(|e| e.to_string())?;
    let elem = std::mem::size_of::<F>();
    let tt = t * t * elem;
    let (tiled, stats) = track(tt, || tiled_attention(&q, &k, &v, heads, t, d, causal, tiles));
    let tiled = tiled.map_err(|e| e.to_string())?;
    let diff = naive
        .iter()
        .zip(&tiled)
        .map(|(a, b)| (*a - *b).abs().to_f64().unwrap())
        .fold(0.0, f64::max);
    let c = tiles.clamped(t);
    let out_bytes = n * elem;
    // only meaningful when every legitimate buffer is smaller than T×T
    let legit = [out_bytes, c.block_q * c.block_kv, c.block_q * (d + 2), c.block_q * d].into_iter().map(|b| b * elem).max().unwrap();
    let informative = c.block_kv < t && legit < tt;
    let est = memory_estimate(t, d, heads, tiles, elem);
    // per-row softmax state and the row accumulator are allocated even when
    // one key block covers the sequence and the estimate counts no state
    let state_bytes = c.block_q * (d * elem + std::mem::size_of::<Vec<F>>() + 2 * elem);
    let budget = out_bytes + est.tiled_bytes as usize + state_bytes + d * elem + 256;
    let ok = (!informative || stats.large == 0) && stats.peak <= budget;
    let note = format!(
        "T={t} h={heads} d={d} tiles={}x{} peak={}B budget={budget}B biggest={}B",
        c.block_q, c.block_kv, stats.peak, stats.biggest
    );
    Ok((diff, ok, note))
}

fn tiled_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let (d32, ok32, note32) = tiled_case::<f32>(&mut rng)?;
        let (d64, ok64, note64) = tiled_case::<f64>(&mut rng)?;
        if !ok32 {
            return Err(format!("f32 case allocated a score-sized buffer: {note32}"));
        }
        if !ok64 {
            return Err(format!("f64 case allocated a score-sized buffer: {note64}"));
        }
        worst32 = worst32.max(d32);
        worst64 = worst64.max(d64);
    }
    // a large case where T×T dwarfs everything the kernel needs
    let t = 1024;
    let (heads, d) = (1, 16);
    let q = rand_vec::<f32>(&mut rng, heads * t * d);
    let (_, big) = track(t * t * 4, || tiled_attention(&q, &q, &q, heads, t, d, true, TileConfig::default()));
    let el = within(Duration::from_secs(60), t0)?;
    check(
        worst32 < 1e-5 && worst64 < 1e-10 && big.large == 0,
        format!(
            "max |tiled-naive| f32 {worst32:.2e}, f64 {worst64:.2e} over 500 cases each; T=1024 peak {} B vs T² {} B; {el:.1?}",
            big.peak,
            t * t * 4
        ),
    )
}

fn rope_relative_position() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.random_range(1..=24);
        let d = 2 * rng.random_range(1..=16);
        let shift = rng.random_range(1..5000);
        let q = Tensor::new(&[1, t, d], rand_vec(&mut rng, t * d)).unwrap();
        let k = Tensor::new(&[1, t, d], rand_vec(&mut rng, t * d)).unwrap();
        let pos: Vec<usize> = (0..t).map(|_| rng.random_range(0..2000)).collect();
        let moved: Vec<usize> = pos.iter().map(|p| p + shift).collect();
        let scores = |positions: &[usize]| -> Vec<f64> {
            let qr = rope_apply(&q, positions, 10_000.0).unwrap();
            let kr = rope_apply(&k, positions, 10_000.0).unwrap();
            let (qd, kd) = (qr.data(), kr.data());
            let mut s = Vec::with_capacity(t * t);
            for i in 0..t {
                for j in 0..t {
                    s.push((0..d).map(|c| qd[i * d + c] * kd[j * d + c]).sum());
                }
            }
            s
        };
        let (a, b) = (scores(&pos), scores(&moved));
        worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    check(worst < 1e-8, format!("max score change under position shift {worst:.2e} over 100 cases"))
}

fn bias_policy_structure() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 3,
        bias_policy: BiasPolicy::QkvOnly,
        ..ModelConfig::tiny(40)
    };
    let w = DecoderWeights::init(&cfg, 1).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("qkv.jckp");
    Checkpoint::from_weights(&w, 0).save(&path).map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let biases: Vec<&str> = ck
        .tensors
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| n.rsplit('.').next().is_some_and(|last| last.starts_with('b')))
        .collect();
    let expected: Vec<String> = (0..3).flat_map(|l| ["bq", "bk", "bv"].map(|b| format!("layers.{l}.{b}"))).collect();
    let none = DecoderWeights::init(
        &ModelConfig {
            bias_policy: BiasPolicy::None,
            ..cfg.clone()
        },
        1,
    )
    .map_err(|e| e.to_string())?;
    let none_biases = none.names().iter().filter(|n| n.rsplit('.').next().unwrap().starts_with('b')).count();
    check(
        biases == expected && none_biases == 0,
        format!("qkv_only checkpoint biases {biases:?}; bias_policy=none has {none_biases}"),
    )
}

fn random_string(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(0..40);
    (0..len)
        .map(|_| match rng.random_range(0..5) {
            0 => rng.random_range(' '..='~'),
            1 => rng.random_range('\u{4e00}'..='\u{9fff}'),
            2 => ['\n', '\t', ' ', '。', '，', 'é', 'ß'][rng.random_range(0..7)],
            3 => rng.random_range('\u{1f300}'..='\u{1faff}'),
            _ => loop {
                if let Some(c) = char::from_u32(rng.random_range(0..0x110000)) {
                    break c;
                }
            },
        })
        .collect()
}

fn tokenizer_round_trip_and_coverage() -> Outcome {
    let t0 = Instant::now();
    let zh = fs::read_to_string(data("zh_desk_corpus.txt")).map_err(|e| e.to_string())?;
    let en = fs::read_to_string(data("smoke_corpus.txt")).map_err(|e| e.to_string())?;
    let base = train_bpe(zh.lines().chain(en.lines()), 300).map_err(|e| e.to_string())?;
    let chars: Vec<String> = fs::read_to_string(data("zh_common_chars.txt"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(str::to_string)
        .collect();
    let vocab = base.extend_vocab(&chars).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..10_000 {
        let s = random_string(&mut rng);
        for v in [&vocab, &base] {
            let back = v.decode(&v.encode(&s)).map_err(|e| e.to_string())?;
            if back != s {
                return Err(format!("string {i} did not round-trip: {s:?} -> {back:?}"));
            }
        }
    }
    let cov = coverage(&vocab, &zh).map_err(|e| e.to_string())?;
    let base_cov = coverage(&base, &zh).map_err(|e| e.to_string())?;
    let el = within(Duration::from_secs(60), t0)?;
    check(
        cov > 0.999,
        format!(
            "10^4 fuzzed strings exact; coverage {cov:.4} with {} listed chars (BPE alone {base_cov:.4}); {el:.1?}",
            chars.len()
        ),
    )
}

fn filter_boundaries() -> Outcome {
    let rules = FilterRules::default().with_nsfw_list(&data("nsfw_terms.txt")).map_err(|e| e.to_string())?;
    let verdict = |text: &str| filter_document(text, &compute_stats(text), &rules);
    let filler = "The river runs past the market, the school and the station every day of the year. \
                  Boats carry rice downstream in spring.";
    let nsfw = |k: usize| format!("{filler} {}", vec!["BlockedTerm."; k].join(" "));
    let words = |n: usize| format!("{} {}", vec!["word"; n].join(" "), "1, 2; ".repeat(10));
    let zh = |n: usize| format!("{}{}", "中".repeat(n), "，1".repeat(20));
    let cases: Vec<(String, String, Option<RejectReason>)> = vec![
        ("3 nsfw".into(), nsfw(3), None),
        ("4 nsfw".into(), nsfw(4), Some(RejectReason::Nsfw)),
        ("4 nsfw, inside words".into(), format!("{filler} xblockedterm blockedterms ablockedterm blockedterm2"), None),
        ("19 words".into(), words(19), Some(RejectReason::LangCount)),
        ("20 words".into(), words(20), None),
        ("19 hanzi".into(), zh(19), Some(RejectReason::LangCount)),
        ("20 hanzi".into(), zh(20), None),
        ("10 words + 10 hanzi".into(), format!("{} {}", words(10), "中".repeat(10)), None),
        ("10 chars".into(), "abcdefghij".into(), Some(RejectReason::TooShort)),
        ("49 chars".into(), "a".repeat(49), Some(RejectReason::TooShort)),
        ("2049-char run".into(), format!("{}。", "中".repeat(2049)), Some(RejectReason::PunctuationRun)),
        ("2048-char run".into(), format!("{}。", "中".repeat(2048)), None),
    ];
    let mut wrong = Vec::new();
    for (name, text, want) in &cases {
        let got = verdict(text);
        if got != *want {
            wrong.push(format!("{name}: {got:?} != {want:?}"));
        }
    }
    // the bundled fixture against its independently computed counts
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    jiang(&[
        "pipeline", "run", "--input", p(&data("pipeline_fixture")), "--output", p(dir.path()), "--rules", p(&data("filter_rules.cfg")),
    ])?;
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let want: serde_json::Value = serde_json::from_str(&fs::read_to_string(data("pipeline_fixture_expected.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    if m["rejected"] != want["rejected"] || m["kept"] != want["kept"] {
        wrong.push(format!("fixture counts {} / {} vs {} / {}", m["kept"], m["rejected"], want["kept"], want["rejected"]));
    }
    check(
        wrong.is_empty(),
        if wrong.is_empty() {
            format!("{} boundary cases exact; 500-doc fixture {} kept, rejected {}", cases.len(), m["kept"], m["rejected"])
        } else {
            wrong.join("; ")
        },
    )
}

fn mean_pairwise(vecs: &[&Vec<f64>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            s += cosine(vecs[i], vecs[j]);
            n += 1;
        }
    }
    s / n as f64
}

fn diversity_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = 24;
    let centers: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let docs: Vec<(String, Vec<f64>)> = (0..300)
        .map(|i| {
            // uneven clusters: 200, 70, 30 documents
            let c = if i < 200 {
                0
            } else if i < 270 {
                1
            } else {
                2
            };
            let mut v: Vec<f64> = centers[c].iter().map(|x| x + rng.random_range(-0.25..0.25)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            (format!("d{i:03}"), v)
        })
        .collect();
    let by_id: BTreeMap<&str, &Vec<f64>> = docs.iter().map(|(id, v)| (id.as_str(), v)).collect();
    let k = 15;
    let (mut sel_sum, mut rand_sum) = (0.0, 0.0);
    for seed in 0..100u64 {
        let ids = diversity_select(&docs, &DiversityConfig::new(k, seed)).map_err(|e| e.to_string())?;
        let chosen: Vec<&Vec<f64>> = ids.iter().map(|id| by_id[id.as_str()]).collect();
        sel_sum += mean_pairwise(&chosen);
        let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut all: Vec<&Vec<f64>> = docs.iter().map(|d| &d.1).collect();
        all.shuffle(&mut r);
        rand_sum += mean_pairwise(&all[..k]);
    }
    let (sel, rnd) = (sel_sum / 100.0, rand_sum / 100.0);

    let trio = vec![
        ("twin_a".to_string(), vec![1.0, 0.0]),
        ("twin_b".to_string(), vec![1.0, 0.0]),
        ("orth".to_string(), vec![0.0, 1.0]),
    ];
    let mut orth_picked = 0;
    for seed in 0..200 {
        let ids = diversity_select(&trio, &DiversityConfig::new(2, seed)).map_err(|e| e.to_string())?;
        orth_picked += usize::from(ids.iter().any(|i| i == "orth"));
    }
    check(
        sel < rnd && orth_picked == 200,
        format!("mean pairwise cosine selected {sel:.4} vs random {rnd:.4} (100 seeds); orthogonal doc chosen {orth_picked}/200"),
    )
}

fn mixture_shares() -> Outcome {
    let spec = MixtureSpec::default_mix();
    let sources: BTreeMap<String, Vec<Vec<u32>>> = spec.proportions().keys().enumerate().map(|(i, tag)| (tag.clone(), vec![vec![i as u32]])).collect();
    let n = 100_000;
    let sample = mixture_sample(&sources, &spec, n, 8).map_err(|e| e.to_string())?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (tag, _) in &sample.draws {
        *counts.entry(tag.as_str()).or_default() += 1;
    }
    let mut worst_z = 0.0f64;
    let mut detail = Vec::new();
    for (tag, &p) in spec.proportions() {
        let emp = counts.get(tag.as_str()).copied().unwrap_or(0) as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        worst_z = worst_z.max((emp - p).abs() / sigma);
        if tag == "chinese_internet" {
            detail.push(format!("chinese_internet {emp:.4} vs {p:.4}"));
        }
    }
    check(
        sample.draws.len() == n && worst_z <= 3.0,
        format!("{} draws; worst deviation {worst_z:.2} sigma; {}", sample.draws.len(), detail.join("")),
    )
}

fn training_smoke(out: &Path) -> Outcome {
    let t0 = Instant::now();
    let summary = jiang(&["train", "--config", p(&data("smoke.cfg")), "--out", p(out)])?;
    let el = within(Duration::from_secs(600), t0)?;
    let rows = parse_csv(&fs::read_to_string(out.join("metrics.csv")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let cfg = RunConfig::load(&data("smoke.cfg"), None).map_err(|e| e.to_string())?;
    let first = rows.first().ok_or("no rows")?;
    let last = rows.last().unwrap();
    let ppl: Vec<f64> = rows.iter().filter_map(|r| r.eval_ppl).collect();
    let switch = rows.windows(2).find(|w| w[1].seq_len != w[0].seq_len).map(|w| (w[0].tokens_seen, w[1].seq_len));
    let threshold = cfg.schedule.switch_threshold_tokens;
    let budget = cfg.schedule.batch_token_budget as u64;
    let ok = rows.len() == 200
        && last.loss < 0.5 * first.loss
        && ppl.len() >= 2
        && ppl[ppl.len() - 1] < ppl[0]
        && switch == Some((threshold, cfg.schedule.seq_len_extended))
        && rows.iter().all(|r| (r.tokens_seen - budget >= threshold) == (r.seq_len == cfg.schedule.seq_len_extended));
    check(
        ok,
        format!(
            "{} steps, loss {:.3} -> {:.3}, milestone ppl {:.2} -> {:.2}, length {:?} after {} tokens, {el:.1?} ({})",
            rows.len(),
            first.loss,
            last.loss,
            ppl.first().copied().unwrap_or(f64::NAN),
            ppl.last().copied().unwrap_or(f64::NAN),
            switch.map(|s| s.1),
            switch.map_or(0, |s| s.0),
            summary.trim()
        ),
    )
}

fn determinism(first_smoke: &Path, scratch: &Path) -> Outcome {
    let again = scratch.join("smoke_again");
    jiang(&["train", "--config", p(&data("smoke.cfg")), "--out", p(&again)])?;
    let mut same = Vec::new();
    let mut differ = Vec::new();
    let mut cmp = |label: &str, a: PathBuf, b: PathBuf| match (fs::read(&a), fs::read(&b)) {
        (Ok(x), Ok(y)) if x == y => same.push(label.to_string()),
        _ => differ.push(label.to_string()),
    };
    cmp("train metrics.csv", first_smoke.join("metrics.csv"), again.join("metrics.csv"));
    cmp("train run_manifest.json", first_smoke.join("run_manifest.json"), again.join("run_manifest.json"));
    cmp(
        "final checkpoint",
        first_smoke.join("checkpoints/step_000200.jckp"),
        again.join("checkpoints/step_000200.jckp"),
    );
    let (pa, pb) = (scratch.join("pipe_a"), scratch.join("pipe_b"));
    for o in [&pa, &pb] {
        jiang(&[
            "pipeline", "run", "--input", p(&data("pipeline_fixture")), "--output", p(o), "--rules", p(&data("filter_rules.cfg")), "--seed", "11",
        ])?;
    }
    for f in ["manifest.json", "selected.jsonl", "kept.jsonl", "rejected.jsonl"] {
        cmp(&format!("pipeline {f}"), pa.join(f), pb.join(f));
    }
    let (sa, sb) = (scratch.join("a.svg"), scratch.join("b.svg"));
    jiang(&["plot", "--metrics", p(&first_smoke.join("metrics.csv")), "--out", p(&sa)])?;
    jiang(&["plot", "--metrics", p(&again.join("metrics.csv")), "--out", p(&sb)])?;
    cmp("plot svg", sa, sb);
    let (va, vb) = (scratch.join("a.jvoc"), scratch.join("b.jvoc"));
    for v in [&va, &vb] {
        jiang(&["tok", "train", "--corpus", p(&data("zh_desk_corpus.txt")), "--merges", "100", "--out", p(v)])?;
    }
    cmp("tok train vocabulary", va, vb);
    check(differ.is_empty(), if differ.is_empty() { format!("byte-identical: {}", same.join(", ")) } else { format!("differ: {}", differ.join(", ")) })
}

fn mc_item(rng: &mut ChaCha8Rng, answer: usize) -> McItem {
    let word = |rng: &mut ChaCha8Rng| -> String { (0..rng.random_range(3..7)).map(|_| rng.random_range('a'..='z')).collect() };
    McItem {
        context: format!("{} {} {}", word(rng), word(rng), word(rng)),
        choices: (0..4).map(|_| format!(" {}", word(rng))).collect(),
        answer,
    }
}

fn multiple_choice() -> Outcome {
    let vocab = Vocabulary::byte_level();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let items: Vec<McItem> = (0..1000).map(|i| mc_item(&mut rng, i % 4)).collect();
    let task = EvalTask::new(items).map_err(|e| e.to_string())?;
    let random = DecoderWeights::init(&ModelConfig::tiny(vocab.size()), 99).map_err(|e| e.to_string())?;
    let chance = evaluate_multichoice(&random, &vocab, &task, Normalization::None).map_err(|e| e.to_string())?;

    // memorize eight items, then score them
    let memo: Vec<McItem> = (0..8)
        .map(|i| McItem {
            context: format!("fact {i} is"),
            choices: vec![" red".into(), " blue".into(), " green".into(), " gold".into()],
            answer: (i * 3) % 4,
        })
        .collect();
    // every training window is one whole document led by end-of-text, as at
    // scoring time; otherwise the cyclic stream lets the previous document
    // stand in for the context
    let seq_len = 24;
    let texts: Vec<Vec<u32>> = memo
        .iter()
        .map(|m| {
            let mut t = vocab.encode(&format!("{}{}.", m.context, m.choices[m.answer]));
            t.resize(seq_len - 1, vocab.encode(".")[0]);
            t
        })
        .collect();
    let cfg = ModelConfig {
        d_model: 32,
        max_seq_len: seq_len,
        ..ModelConfig::tiny(vocab.size())
    };
    let schedule = TrainSchedule {
        batch_token_budget: seq_len * memo.len(),
        seq_len_initial: seq_len,
        seq_len_extended: seq_len,
        switch_threshold_tokens: 0,
        total_tokens: (seq_len * memo.len() * 150) as u64,
        lr: 1e-2,
        warmup_frac: 0.05,
        eval_every_steps: 1000,
        ..TrainSchedule::default()
    };
    let stream = TokenStream::pack(&texts, vocab.eot_id()).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(DecoderWeights::init(&cfg, 3).map_err(|e| e.to_string())?, schedule, stream).map_err(|e| e.to_string())?;
    let m = Milestones {
        eval_docs: &[],
        eot: vocab.eot_id(),
        multichoice: None,
    };
    let rows = run_training(&mut trainer, &m, &RunOptions::default()).map_err(|e| e.to_string())?;
    let memo_task = EvalTask::new(memo).map_err(|e| e.to_string())?;
    let fit = evaluate_multichoice(trainer.weights(), &vocab, &memo_task, Normalization::None).map_err(|e| e.to_string())?;
    let mut spread = [0usize; 4];
    chance.items.iter().for_each(|s| spread[s.predicted] += 1);
    check(
        (chance.accuracy - 0.25).abs() <= 0.05 && fit.accuracy == 1.0,
        format!(
            "random model {:.3} on 1000 balanced items (picks per choice {spread:?}, {} ties); overfit model {:.3} on its 8 items (train loss {:.3})",
            chance.accuracy,
            chance.ties,
            fit.accuracy,
            rows.last().map_or(f64::NAN, |r| r.loss)
        ),
    )
}

fn main() {
    let scratch = tempfile::tempdir().expect("temp dir");
    let smoke = scratch.path().join("smoke");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 gradient fidelity", Box::new(gradient_fidelity)),
        ("2 tiled attention equivalence", Box::new(tiled_equivalence)),
        ("3 rope relative position", Box::new(rope_relative_position)),
        ("4 bias policy structure", Box::new(bias_policy_structure)),
        ("5 tokenizer round trip and coverage", Box::new(tokenizer_round_trip_and_coverage)),
        ("6 filter rule boundaries", Box::new(filter_boundaries)),
        ("7 diversity selection", Box::new(diversity_selection)),
        ("8 mixture sampling", Box::new(mixture_shares)),
        ("9 training smoke", Box::new(|| training_smoke(&smoke))),
        ("10 determinism", Box::new(|| determinism(&smoke, scratch.path()))),
        ("11 multiple-choice harness", Box::new(multiple_choice)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
