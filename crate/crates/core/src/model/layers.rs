//! The decoder's building blocks, as standalone tensor functions and as tape
//! fragments the full forward pass composes.

use crate::tensor::{Tape, Tensor, TensorError, Var};

use super::ModelError;

pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let (xv, gv) = (tape.leaf(x), tape.leaf(gain));
    let y = tape.rms_norm(xv, gv, eps)?;
    Ok(tape.to_tensor(y))
}

/// Rotary embedding of `x[heads × T × d_head]` at the given positions.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor, ModelError> {
    if x.rank() != 3 {
        return Err(TensorError::Shape {
            op: "rope_apply",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len()],
        }
        .into());
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let y = tape.rope(v, positions, base)?;
    Ok(tape.to_tensor(y))
}

/// `softmax(q·kᵀ/√d + mask)·v` per head on the tape.
pub(crate) fn attention_tape(tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool) -> Result<Var, TensorError> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 3 || sq != sk || sq != sv {
        return Err(TensorError::Shape {
            op: "attention",
            lhs: sq.to_vec(),
            rhs: if sq != sk { sk.to_vec() } else { sv.to_vec() },
        });
    }
    let d = sq[2];
    let scores = tape.batch_matmul(q, k, true)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let probs = if causal { tape.causal_softmax(scaled)? } else { tape.softmax(scaled, 2)? };
    tape.batch_matmul(probs, v, false)
}

/// Attention over `[heads × T × d_head]` inputs.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v));
    let out = attention_tape(&mut tape, qv, kv, vv, causal)?;
    Ok(tape.to_tensor(out))
}

/// `down(silu(gate(x)) ⊙ up(x))`, or `down(silu(up(x)))` without a gate.
/// Inputs are `[rows × d]`; no projection has a bias.
pub(crate) fn ffn_tape(tape: &mut Tape, x: Var, gate: Option<Var>, up: Var, down: Var) -> Result<Var, TensorError> {
    let u = tape.matmul(x, up)?;
    let hidden = match gate {
        Some(g) => {
            let gx = tape.matmul(x, g)?;
            let act = tape.silu(gx)?;
            tape.mul(act, u)?
        }
        None => tape.silu(u)?,
    };
    tape.matmul(hidden, down)
}

/// Gated FFN on `x[... × d]` with weights `gate[d×h]`, `up[d×h]`,
/// `down[h×d]`.
pub fn gated_ffn(x: &Tensor, w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor) -> Result<Tensor, ModelError> {
    let d = *x.shape().last().expect("tensors have rank >= 1 or are scalars");
    let rows = x.numel() / d;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let flat = tape.reshape(xv, &[rows, d])?;
    let (g, u, dn) = (tape.leaf(w_gate), tape.leaf(w_up), tape.leaf(w_down));
    let y = ffn_tape(&mut tape, flat, Some(g), u, dn)?;
    let y = tape.reshape(y, x.shape())?;
    Ok(tape.to_tensor(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn rms_norm_examples() {
        let ones = Tensor::ones(&[4]);
        let y = rms_norm(&ones, &ones, 1e-12).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-10));

        let z = rms_norm(&Tensor::zeros(&[4]), &ones, 1e-6).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        // [3,4] / sqrt((9+16)/2)
        let y = rms_norm(&t(&[2], vec![3.0, 4.0]), &Tensor::ones(&[2]), 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((y.data()[1] - 4.0 / r).abs() < 1e-15);
        assert!((y.data()[0] - 0.848_528_137_423_857).abs() < 1e-12);

        assert!(rms_norm(&Tensor::ones(&[3]), &Tensor::ones(&[2]), 1e-6).is_err());
    }

    #[test]
    fn rms_norm_is_scale_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // |x| in [1, 3], well above sqrt(eps)
        let x = t(&[3, 8], (0..24).map(|i| rng.random_range(1.0..3.0) * if i % 3 == 0 { -1.0 } else { 1.0 }).collect());
        let g = random(&mut rng, &[8]);
        let base = rms_norm(&x, &g, 1e-6).unwrap();
        for c in [1.5, 3.0, 100.0] {
            let xs = t(&[3, 8], x.data().iter().map(|v| v * c).collect());
            let y = rms_norm(&xs, &g, 1e-6).unwrap();
            assert!(y.max_abs_diff(&base).unwrap() < 1e-6);
        }
    }

    #[test]
    fn rope_examples() {
        let x = t(&[1, 1, 2], vec![1.0, 0.0]);
        let y = rope_apply(&x, &[1], 10_000.0).unwrap();
        assert!((y.data()[0] - 1f64.cos()).abs() < 1e-15);
        assert!((y.data()[1] - 1f64.sin()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[2, 3, 8]);
        assert_eq!(rope_apply(&x, &[0, 0, 0], 10_000.0).unwrap(), x);
        assert!(rope_apply(&random(&mut rng, &[1, 2, 3]), &[0, 1], 10_000.0).is_err());
    }

    #[test]
    fn rope_dot_depends_on_offset_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let q = random(&mut rng, &[1, 1, 8]);
            let k = random(&mut rng, &[1, 1, 8]);
            let (m, n) = (rng.random_range(0..50), rng.random_range(0..50));
            let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
            let reference = dot(&rope_apply(&q, &[m], 1e4).unwrap(), &rope_apply(&k, &[n], 1e4).unwrap());
            for s in [1, 5, 17] {
                let shifted = dot(&rope_apply(&q, &[m + s], 1e4).unwrap(), &rope_apply(&k, &[n + s], 1e4).unwrap());
                assert!((shifted - reference).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn attention_single_position_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random(&mut rng, &[2, 1, 4]), random(&mut rng, &[2, 1, 4]), random(&mut rng, &[2, 1, 4]));
        assert_eq!(attention(&q, &k, &v, true).unwrap(), v);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let krow = random(&mut rng, &[4]);
        let k = t(&[1, 5, 4], krow.data().repeat(5));
        let v = random(&mut rng, &[1, 5, 4]);
        let mean: Vec<f64> = (0..4).map(|c| (0..5).map(|j| v.data()[j * 4 + c]).sum::<f64>() / 5.0).collect();
        for _ in 0..3 {
            let q = random(&mut rng, &[1, 5, 4]);
            let out = attention(&q, &k, &v, false).unwrap();
            for row in out.data().chunks(4) {
                for (a, b) in row.iter().zip(&mean) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn attention_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, tt, d) = (2, 6, 4);
        let q = random(&mut rng, &[h, tt, d]);
        let k = random(&mut rng, &[h, tt, d]);
        let v = random(&mut rng, &[h, tt, d]);
        for causal in [false, true] {
            let out = attention(&q, &k, &v, causal).unwrap();
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            for hh in 0..h {
                for i in 0..tt {
                    let n = if causal { i + 1 } else { tt };
                    let mut s = vec![0.0; n];
                    for (j, sj) in s.iter_mut().enumerate() {
                        for c in 0..d {
                            *sj += qd[(hh * tt + i) * d + c] * kd[(hh * tt + j) * d + c];
                        }
                        *sj /= (d as f64).sqrt();
                    }
                    let z: f64 = s.iter().map(|x| x.exp()).sum();
                    for c in 0..d {
                        let want: f64 = (0..n).map(|j| s[j].exp() / z * vd[(hh * tt + j) * d + c]).sum();
                        assert!((out.data()[(hh * tt + i) * d + c] - want).abs() < 1e-10);
                    }
                }
            }
        }
        assert!(attention(&q, &random(&mut rng, &[h, tt, 2]), &v, false).is_err());
    }

    #[test]
    fn zero_gate_silences_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[3, 4]);
        let y = gated_ffn(&x, &Tensor::zeros(&[4, 10]), &random(&mut rng, &[4, 10]), &random(&mut rng, &[10, 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_identity_toy_by_hand() {
        let eye = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2], vec![1.0, -2.0]);
        let y = gated_ffn(&x, &eye, &eye, &eye).unwrap();
        let silu = |z: f64| z / (1.0 + (-z).exp());
        assert!((y.data()[0] - silu(1.0) * 1.0).abs() < 1e-15);
        assert!((y.data()[1] - silu(-2.0) * -2.0).abs() < 1e-15);
    }

    #[test]
    fn ffn_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = vec![
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[4, 10]),
            random(&mut rng, &[4, 10]),
            random(&mut rng, &[10, 4]),
        ];
        let report = grad_check_many(
            |tape, v| {
                let y = ffn_tape(tape, v[0], Some(v[1]), v[2], v[3])?;
                let y2 = tape.mul(y, y)?;
                tape.sum(y2)
            },
            &inputs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
