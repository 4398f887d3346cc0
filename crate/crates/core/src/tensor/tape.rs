use super::{numel, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Silu,
    Exp,
    Scale,
}

/// Right-hand side of [`Tape::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
    /// For unary operations.
    None,
}

const DIV_GUARD: f64 = 1e-30;

#[derive(Debug)]
enum Op {
    Leaf,
    /// `b` is either the same shape as `a` or a suffix of it (repeated).
    Binary {
        kind: ElemOp,
        a: Var,
        b: Var,
    },
    ScalarRhs {
        kind: ElemOp,
        a: Var,
        c: f64,
    },
    Silu(Var),
    Exp(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Per-batch `a[i] · b[i]` (or `a[i] · b[i]ᵀ` when `trans_b`).
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CausalSoftmax {
        a: Var,
        t: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        angles: Vec<(f64, f64)>,
        t: usize,
        d: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        a: Var,
        t: usize,
        heads: usize,
        dh: usize,
    },
    MergeHeads {
        a: Var,
        t: usize,
        heads: usize,
        dh: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a valid topological order:
/// an operation can only reference values that already exist.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Lazily allocated gradient buffer for an input that wants one.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Records a leaf, inheriting `requires_grad` from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if cfg!(debug_assertions) && value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Binary { a, b, .. }
            | Op::MatMul { a, b, .. }
            | Op::BatchMatMul { a, b, .. } => rg(a) || rg(b),
            Op::RmsNorm { x, gain, .. } => rg(x) || rg(gain),
            Op::ScalarRhs { a, .. }
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Softmax { a, .. }
            | Op::CausalSoftmax { a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SplitHeads { a, .. }
            | Op::MergeHeads { a, .. }
            | Op::Reshape(a) => rg(a),
            Op::CrossEntropy { logits, .. } => rg(logits),
            Op::Rope { x, .. } => rg(x),
            Op::Embedding { table, .. } => rg(table),
        }
    }

    // ----- elementwise ---------------------------------------------------

    /// Pointwise operation. Binary kinds accept a same-shape tensor, a tensor
    /// whose shape is a trailing suffix of `a`'s (repeated over the leading
    /// dimensions), or a scalar.
    pub fn elementwise(&mut self, kind: ElemOp, a: Var, b: Operand) -> Result<Var> {
        match (kind, b) {
            (ElemOp::Silu, _) => self.silu(a),
            (ElemOp::Exp, _) => self.exp(a),
            (ElemOp::Scale, Operand::Scalar(c)) => self.scalar_op(ElemOp::Mul, a, c),
            (ElemOp::Scale, _) => Err(TensorError::Contract("scale needs a scalar operand".into())),
            (_, Operand::Scalar(c)) => self.scalar_op(kind, a, c),
            (_, Operand::Var(b)) => self.binary(kind, a, b),
            (_, Operand::None) => Err(TensorError::Contract(format!("{kind:?} needs a second operand"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.scalar_op(ElemOp::Mul, a, c)
    }

    fn binary(&mut self, kind: ElemOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcastable = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !broadcastable {
            return Err(shape_err("elementwise", sa, sb));
        }
        let shape = sa.to_vec();
        let (av, bv) = (self.value(a), self.value(b));
        let blen = bv.len();
        if kind == ElemOp::Div {
            if let Some(bad) = bv.iter().find(|x| x.abs() < DIV_GUARD) {
                return Err(TensorError::Numeric {
                    op: "div",
                    detail: format!("divisor {bad:e} below {DIV_GUARD:e}"),
                });
            }
        }
        let value: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % blen];
                match kind {
                    ElemOp::Add => x + y,
                    ElemOp::Sub => x - y,
                    ElemOp::Mul => x * y,
                    ElemOp::Div => x / y,
                    _ => unreachable!(),
                }
            })
            .collect();
        self.push("elementwise", shape, value, Op::Binary { kind, a, b })
    }

    fn scalar_op(&mut self, kind: ElemOp, a: Var, c: f64) -> Result<Var> {
        if kind == ElemOp::Div && c.abs() < DIV_GUARD {
            return Err(TensorError::Numeric {
                op: "div",
                detail: format!("divisor {c:e} below {DIV_GUARD:e}"),
            });
        }
        let value = self
            .value(a)
            .iter()
            .map(|&x| match kind {
                ElemOp::Add => x + c,
                ElemOp::Sub => x - c,
                ElemOp::Mul => x * c,
                ElemOp::Div => x / c,
                _ => unreachable!("unary kinds handled elsewhere"),
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("elementwise", shape, value, Op::ScalarRhs { kind, a, c })
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("silu", shape, value, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push("exp", shape, value, Op::Exp(a))
    }

    // ----- linear algebra ------------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n })
    }

    /// `a[m×k] · b[n×k]ᵀ`, used by the tied output head.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_t", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(
            "matmul_t",
            vec![m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch: 1,
                m,
                k,
                n,
                trans_b: true,
            },
        )
    }

    /// Batched product over the leading dimension of two rank-3 tensors:
    /// `a[B×m×k] · b[B×k×n]`, or `a[B×m×k] · b[B×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            let a_i = &av[i * m * k..(i + 1) * m * k];
            let b_i = &bv[i * k * n..(i + 1) * k * n];
            let c_i = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt_acc(a_i, b_i, c_i, m, k, n);
            } else {
                gemm_acc(a_i, b_i, c_i, m, k, n);
            }
        }
        self.push(
            "batch_matmul",
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        )
    }

    // ----- reductions and normalizers -----------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[idx(j)] /= sum;
                }
            }
        }
        self.push(
            "softmax",
            shape,
            y,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
        )
    }

    /// Softmax over the last axis of `[..., T, T]` scores where row `i` only
    /// attends to columns `j <= i`; masked entries get exactly zero weight.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(shape_err("causal_softmax", &shape, &shape));
        }
        let t = shape[r - 1];
        let x = self.value(a);
        let mut y = vec![0.0; x.len()];
        for (row_idx, (xr, yr)) in x.chunks(t).zip(y.chunks_mut(t)).enumerate() {
            let i = row_idx % t;
            let max = xr[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                yr[j] = (xr[j] - max).exp();
                sum += yr[j];
            }
            for v in &mut yr[..=i] {
                *v /= sum;
            }
        }
        self.push("causal_softmax", shape, y, Op::CausalSoftmax { a, t })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Vec::new(), vec![s], Op::Mean(a))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[T×V]`, skipping positions equal to `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: Option<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err("cross_entropy", &shape, &[targets.len()]));
        }
        let v = shape[1];
        let mut tgt = Vec::with_capacity(targets.len());
        for &t in targets {
            if Some(t) == ignore_index {
                tgt.push(None);
            } else if t >= v {
                return Err(TensorError::Target { target: t, classes: v });
            } else {
                tgt.push(Some(t));
            }
        }
        let count = tgt.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Contract("cross_entropy with every target ignored".into()));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; x.len()];
        let mut nll = 0.0;
        for (row, (xr, pr)) in x.chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &l) in pr.iter_mut().zip(xr) {
                *p = (l - max).exp();
                sum += *p;
            }
            pr.iter_mut().for_each(|p| *p /= sum);
            if let Some(t) = tgt[row] {
                nll += max + sum.ln() - xr[t];
            }
        }
        let loss = nll / count as f64;
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: tgt,
                probs,
                count,
            },
        )
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(gain));
        let d = *sx.last().ok_or_else(|| shape_err("rms_norm", &sx, sg))?;
        if sg != [d] {
            return Err(shape_err("rms_norm", &sx, sg));
        }
        let (xv, gv) = (self.value(x), self.value(gain));
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = Vec::with_capacity(xv.len() / d);
        for (xr, yr) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            for ((y, &xi), &g) in yr.iter_mut().zip(xr).zip(gv) {
                *y = g * xi * r;
            }
            inv_rms.push(r);
        }
        self.push("rms_norm", sx, out, Op::RmsNorm { x, gain, inv_rms })
    }

    // ----- position and layout -------------------------------------------

    /// Rotary embedding over `x[..., T, d]`: the pair `(x[2i], x[2i+1])` at
    /// position `positions[t]` is rotated by `positions[t] · base^(−2i/d)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] != positions.len() {
            return Err(shape_err("rope", &shape, &[positions.len()]));
        }
        let (t, d) = (shape[r - 2], shape[r - 1]);
        if d % 2 != 0 {
            return Err(TensorError::Contract(format!("rope needs an even head width, got {d}")));
        }
        let half = d / 2;
        let mut angles = Vec::with_capacity(t * half);
        for &m in positions {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / d as f64);
                let a = m as f64 * theta;
                angles.push((a.cos(), a.sin()));
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (row, (xr, yr)) in xv.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let pos = row % t;
            for i in 0..half {
                let (c, s) = angles[pos * half + i];
                let (x0, x1) = (xr[2 * i], xr[2 * i + 1]);
                yr[2 * i] = x0 * c - x1 * s;
                yr[2 * i + 1] = x0 * s + x1 * c;
            }
        }
        self.push("rope", shape, out, Op::Rope { x, angles, t, d })
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(shape_err("embedding", &shape, &[ids.len()]));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Target { target: bad, classes: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// `[T × heads·dh]` to `[heads × T × dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || heads == 0 || shape[1] % heads != 0 {
            return Err(shape_err("split_heads", &shape, &[heads]));
        }
        let (t, dh) = (shape[0], shape[1] / heads);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for ti in 0..t {
            for h in 0..heads {
                let src = &av[ti * heads * dh + h * dh..][..dh];
                out[(h * t + ti) * dh..][..dh].copy_from_slice(src);
            }
        }
        self.push("split_heads", vec![heads, t, dh], out, Op::SplitHeads { a, t, heads, dh })
    }

    /// `[heads × T × dh]` to `[T × heads·dh]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(shape_err("merge_heads", &shape, &[]));
        }
        let (heads, t, dh) = (shape[0], shape[1], shape[2]);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for h in 0..heads {
            for ti in 0..t {
                let src = &av[(h * t + ti) * dh..][..dh];
                out[ti * heads * dh + h * dh..][..dh].copy_from_slice(src);
            }
        }
        self.push("merge_heads", vec![t, heads * dh], out, Op::MergeHeads { a, t, heads, dh })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a))
    }

    // ----- reverse pass --------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    ///
    /// Gradients of values used more than once are summed. Calling this again
    /// recomputes every gradient from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward on non-scalar of shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let blen = bv.len();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += match kind {
                            ElemOp::Add | ElemOp::Sub => *gi,
                            ElemOp::Mul => gi * bv[i % blen],
                            ElemOp::Div => gi / bv[i % blen],
                            _ => unreachable!(),
                        };
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        let y = bv[i % blen];
                        gb[i % blen] += match kind {
                            ElemOp::Add => *gi,
                            ElemOp::Sub => -gi,
                            ElemOp::Mul => gi * av[i],
                            ElemOp::Div => -gi * av[i] / (y * y),
                            _ => unreachable!(),
                        };
                    }
                }
            }
            Op::ScalarRhs { kind, a, c } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let factor = match kind {
                        ElemOp::Add | ElemOp::Sub => 1.0,
                        ElemOp::Mul => *c,
                        ElemOp::Div => 1.0 / c,
                        _ => unreachable!(),
                    };
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * factor);
                }
            }
            Op::Silu(a) => {
                let av = &nodes[a.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gi), &xv) in ga.iter_mut().zip(g).zip(av) {
                        let s = sigmoid(xv);
                        *x += gi * s * (1.0 + xv * (1.0 - s));
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *x += gi * y;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA = G · Bᵀ
                    gemm_nt_acc(g, bv, ga, *m, *n, *k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // dB = Aᵀ · G
                    gemm_tn_acc(av, g, gb, *k, *m, *n);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..*batch {
                        let g_i = &g[i * m * n..(i + 1) * m * n];
                        let b_i = &bv[i * k * n..(i + 1) * k * n];
                        let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // C = A·Bᵀ with B[n×k]: dA = G · B
                            gemm_acc(g_i, b_i, ga_i, m, n, k);
                        } else {
                            gemm_nt_acc(g_i, b_i, ga_i, m, n, k);
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..*batch {
                        let g_i = &g[i * m * n..(i + 1) * m * n];
                        let a_i = &av[i * m * k..(i + 1) * m * k];
                        let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n×k] = Gᵀ · A
                            gemm_tn_acc(g_i, a_i, gb_i, n, m, k);
                        } else {
                            gemm_tn_acc(a_i, g_i, gb_i, k, m, n);
                        }
                    }
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let y = &node.value;
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                ga[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CausalSoftmax { a, t } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let y = &node.value;
                    for ((yr, gr), gar) in y.chunks(*t).zip(g.chunks(*t)).zip(ga.chunks_mut(*t)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..*t {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let v = probs.len() / targets.len();
                    let s = g[0] / *count as f64;
                    for (row, tgt) in targets.iter().enumerate() {
                        let Some(t) = tgt else { continue };
                        let pr = &probs[row * v..(row + 1) * v];
                        let gr = &mut gl[row * v..(row + 1) * v];
                        for (x, p) in gr.iter_mut().zip(pr) {
                            *x += s * p;
                        }
                        gr[*t] -= s;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (&nodes[x.0].value, &nodes[gain.0].value);
                let d = gv.len();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (row, r) in inv_rms.iter().enumerate() {
                        let xr = &xv[row * d..(row + 1) * d];
                        let gr = &g[row * d..(row + 1) * d];
                        let dot: f64 = (0..d).map(|j| gv[j] * gr[j] * xr[j]).sum();
                        let c = r * r * r * dot / d as f64;
                        for j in 0..d {
                            gx[row * d + j] += r * gv[j] * gr[j] - c * xr[j];
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (row, r) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gg[j] += g[row * d + j] * xv[row * d + j] * r;
                        }
                    }
                }
            }
            Op::Rope { x, angles, t, d } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let half = d / 2;
                    for (row, (gr, gxr)) in g.chunks(*d).zip(gx.chunks_mut(*d)).enumerate() {
                        let pos = row % t;
                        for i in 0..half {
                            let (c, s) = angles[pos * half + i];
                            let (g0, g1) = (gr[2 * i], gr[2 * i + 1]);
                            gxr[2 * i] += g0 * c + g1 * s;
                            gxr[2 * i + 1] += -g0 * s + g1 * c;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot(nodes, grads, *table) {
                    let d = g.len() / ids.len();
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::SplitHeads { a, t, heads, dh } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ti in 0..*t {
                        for h in 0..*heads {
                            for j in 0..*dh {
                                ga[ti * heads * dh + h * dh + j] += g[(h * t + ti) * dh + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, t, heads, dh } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for h in 0..*heads {
                        for ti in 0..*t {
                            for j in 0..*dh {
                                ga[(h * t + ti) * dh + j] += g[ti * heads * dh + h * dh + j];
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                }
            }
        }
    }
}
