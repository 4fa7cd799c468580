use std::sync::Arc;

use rand::Rng;

use super::kernels;
use super::{Tensor, TensorError};
use crate::exec::ExecMode;

/// Score given to attention slots that must not be attended.
const MASKED_SCORE: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-batch attention visibility, `allowed[b, q, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    batch: usize,
    q_len: usize,
    k_len: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(batch: usize, q_len: usize, k_len: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), batch * q_len * k_len);
        Self {
            batch,
            q_len,
            k_len,
            allowed,
        }
    }

    /// Every query may see keys `j < key_lengths[b]`.
    pub fn padding(key_lengths: &[usize], q_len: usize, k_len: usize) -> Self {
        let mut allowed = Vec::with_capacity(key_lengths.len() * q_len * k_len);
        for &len in key_lengths {
            for _ in 0..q_len {
                allowed.extend((0..k_len).map(|j| j < len));
            }
        }
        Self::new(key_lengths.len(), q_len, k_len, allowed)
    }

    /// Query `i` may see keys `j ≤ i` with `j < lengths[b]`.
    pub fn causal(lengths: &[usize], len: usize) -> Self {
        let mut allowed = Vec::with_capacity(lengths.len() * len * len);
        for &l in lengths {
            for i in 0..len {
                allowed.extend((0..len).map(|j| j <= i && j < l));
            }
        }
        Self::new(lengths.len(), len, len, allowed)
    }

    pub fn is_allowed(&self, b: usize, q: usize, k: usize) -> bool {
        self.allowed[(b * self.q_len + q) * self.k_len + k]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.q_len, self.k_len)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Relu {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        stats: Vec<(f64, f64)>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: usize,
        counted: usize,
        eps: f64,
        probs: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    SplitHeads {
        a: usize,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        a: usize,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    },
    MaskFill {
        a: usize,
        mask: Arc<AttnMask>,
        heads: usize,
    },
    MulConst {
        a: usize,
        factor: Vec<f64>,
    },
    Sum {
        a: usize,
    },
    WeightedSum {
        terms: Vec<(usize, f64)>,
    },
}

/// Records primitive applications so gradients can be replayed in reverse.
#[derive(Debug)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grad_enabled: bool,
    mode: ExecMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grad_enabled: true,
            mode: ExecMode::default_mode(),
        }
    }

    /// A tape whose leaves never require gradients; `backward` is refused.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires && self.grad_enabled);
        Var(self.values.len() - 1)
    }

    fn req(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.requires[v])
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a[..., k] · b[k, n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.values[a.0].numel() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            self.mode,
            self.values[a.0].data(),
            self.values[b.0].data(),
            &mut out,
            m,
            k,
            n,
        );
        let req = self.req(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            req,
        ))
    }

    /// Batched product `a[B,m,k] · b[B,k,n]`, or `a · b[B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.mismatch("bmm", a, b));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(self.mismatch("bmm", a, b));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.values[a.0].data();
            let bv = self.values[b.0].data();
            for i in 0..batch {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let oi = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    kernels::matmul_bt(ai, bi, oi, m, k, n);
                } else {
                    kernels::matmul_seq(ai, bi, oi, m, k, n);
                }
            }
        }
        let req = self.req(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::Bmm {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            req,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Add { a: a.0, b: b.0 }, req))
    }

    /// Adds the vector `b[n]` to every row of `a[..., n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let n = self.values[a.0].last_dim();
        if self.shape(b) != [n] {
            return Err(self.mismatch("add_row", a, b));
        }
        let bv = self.values[b.0].data();
        let mut data = self.values[a.0].data().to_vec();
        for row in data.chunks_exact_mut(n.max(1)) {
            for (x, y) in row.iter_mut().zip(bv) {
                *x += y;
            }
        }
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::AddRow { a: a.0, b: b.0 }, req))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Mul { a: a.0, b: b.0 }, req))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.values[a.0].clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        let req = self.req(&[a.0]);
        self.push(t, Op::Scale { a: a.0, c }, req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut t = self.values[a.0].clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let req = self.req(&[a.0]);
        self.push(t, Op::Relu { a: a.0 }, req)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.values[a.0].clone();
        let n = t.last_dim();
        if n > 0 {
            t.data_mut().chunks_exact_mut(n).for_each(kernels::softmax_row);
        }
        let req = self.req(&[a.0]);
        self.push(t, Op::Softmax { a: a.0 }, req)
    }

    /// Normalizes each row of `x[..., n]` to zero mean and unit variance,
    /// then applies `gain[n]` and `bias[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let n = self.values[x.0].last_dim();
        if self.shape(gain) != [n] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [n] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xt = &self.values[x.0];
        let g = self.values[gain.0].data();
        let b = self.values[bias.0].data();
        let mut out = vec![0.0; xt.numel()];
        let mut stats = Vec::with_capacity(xt.rows());
        for (row, o) in xt.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            stats.push(kernels::layer_norm_row(row, g, b, eps, o));
        }
        let shape = xt.shape().to_vec();
        let req = self.req(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                stats,
            },
            req,
        ))
    }

    /// Label-smoothed cross entropy averaged over rows whose target is not
    /// `ignore`. The target slot gets `1 - eps`, every other slot `eps/(V-1)`.
    /// With no counted rows the loss is 0 with zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        ignore: usize,
    ) -> Result<Var, TensorError> {
        let lt = &self.values[logits.0];
        let vocab = lt.last_dim();
        let rows = lt.rows();
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lt.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let off = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
        let on = 1.0 - eps;
        let mut probs = vec![0.0; lt.numel()];
        let mut logp = vec![0.0; vocab];
        let mut total = 0.0;
        let mut counted = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= vocab {
                return Err(TensorError::TargetOutOfRange {
                    row: r,
                    target: t,
                    vocab,
                });
            }
            let row = lt.row(r);
            kernels::log_softmax_row(row, &mut logp);
            let mut loss = 0.0;
            for (v, &lp) in logp.iter().enumerate() {
                let q = if v == t { on } else { off };
                loss -= q * lp;
                probs[r * vocab + v] = lp.exp();
            }
            total += loss;
            counted += 1;
        }
        let value = if counted == 0 { 0.0 } else { total / counted as f64 };
        let req = self.req(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore,
                counted,
                eps,
                probs,
            },
            req,
        ))
    }

    /// Row lookup `table[ids[i]]`; output shape is `out_shape ++ [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var, TensorError> {
        let tt = &self.values[table.0];
        if tt.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: tt.shape().to_vec(),
                rhs: out_shape.to_vec(),
            });
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, rows });
            }
            data.extend_from_slice(tt.row(id));
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        let req = self.req(&[table.0]);
        Ok(self.push(
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.values[a.0].clone().reshaped(shape)?;
        let req = self.req(&[a.0]);
        Ok(self.push(t, Op::Reshape { a: a.0 }, req))
    }

    /// `[B, T, H·dh]` → `[B·H, T, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                lhs: s,
                rhs: vec![heads],
            });
        }
        let (batch, len, d) = (s[0], s[1], s[2]);
        let head_dim = d / heads;
        let src = self.values[a.0].data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let from = (b * len + t) * d + h * head_dim;
                    let to = ((b * heads + h) * len + t) * head_dim;
                    out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        let req = self.req(&[a.0]);
        Ok(self.push(
            Tensor::new(&[batch * heads, len, head_dim], out)?,
            Op::SplitHeads {
                a: a.0,
                batch,
                len,
                heads,
                head_dim,
            },
            req,
        ))
    }

    /// `[B·H, T, dh]` → `[B, T, H·dh]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "merge_heads",
                lhs: s,
                rhs: vec![heads],
            });
        }
        let (batch, len, head_dim) = (s[0] / heads, s[1], s[2]);
        let d = heads * head_dim;
        let src = self.values[a.0].data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let to = (b * len + t) * d + h * head_dim;
                    let from = ((b * heads + h) * len + t) * head_dim;
                    out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        let req = self.req(&[a.0]);
        Ok(self.push(
            Tensor::new(&[batch, len, d], out)?,
            Op::MergeHeads {
                a: a.0,
                batch,
                len,
                heads,
                head_dim,
            },
            req,
        ))
    }

    /// Replaces disallowed attention scores in `a[B·H, Tq, Tk]` with a large
    /// negative constant; those slots receive no gradient.
    pub fn mask_fill(&mut self, a: Var, mask: &Arc<AttnMask>, heads: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        let (batch, q, k) = mask.dims();
        if s != [batch * heads, q, k] {
            return Err(TensorError::ShapeMismatch {
                op: "mask_fill",
                lhs: s,
                rhs: vec![batch * heads, q, k],
            });
        }
        let mut t = self.values[a.0].clone();
        let data = t.data_mut();
        for bh in 0..batch * heads {
            let b = bh / heads;
            for i in 0..q {
                for j in 0..k {
                    if !mask.is_allowed(b, i, j) {
                        data[(bh * q + i) * k + j] = MASKED_SCORE;
                    }
                }
            }
        }
        let req = self.req(&[a.0]);
        Ok(self.push(
            t,
            Op::MaskFill {
                a: a.0,
                mask: Arc::clone(mask),
                heads,
            },
            req,
        ))
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.values[a.0].numel();
        let factor: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut t = self.values[a.0].clone();
        for (v, f) in t.data_mut().iter_mut().zip(&factor) {
            *v *= f;
        }
        let req = self.req(&[a.0]);
        self.push(t, Op::MulConst { a: a.0, factor }, req)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let req = self.req(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, req)
    }

    /// `Σ wᵢ · termᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, TensorError> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.values[v.0].numel() != 1 {
                return Err(TensorError::NotScalar(self.shape(v).to_vec()));
            }
            total += w * self.values[v.0].item();
        }
        let idx: Vec<usize> = terms.iter().map(|(v, _)| v.0).collect();
        let req = self.req(&idx);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.iter().map(|&(v, w)| (v.0, w)).collect(),
            },
            req,
        ))
    }

    /// Replays the tape in reverse from the scalar `loss`, returning the
    /// gradient of every leaf that requires one. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, TensorError> {
        if !self.grad_enabled {
            return Err(TensorError::GradDisabled);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let Tape {
            values,
            ops,
            requires,
            mode,
            ..
        } = self;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; values.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; values.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !requires[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let acc = |idx: usize, grads: &mut Vec<Option<Vec<f64>>>, f: &mut dyn FnMut(&mut [f64])| {
                if !requires[idx] {
                    return;
                }
                let slot = grads[idx].get_or_insert_with(|| vec![0.0; values[idx].numel()]);
                f(slot);
            };
            match &ops[i] {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(values[i].shape(), g)?);
                }
                &Op::MatMul { a, b, m, k, n } => {
                    acc(a, &mut grads, &mut |ga| {
                        let mut tmp = vec![0.0; m * k];
                        kernels::matmul_bt(&g, values[b].data(), &mut tmp, m, n, k);
                        add_into(ga, &tmp);
                    });
                    acc(b, &mut grads, &mut |gb| {
                        kernels::matmul_at_acc(values[a].data(), &g, gb, m, k, n);
                    });
                }
                &Op::Bmm {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    trans_b,
                } => {
                    acc(a, &mut grads, &mut |ga| {
                        let bv = values[b].data();
                        let mut tmp = vec![0.0; m * k];
                        for s in 0..batch {
                            let gs = &g[s * m * n..(s + 1) * m * n];
                            let bs = &bv[s * k * n..(s + 1) * k * n];
                            if trans_b {
                                kernels::matmul_seq(gs, bs, &mut tmp, m, n, k);
                            } else {
                                kernels::matmul_bt(gs, bs, &mut tmp, m, n, k);
                            }
                            add_into(&mut ga[s * m * k..(s + 1) * m * k], &tmp);
                        }
                    });
                    acc(b, &mut grads, &mut |gb| {
                        let av = values[a].data();
                        for s in 0..batch {
                            let gs = &g[s * m * n..(s + 1) * m * n];
                            let as_ = &av[s * m * k..(s + 1) * m * k];
                            let out = &mut gb[s * k * n..(s + 1) * k * n];
                            if trans_b {
                                kernels::matmul_at_acc(gs, as_, out, m, n, k);
                            } else {
                                kernels::matmul_at_acc(as_, gs, out, m, k, n);
                            }
                        }
                    });
                }
                &Op::Add { a, b } => {
                    acc(a, &mut grads, &mut |ga| add_into(ga, &g));
                    acc(b, &mut grads, &mut |gb| add_into(gb, &g));
                }
                &Op::AddRow { a, b } => {
                    acc(a, &mut grads, &mut |ga| add_into(ga, &g));
                    acc(b, &mut grads, &mut |gb| {
                        let n = gb.len();
                        for row in g.chunks_exact(n.max(1)) {
                            add_into(gb, row);
                        }
                    });
                }
                &Op::Mul { a, b } => {
                    acc(a, &mut grads, &mut |ga| {
                        for ((o, gv), bv) in ga.iter_mut().zip(&g).zip(values[b].data()) {
                            *o += gv * bv;
                        }
                    });
                    acc(b, &mut grads, &mut |gb| {
                        for ((o, gv), av) in gb.iter_mut().zip(&g).zip(values[a].data()) {
                            *o += gv * av;
                        }
                    });
                }
                &Op::Scale { a, c } => {
                    acc(a, &mut grads, &mut |ga| {
                        for (o, gv) in ga.iter_mut().zip(&g) {
                            *o += c * gv;
                        }
                    });
                }
                &Op::Relu { a } => {
                    acc(a, &mut grads, &mut |ga| {
                        for ((o, gv), y) in ga.iter_mut().zip(&g).zip(values[i].data()) {
                            if *y > 0.0 {
                                *o += gv;
                            }
                        }
                    });
                }
                &Op::Softmax { a } => {
                    acc(a, &mut grads, &mut |ga| {
                        let y = values[i].data();
                        let n = values[i].last_dim().max(1);
                        for ((gr, yr), out) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                            let s = kernels::dot(gr, yr);
                            for j in 0..n {
                                out[j] += yr[j] * (gr[j] - s);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let n = values[x].last_dim();
                    let xv = values[x].data();
                    let gv = values[gain].data();
                    let xhat = |r: usize, j: usize| (xv[r * n + j] - stats[r].0) * stats[r].1;
                    acc(x, &mut grads, &mut |gx| {
                        let mut dxhat = vec![0.0; n];
                        for (r, &(_, rstd)) in stats.iter().enumerate() {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..n {
                                dxhat[j] = g[r * n + j] * gv[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xhat(r, j);
                            }
                            let nf = n as f64;
                            for j in 0..n {
                                gx[r * n + j] += rstd / nf * (nf * dxhat[j] - s1 - xhat(r, j) * s2);
                            }
                        }
                    });
                    acc(gain, &mut grads, &mut |gg| {
                        for r in 0..stats.len() {
                            for j in 0..n {
                                gg[j] += g[r * n + j] * xhat(r, j);
                            }
                        }
                    });
                    acc(bias, &mut grads, &mut |gb| {
                        for row in g.chunks_exact(n.max(1)) {
                            add_into(gb, row);
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    counted,
                    eps,
                    probs,
                } => {
                    if *counted == 0 {
                        continue;
                    }
                    let vocab = values[*logits].last_dim();
                    let off = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
                    let on = 1.0 - eps;
                    let scale = g[0] / *counted as f64;
                    acc(*logits, &mut grads, &mut |gl| {
                        for (r, &t) in targets.iter().enumerate() {
                            if t == *ignore {
                                continue;
                            }
                            for v in 0..vocab {
                                let q = if v == t { on } else { off };
                                gl[r * vocab + v] += scale * (probs[r * vocab + v] - q);
                            }
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let d = values[*table].last_dim();
                    acc(*table, &mut grads, &mut |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
                &Op::Reshape { a } => {
                    acc(a, &mut grads, &mut |ga| add_into(ga, &g));
                }
                &Op::SplitHeads {
                    a,
                    batch,
                    len,
                    heads,
                    head_dim,
                } => {
                    let d = heads * head_dim;
                    acc(a, &mut grads, &mut |ga| {
                        for b in 0..batch {
                            for t in 0..len {
                                for h in 0..heads {
                                    let orig = (b * len + t) * d + h * head_dim;
                                    let split = ((b * heads + h) * len + t) * head_dim;
                                    add_into(&mut ga[orig..orig + head_dim], &g[split..split + head_dim]);
                                }
                            }
                        }
                    });
                }
                &Op::MergeHeads {
                    a,
                    batch,
                    len,
                    heads,
                    head_dim,
                } => {
                    let d = heads * head_dim;
                    acc(a, &mut grads, &mut |ga| {
                        for b in 0..batch {
                            for t in 0..len {
                                for h in 0..heads {
                                    let merged = (b * len + t) * d + h * head_dim;
                                    let split = ((b * heads + h) * len + t) * head_dim;
                                    add_into(&mut ga[split..split + head_dim], &g[merged..merged + head_dim]);
                                }
                            }
                        }
                    });
                }
                Op::MaskFill { a, mask, heads } => {
                    let (batch, q, k) = mask.dims();
                    acc(*a, &mut grads, &mut |ga| {
                        for bh in 0..batch * heads {
                            let b = bh / heads;
                            for x in 0..q {
                                for y in 0..k {
                                    if mask.is_allowed(b, x, y) {
                                        let idx = (bh * q + x) * k + y;
                                        ga[idx] += g[idx];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::MulConst { a, factor } => {
                    acc(*a, &mut grads, &mut |ga| {
                        for ((o, gv), f) in ga.iter_mut().zip(&g).zip(factor) {
                            *o += gv * f;
                        }
                    });
                }
                &Op::Sum { a } => {
                    acc(a, &mut grads, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0]));
                }
                Op::WeightedSum { terms } => {
                    for &(t, w) in terms {
                        acc(t, &mut grads, &mut |gt| gt[0] += w * g[0]);
                    }
                }
            }
        }
        let _ = mode;
        Ok(Gradients { grads: leaf_grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` for non-leaves and leaves without grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, SeedableRng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Central differences of `f` w.r.t. every element of `inputs[which]`.
    fn finite_diff(inputs: &[Tensor], which: usize, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Vec<f64> {
        let h = 1e-5;
        let eval = |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item()
        };
        let mut out = Vec::new();
        for j in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[j] -= h;
            out.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        out
    }

    fn check_grads(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (w, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[w].numel()]);
            let numeric = finite_diff(inputs, w, f);
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
            assert!(
                diff <= 1e-6 + 1e-4 * scale,
                "input {w}: analytic {analytic:?} numeric {numeric:?}"
            );
        }
    }

    fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Weighted sum with fixed pseudo-random weights so every output element
    /// influences the scalar differently.
    fn probe(tape: &mut Tape, v: Var) -> Var {
        let shape = tape.shape(v).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(&shape, (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect()).unwrap();
        let w = tape.constant(w);
        let p = tape.mul(v, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let ai = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(ai).data(), tape.value(a).data());
        let ones = tape.leaf(t(&[2, 1], &[1.0, 1.0]), false);
        let r = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 7.0]);
        let bad = tape.leaf(Tensor::zeros(&[3, 1]), false);
        assert!(matches!(tape.matmul(a, bad), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_and_zero_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4]), true);
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g1 = tape.leaf(Tensor::full(&[2], 1.0), false);
        let b0 = tape.leaf(Tensor::zeros(&[2]), false);
        let c = tape.leaf(t(&[1, 2], &[5.0, 5.0]), false);
        let y = tape.layer_norm(c, g1, b0, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        let x = tape.leaf(t(&[1, 2], &[1.0, -1.0]), false);
        let y = tape.layer_norm(x, g1, b0, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);
        let g0 = tape.leaf(Tensor::zeros(&[2]), false);
        let bb = tape.leaf(t(&[2], &[0.3, 0.3]), false);
        let y = tape.layer_norm(x, g0, bb, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, 0.3]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        for eps in [0.0, 0.1, 0.4] {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::zeros(&[3, 4]), true);
            let loss = tape.cross_entropy(l, &[1, 2, 3], eps, 0).unwrap();
            assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]), true);
        let loss = tape.cross_entropy(l, &[0, 0], 0.1, 0).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(l).map_or(true, |g| g.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn smoothing_raises_loss_on_confident_correct_prediction() {
        let eval = |eps: f64| {
            let mut tape = Tape::new();
            let l = tape.leaf(t(&[1, 4], &[8.0, 0.0, 0.0, 0.0]), false);
            let loss = tape.cross_entropy(l, &[0], eps, 99).unwrap();
            tape.value(loss).item()
        };
        // independent oracle: -Σ q log p with p from an explicit softmax
        let oracle = |eps: f64| {
            let z: f64 = 8f64.exp() + 3.0;
            let lp = [8.0 - z.ln(), -z.ln(), -z.ln(), -z.ln()];
            -((1.0 - eps) * lp[0] + eps / 3.0 * (lp[1] + lp[2] + lp[3]))
        };
        assert!((eval(0.0) - oracle(0.0)).abs() < 1e-12);
        assert!((eval(0.1) - oracle(0.1)).abs() < 1e-12);
        assert!(eval(0.1) > eval(0.0));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 3]), true);
        assert!(matches!(
            tape.cross_entropy(l, &[5], 0.0, 0),
            Err(TensorError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::zeros(&[1]), true);
        assert!(!tape.requires_grad(x));
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::GradDisabled);
    }

    #[test]
    fn gradcheck_matmul_and_bmm() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        check_grads(&[a, b], &|tp, v| {
            let y = tp.matmul(v[0], v[1]).unwrap();
            probe(tp, y)
        });
        for trans in [false, true] {
            let a = rand_tensor(&mut rng, &[2, 3, 4]);
            let b = if trans {
                rand_tensor(&mut rng, &[2, 5, 4])
            } else {
                rand_tensor(&mut rng, &[2, 4, 5])
            };
            check_grads(&[a, b], &|tp, v| {
                let y = tp.bmm(v[0], v[1], trans).unwrap();
                probe(tp, y)
            });
        }
    }

    #[test]
    fn gradcheck_elementwise_family() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let r = rand_tensor(&mut rng, &[4]);
        check_grads(&[a.clone(), b.clone()], &|tp, v| {
            let s = tp.add(v[0], v[1]).unwrap();
            let m = tp.mul(s, v[1]).unwrap();
            let m = tp.scale(m, -0.7);
            probe(tp, m)
        });
        check_grads(&[a.clone(), r], &|tp, v| {
            let y = tp.add_row(v[0], v[1]).unwrap();
            let y = tp.relu(y);
            probe(tp, y)
        });
        check_grads(&[a], &|tp, v| {
            let y = tp.softmax(v[0]);
            probe(tp, y)
        });
    }

    #[test]
    fn gradcheck_layer_norm_and_cross_entropy() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 5]);
        let g = rand_tensor(&mut rng, &[5]);
        let b = rand_tensor(&mut rng, &[5]);
        check_grads(&[x, g, b], &|tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            probe(tp, y)
        });
        let logits = rand_tensor(&mut rng, &[4, 6]);
        check_grads(&[logits], &|tp, v| tp.cross_entropy(v[0], &[1, 0, 5, 3], 0.1, 0).unwrap());
    }

    #[test]
    fn gradcheck_structural_ops() {
        let mut rng = StdRng::seed_from_u64(4);
        let table = rand_tensor(&mut rng, &[5, 4]);
        check_grads(&[table], &|tp, v| {
            let y = tp.gather(v[0], &[1, 3, 1, 0, 4, 1], &[2, 3]).unwrap();
            let y = tp.split_heads(y, 2).unwrap();
            let y = tp.scale(y, 1.5);
            let y = tp.merge_heads(y, 2).unwrap();
            let y = tp.reshape(y, &[6, 4]).unwrap();
            probe(tp, y)
        });
        let scores = rand_tensor(&mut rng, &[4, 3, 3]);
        let mask = Arc::new(AttnMask::causal(&[3, 2], 3));
        check_grads(&[scores], &|tp, v| {
            let y = tp.mask_fill(v[0], &mask, 2).unwrap();
            let y = tp.softmax(y);
            probe(tp, y)
        });
        let a = rand_tensor(&mut rng, &[1]);
        let b = rand_tensor(&mut rng, &[1]);
        check_grads(&[a, b], &|tp, v| {
            let sa = tp.sum(v[0]);
            let sb = tp.sum(v[1]);
            tp.weighted_sum(&[(sa, 2.0), (sb, -0.5)]).unwrap()
        });
    }

    #[test]
    fn dropout_zero_is_identity_and_masks_consistently() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[100], 1.0), true);
        assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
        let y = tape.dropout(x, 0.5, &mut rng);
        let kept: Vec<bool> = tape.value(y).data().iter().map(|v| *v != 0.0).collect();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0 || *v == 2.0));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        for (gv, k) in g.get(x).unwrap().data().iter().zip(kept) {
            assert_eq!(*gv, if k { 2.0 } else { 0.0 });
        }
    }

    #[test]
    fn attn_masks() {
        let m = AttnMask::causal(&[2], 3);
        assert!(m.is_allowed(0, 2, 1));
        assert!(!m.is_allowed(0, 2, 2));
        assert!(!m.is_allowed(0, 0, 1));
        let p = AttnMask::padding(&[1, 3], 2, 3);
        assert!(!p.is_allowed(0, 1, 1));
        assert!(p.is_allowed(1, 0, 2));
    }
}
