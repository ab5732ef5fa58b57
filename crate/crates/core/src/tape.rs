//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] replays it in reverse from a scalar output. Leaves that
//! never feed the output receive no adjoint at all, which callers turn into
//! exact zeros.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Test hook: scales the adjoints an operation propagates to its inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardFault {
    pub op: &'static str,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    Embed { table: Var, ids: Vec<usize> },
    Rope { x: Var, heads: usize, head_dim: usize, base: f64, offset: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, head_dim: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    SelectRows { a: Var, b: Var, take_b: Vec<bool> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulT { .. } => "matmul_t",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Silu(..) => "silu",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Embed { .. } => "embed",
            Op::Rope { .. } => "rope",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SelectRows { .. } => "select_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
    nonfinite: Option<&'static str>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the variable did not participate in the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Name of the first operation whose output held a NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<&'static str> {
        self.nonfinite
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(op.name());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.value(v).shape();
        match shape {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, shape, &[0, 0])),
        }
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }))
    }

    /// `x[m×k] · w[n×k]ᵀ`, the linear-layer product for `[out×in]` weights.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = self.dims2(x, "matmul_t")?;
        let (n, k2) = self.dims2(w, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.value(x).shape(), self.value(w).shape()));
        }
        let out = kernels::matmul_t(self.value(x).data(), self.value(w).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT { a: x, b: w, m, k, n }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| kernels::silu(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Silu(a))
    }

    /// Normalises each row of `x` by its RMS and scales by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let d = vg.len();
        let last = vx.shape().last().copied().unwrap_or(0);
        if vg.shape().len() != 1 || last != d {
            return Err(Error::shape("rms_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.len().checked_div(d).unwrap_or(0);
        let (out, inv) = kernels::rms_norm(vx.data(), vg.data(), rows);
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, inv }))
    }

    /// Gathers rows of `table[V×d]` for each id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embed")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embed",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::Embed { table, ids: ids.to_vec() }))
    }

    /// Rotary position embedding over `heads` heads; row `i` is at `offset + i`.
    pub fn rope(&mut self, x: Var, heads: usize, base: f64, offset: usize) -> Result<Var> {
        let (rows, width) = self.dims2(x, "rope")?;
        if heads == 0 || !width.is_multiple_of(heads) || !(width / heads).is_multiple_of(2) {
            return Err(Error::shape("rope", &[rows, width], &[heads]));
        }
        let head_dim = width / heads;
        let mut data = self.value(x).data().to_vec();
        kernels::rope_in_place(&mut data, rows, heads, head_dim, base, offset, false);
        let t = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(t, Op::Rope { x, heads, head_dim, base, offset }))
    }

    /// Causal multi-head attention over equal-length `q`, `k`, `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, width) = self.dims2(q, "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [t, width] {
                return Err(Error::shape("attention", &[t, width], self.value(other).shape()));
            }
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape("attention", &[t, width], &[heads]));
        }
        let head_dim = width / heads;
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            t,
            t,
            heads,
            head_dim,
            0,
        );
        let tensor = Tensor::new(vec![t, width], out)?;
        Ok(self.push(tensor, Op::Attention { q, k, v, heads, head_dim, probs }))
    }

    /// Negative log-softmax at `targets` over unmasked rows of `logits[T×V]`.
    ///
    /// `Mean` divides by the number of unmasked rows (zero rows give zero
    /// loss); `Sum` adds them.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<Var> {
        let (t, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape("cross_entropy", &[t, vocab], &[targets.len(), mask.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= vocab) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                bound: vocab,
            });
        }
        let active = mask.iter().filter(|&&m| m).count();
        let unit = match reduction {
            Reduction::Mean if active > 0 => 1.0 / active as f64,
            Reduction::Mean => 0.0,
            Reduction::Sum => 1.0,
        };
        let weights: Vec<f64> = mask.iter().map(|&m| if m { unit } else { 0.0 }).collect();
        let lv = self.value(logits);
        let mut probs = vec![0.0; t * vocab];
        let mut loss = 0.0;
        for row in 0..t {
            let lr = lv.row(row);
            let lse = kernels::log_sum_exp(lr);
            for (p, &l) in probs[row * vocab..(row + 1) * vocab].iter_mut().zip(lr) {
                *p = (l - lse).exp();
            }
            if weights[row] != 0.0 {
                loss += weights[row] * (lse - lr[targets[row]]);
            }
        }
        let node = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights,
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), node))
    }

    /// Row `i` comes from `b` where `take_b[i]`, otherwise from `a`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_b: &[bool]) -> Result<Var> {
        self.same_shape(a, b, "select_rows")?;
        let (rows, cols) = self.dims2(a, "select_rows")?;
        if take_b.len() != rows {
            return Err(Error::shape("select_rows", &[rows, cols], &[take_b.len()]));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (i, &pick) in take_b.iter().enumerate() {
            let src = if pick { self.value(b) } else { self.value(a) };
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(t, Op::SelectRows { a, b, take_b: take_b.to_vec() }))
    }

    /// Propagates adjoints from the scalar `output` back to every recorded value.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", self.value(output).shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their adjoint; interior nodes release theirs.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let scale = match self.fault {
                Some(f) if f.op == node.op.name() => f.scale,
                _ => 1.0,
            };
            let send = |grads: &mut Vec<Option<Vec<f64>>>, target: Var, mut adj: Vec<f64>| {
                if scale != 1.0 {
                    adj.iter_mut().for_each(|a| *a *= scale);
                }
                accumulate(&mut grads[target.0], adj);
            };
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul { a, b, m, k, n } => {
                    let da = kernels::matmul_t(&g, self.value(b).data(), m, n, k);
                    let db = kernels::matmul_tn(self.value(a).data(), &g, m, k, n);
                    send(&mut grads, a, da);
                    send(&mut grads, b, db);
                }
                &Op::MatMulT { a, b, m, k, n } => {
                    let da = kernels::matmul(&g, self.value(b).data(), m, n, k);
                    let db = kernels::matmul_tn(&g, self.value(a).data(), m, n, k);
                    send(&mut grads, a, da);
                    send(&mut grads, b, db);
                }
                &Op::Add(a, b) => {
                    send(&mut grads, a, g.clone());
                    send(&mut grads, b, g);
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a).data(), self.value(b).data());
                    let da = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    send(&mut grads, a, da);
                    send(&mut grads, b, db);
                }
                &Op::Scale(a, factor) => {
                    send(&mut grads, a, g.iter().map(|x| x * factor).collect());
                }
                &Op::Sum(a) => {
                    send(&mut grads, a, vec![g[0]; self.value(a).len()]);
                }
                &Op::Silu(a) => {
                    let va = self.value(a).data();
                    let da = g.iter().zip(va).map(|(d, &x)| d * kernels::silu_grad(x)).collect();
                    send(&mut grads, a, da);
                }
                Op::RmsNorm { x, gain, inv } => {
                    let gv = self.value(*gain).data();
                    let (dx, dg) =
                        kernels::rms_norm_backward(self.value(*x).data(), gv, inv, &g, inv.len());
                    send(&mut grads, *x, dx);
                    send(&mut grads, *gain, dg);
                }
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut dt = vec![0.0; tv.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[row * d + j];
                        }
                    }
                    send(&mut grads, *table, dt);
                }
                &Op::Rope { x, heads, head_dim, base, offset } => {
                    let rows = g.len() / (heads * head_dim);
                    let mut dx = g;
                    kernels::rope_in_place(&mut dx, rows, heads, head_dim, base, offset, true);
                    send(&mut grads, x, dx);
                }
                Op::Attention { q, k, v, heads, head_dim, probs } => {
                    let t = self.value(*q).shape()[0];
                    let (dq, dk, dv) = kernels::attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        &g,
                        t,
                        t,
                        *heads,
                        *head_dim,
                        0,
                    );
                    send(&mut grads, *q, dq);
                    send(&mut grads, *k, dk);
                    send(&mut grads, *v, dv);
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let vocab = self.value(*logits).shape()[1];
                    let mut dl = vec![0.0; probs.len()];
                    for (row, (&target, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let coef = g[0] * w;
                        for j in 0..vocab {
                            dl[row * vocab + j] = coef * probs[row * vocab + j];
                        }
                        dl[row * vocab + target] -= coef;
                    }
                    send(&mut grads, *logits, dl);
                }
                Op::SelectRows { a, b, take_b } => {
                    let cols = self.value(*a).shape()[1];
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    let (mut any_a, mut any_b) = (false, false);
                    for (i, &pick) in take_b.iter().enumerate() {
                        let dst = if pick { &mut db } else { &mut da };
                        dst[i * cols..(i + 1) * cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                        any_a |= !pick;
                        any_b |= pick;
                    }
                    // A branch that contributed no rows stays out of the gradient.
                    if any_a {
                        send(&mut grads, *a, da);
                    }
                    if any_b {
                        send(&mut grads, *b, db);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, adj: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(adj).for_each(|(a, b)| *a += b),
        None => *slot = Some(adj),
    }
}
