//! Dynamic computation tape with reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and the handles of its
//! inputs, so nodes are topologically ordered by construction. `backward`
//! walks them once, newest to oldest.

use std::fmt;

use super::kernels::{self, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise unary kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    Silu,
    Scale(f64),
}

/// Element-wise binary kinds. Operands must have equal shapes, or one of
/// them must hold a single element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Backward rule of a user-supplied op: `(grad_out, inputs, output) -> grad per input`.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

/// One expert's contribution to [`Tape::expert_combine`].
#[derive(Clone, Debug)]
pub struct ExpertPart {
    /// Column of the weight matrix scaling this expert.
    pub expert: usize,
    /// Expert output, one row per entry of `rows`.
    pub output: Var,
    /// Token rows the expert processed.
    pub rows: Vec<usize>,
}

enum Op {
    Leaf,
    Detached,
    Matmul(Var, Var),
    Transpose(Var),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    RmsNorm {
        x: Var,
        gain: Option<Var>,
        inv_rms: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        groups: usize,
    },
    BiasAdd {
        x: Var,
        bias: Var,
        coef: f64,
    },
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    RowMean(Var),
    Dot(Var, Var),
    ConcatCols(Vec<Var>),
    GatherBlock {
        x: Var,
        rows: Vec<usize>,
        col0: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxRows(Var),
    TopKSoftmax {
        x: Var,
        k: usize,
        selected: Vec<usize>,
    },
    ExpertCombine {
        weights: Var,
        parts: Vec<ExpertPart>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; one tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradient buffers produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not require one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Register a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Register an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// Same values, no gradient flow through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detached, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::Relu => |v, _| v.max(0.0),
            Unary::Silu => |v, _| v * kernels::sigmoid(v),
            Unary::Scale(_) => |v, c| v * c,
        };
        let c = if let Unary::Scale(c) = kind { c } else { 0.0 };
        let value = self.value(x).map(|v| f(v, c));
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return Err(Error::dim("elementwise", ta.shape(), tb.shape()));
        };
        let n: usize = shape.iter().product();
        let at = |t: &Tensor, i: usize| if t.is_scalar() { t.data()[0] } else { t.data()[i] };
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Per-row RMS normalisation `x / sqrt(mean(x²) + eps)`, times an optional per-column gain.
    pub fn rmsnorm_rows(&mut self, x: Var, gain: Option<Var>, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if let Some(g) = gain {
            if self.value(g).numel() != n {
                return Err(Error::dim("rmsnorm", &[m, n], self.value(g).shape()));
            }
        }
        let xv = self.value(x).data();
        let gv = gain.map(|g| self.value(g).data());
        let mut out = vec![0.0; m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..n {
                out[i * n + j] = row[j] * inv * gv.map_or(1.0, |g| g[j]);
            }
        }
        let mut deps = vec![x];
        deps.extend(gain);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Euclidean norm of every row, `sqrt(Σ x² + eps)`; `[m×r] -> [m]`.
    pub fn row_l2_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.group_l2_norm(x, 1, eps)?;
        let m = self.value(v).rows();
        self.nodes[v.0].value = self.nodes[v.0].value.clone().reshape(vec![m])?;
        Ok(v)
    }

    /// Norms of `groups` equal contiguous column blocks per row; `[m×(g·r)] -> [m×g]`.
    pub fn group_l2_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if groups == 0 || n % groups != 0 {
            return Err(Error::dim("group_l2_norm", &[m, n], &[groups]));
        }
        let r = n / groups;
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..m * groups)
            .map(|idx| {
                let (i, g) = (idx / groups, idx % groups);
                let blk = &xv[i * n + g * r..i * n + (g + 1) * r];
                (blk.iter().map(|v| v * v).sum::<f64>() + eps).sqrt()
            })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, groups, out)?, Op::GroupNorm { x, groups }, rg))
    }

    fn bias(&mut self, x: Var, bias: Var, coef: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let b = self.value(bias);
        if b.numel() != n {
            return Err(Error::dim("bias", &[m, n], b.shape()));
        }
        let bd = b.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bd) {
                *o += coef * bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::BiasAdd { x, bias, coef }, rg))
    }

    /// `x[i,j] + b[j]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.bias(x, bias, 1.0)
    }

    /// `x[i,j] - b[j]`.
    pub fn sub_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.bias(x, bias, -1.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Column means of a matrix; `[m×n] -> [n]`.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::ColMean(x), rg))
    }

    /// Row means of a matrix; `[m×n] -> [m]`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::RowMean(x), rg))
    }

    /// Inner product of two tensors with the same number of elements.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::dim("dot", ta.shape(), tb.shape()));
        }
        let v = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(Error::dim("concat_cols", &[m], &[pm, pn]));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Sub-block `x[rows, col0..col0+cols]`.
    pub fn gather_block(&mut self, x: Var, rows: &[usize], col0: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if rows.is_empty() || cols == 0 || col0 + cols > n || rows.iter().any(|&r| r >= m) {
            return Err(Error::dim("gather_block", &[m, n], &[rows.len(), col0 + cols]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xv[r * n + col0..r * n + col0 + cols]);
        }
        let rg = self.rg(&[x]);
        let op = Op::GatherBlock {
            x,
            rows: rows.to_vec(),
            col0,
        };
        Ok(self.push(Tensor::matrix(rows.len(), cols, out)?, op, rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        self.gather_block(x, rows, 0, n)
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding of empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("token id {bad} out of vocabulary {v}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::matrix(ids.len(), d, out)?, op, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(n).for_each(kernels::softmax_in_place);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxRows(x), rg))
    }

    /// Per row: keep the `k` largest entries (ties to the lowest index),
    /// softmax over them, zero elsewhere.
    pub fn topk_softmax(&mut self, x: Var, k: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if k == 0 || k > n {
            return Err(Error::config("K", format!("must satisfy 1 <= K <= N = {n}, got {k}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut selected = Vec::with_capacity(m * k);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let idx = kernels::top_k_indices(row, k);
            let mut w: Vec<f64> = idx.iter().map(|&j| row[j]).collect();
            kernels::softmax_in_place(&mut w);
            for (&j, wj) in idx.iter().zip(w) {
                out[i * n + j] = wj;
            }
            selected.extend(idx);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::TopKSoftmax { x, k, selected }, rg))
    }

    /// `out[t] = Σ_parts weights[t, expert] · output[p]` for every processed row
    /// `t = rows[p]`; rows an expert did not process contribute nothing.
    pub fn expert_combine(
        &mut self,
        weights: Var,
        parts: Vec<ExpertPart>,
        width: usize,
    ) -> Result<Var> {
        let (m, n) = self.dims2(weights)?;
        let mut out = vec![0.0; m * width];
        for part in &parts {
            let y = self.value(part.output);
            let (py, pd) = y.dims2()?;
            if pd != width || py != part.rows.len() || part.expert >= n {
                return Err(Error::dim("expert_combine", &[m, width], y.shape()));
            }
            let w = self.value(weights).data();
            for (p, &t) in part.rows.iter().enumerate() {
                let s = w[t * n + part.expert];
                let dst = &mut out[t * width..(t + 1) * width];
                for (o, v) in dst.iter_mut().zip(y.row(p)) {
                    *o += s * v;
                }
            }
        }
        let mut deps = vec![weights];
        deps.extend(parts.iter().map(|p| p.output));
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::matrix(m, width, out)?,
            Op::ExpertCombine { weights, parts },
            rg,
        ))
    }

    /// Single-head causal scaled dot-product attention over `n_seq` stacked
    /// sequences of `seq_len` rows each.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize) -> Result<Var> {
        let (m, d) = self.dims2(q)?;
        for other in [k, v] {
            if self.value(other).shape() != [m, d] {
                return Err(Error::dim("attention", &[m, d], self.value(other).shape()));
            }
        }
        if seq_len == 0 || m % seq_len != 0 {
            return Err(Error::dim("attention", &[m, d], &[seq_len]));
        }
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let t = seq_len;
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; m * t];
        exec::for_each_chunk_mut(exec::kernel_execution(), &mut probs, t * t, |s, p| {
            let base = s * t * d;
            kernels::gemm(
                MatRef::row_major(&qv[base..base + t * d], t, d),
                MatRef::row_major(&kv[base..base + t * d], t, d).t(),
                0.0,
                p,
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                row.iter_mut().for_each(|x| *x *= scale);
                kernels::softmax_in_place(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
            }
        });
        let mut out = vec![0.0; m * d];
        exec::for_each_chunk_mut(exec::kernel_execution(), &mut out, t * d, |s, o| {
            let base = s * t * d;
            kernels::gemm(
                MatRef::row_major(&probs[s * t * t..(s + 1) * t * t], t, t),
                MatRef::row_major(&vv[base..base + t * d], t, d),
                0.0,
                o,
            );
        });
        let rg = self.rg(&[q, k, v]);
        let op = Op::CausalAttention {
            q,
            k,
            v,
            seq_len,
            probs,
        };
        Ok(self.push(Tensor::matrix(m, d, out)?, op, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits)?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", &[m, n], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!("target {bad} out of range {n}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        probs.chunks_mut(n).for_each(kernels::softmax_in_place);
        let nll = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[i * n + t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / m as f64;
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(nll), op, rg))
    }

    /// Record a user-defined op with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = self.rg(inputs);
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward,
        };
        self.push(value, op, rg)
    }

    /// Reverse accumulation from a scalar `loss` (seeded with 1).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].as_ref() else {
                continue;
            };
            for (input, contrib) in self.local_grads(idx, g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data);
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf | Op::Detached => vec![],
            Op::Matmul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).cols();
                let gm = MatRef::row_major(gd, m, n);
                let mut res = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(gm, MatRef::row_major(val(*b).data(), k, n).t(), 0.0, &mut da);
                    res.push((*a, like(*a, da)?));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(MatRef::row_major(val(*a).data(), m, k).t(), gm, 0.0, &mut db);
                    res.push((*b, like(*b, db)?));
                }
                res
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Unary(kind, x) => {
                let xv = val(*x).data();
                let data = match kind {
                    Unary::Relu => xv.iter().zip(gd).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect(),
                    Unary::Silu => xv
                        .iter()
                        .zip(gd)
                        .map(|(&x, &g)| {
                            let s = kernels::sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                    Unary::Scale(c) => gd.iter().map(|g| g * c).collect(),
                };
                vec![(*x, like(*x, data)?)]
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let at = |t: &Tensor, i: usize| if t.is_scalar() { t.data()[0] } else { t.data()[i] };
                let reduce = |t: &Tensor, full: Vec<f64>| -> Result<Tensor> {
                    if t.numel() == full.len() {
                        Tensor::new(t.shape().to_vec(), full)
                    } else {
                        Tensor::new(t.shape().to_vec(), vec![full.iter().sum()])
                    }
                };
                let n = gd.len();
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (gd.to_vec(), gd.to_vec()),
                    Binary::Sub => (gd.to_vec(), gd.iter().map(|g| -g).collect()),
                    Binary::Mul => (
                        (0..n).map(|i| gd[i] * at(tb, i)).collect(),
                        (0..n).map(|i| gd[i] * at(ta, i)).collect(),
                    ),
                };
                vec![(*a, reduce(ta, ga)?), (*b, reduce(tb, gb)?)]
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (m, n) = val(*x).dims2()?;
                let xv = val(*x).data();
                let gv = gain.map(|g| val(g).data());
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                for i in 0..m {
                    let inv = inv_rms[i];
                    let (xr, gr) = (&xv[i * n..(i + 1) * n], &gd[i * n..(i + 1) * n]);
                    let mut proj = 0.0;
                    for j in 0..n {
                        let gy = gr[j] * gv.map_or(1.0, |g| g[j]);
                        proj += gy * xr[j] * inv;
                        dgain[j] += gr[j] * xr[j] * inv;
                    }
                    proj /= n as f64;
                    for j in 0..n {
                        let gy = gr[j] * gv.map_or(1.0, |g| g[j]);
                        dx[i * n + j] = inv * (gy - xr[j] * inv * proj);
                    }
                }
                let mut res = vec![(*x, like(*x, dx)?)];
                if let Some(gv) = gain {
                    res.push((*gv, like(*gv, dgain)?));
                }
                res
            }
            Op::GroupNorm { x, groups } => {
                let (m, n) = val(*x).dims2()?;
                let r = n / groups;
                let xv = val(*x).data();
                let od = out.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for grp in 0..*groups {
                        let o = i * groups + grp;
                        let s = gd[o] / od[o];
                        for c in grp * r..(grp + 1) * r {
                            dx[i * n + c] = xv[i * n + c] * s;
                        }
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::BiasAdd { x, bias, coef } => {
                let n = val(*bias).numel();
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += coef * g;
                    }
                }
                vec![(*x, g.clone()), (*bias, like(*bias, db)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), gd[0] / n))]
            }
            Op::ColMean(x) => {
                let (m, n) = val(*x).dims2()?;
                let data = (0..m * n).map(|i| gd[i % n] / m as f64).collect();
                vec![(*x, like(*x, data)?)]
            }
            Op::RowMean(x) => {
                let (m, n) = val(*x).dims2()?;
                let data = (0..m * n).map(|i| gd[i / n] / n as f64).collect();
                vec![(*x, like(*x, data)?)]
            }
            Op::Dot(a, b) => {
                let s = gd[0];
                vec![
                    (*a, val(*b).map(|v| v * s).reshape(val(*a).shape().to_vec())?),
                    (*b, val(*a).map(|v| v * s).reshape(val(*b).shape().to_vec())?),
                ]
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2()?;
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                    }
                    res.push((p, like(p, d)?));
                    off += w;
                }
                res
            }
            Op::GatherBlock { x, rows, col0 } => {
                let n = val(*x).cols();
                let w = out.cols();
                let mut dx = vec![0.0; val(*x).numel()];
                for (p, &r) in rows.iter().enumerate() {
                    for c in 0..w {
                        dx[r * n + col0 + c] += gd[p * w + c];
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                let mut dt = vec![0.0; val(*table).numel()];
                for (p, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[i * d + c] += gd[p * d + c];
                    }
                }
                vec![(*table, like(*table, dt)?)]
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                let yd = out.data();
                let mut dx = vec![0.0; yd.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(yd.chunks(n)).zip(gd.chunks(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::TopKSoftmax { x, k, selected } => {
                let n = out.cols();
                let yd = out.data();
                let mut dx = vec![0.0; yd.len()];
                for (i, sel) in selected.chunks(*k).enumerate() {
                    let s: f64 = sel.iter().map(|&j| yd[i * n + j] * gd[i * n + j]).sum();
                    for &j in sel {
                        dx[i * n + j] = yd[i * n + j] * (gd[i * n + j] - s);
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::ExpertCombine { weights, parts } => {
                let n = val(*weights).cols();
                let width = out.cols();
                let wv = val(*weights).data();
                let mut dw = vec![0.0; wv.len()];
                let mut res = Vec::with_capacity(parts.len() + 1);
                for part in parts {
                    let y = val(part.output);
                    let mut dy = vec![0.0; y.numel()];
                    for (p, &t) in part.rows.iter().enumerate() {
                        let gr = &gd[t * width..(t + 1) * width];
                        let s = wv[t * n + part.expert];
                        let mut acc = 0.0;
                        for (c, (&gv, &yv)) in gr.iter().zip(y.row(p)).enumerate() {
                            dy[p * width + c] = s * gv;
                            acc += gv * yv;
                        }
                        dw[t * n + part.expert] += acc;
                    }
                    res.push((part.output, like(part.output, dy)?));
                }
                res.push((*weights, like(*weights, dw)?));
                res
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                probs,
            } => self.attention_backward(*q, *k, *v, *seq_len, probs, gd)?,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = val(*logits).cols();
                let m = targets.len();
                let s = gd[0] / m as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * n + t] -= s;
                }
                vec![(*logits, like(*logits, dl)?)]
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = backward(g, &ins, out);
                if gs.len() != inputs.len() {
                    return Err(Error::Contract("custom backward arity".into()));
                }
                inputs.iter().copied().zip(gs).collect()
            }
        })
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        t: usize,
        probs: &[f64],
        gd: &[f64],
    ) -> Result<Vec<(Var, Tensor)>> {
        let (m, d) = self.value(q).dims2()?;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let scale = 1.0 / (d as f64).sqrt();
        // Per sequence: [dq | dk | dv] packed so every chunk is independent.
        let mut packed = vec![0.0; 3 * m * d];
        let blk = t * d;
        exec::for_each_chunk_mut(exec::kernel_execution(), &mut packed, 3 * blk, |s, buf| {
            let base = s * blk;
            let p = &probs[s * t * t..(s + 1) * t * t];
            let go = MatRef::row_major(&gd[base..base + blk], t, d);
            let (dq, rest) = buf.split_at_mut(blk);
            let (dk, dv) = rest.split_at_mut(blk);
            // dV = Pᵀ·dO
            kernels::gemm(MatRef::row_major(p, t, t).t(), go, 0.0, dv);
            // dP = dO·Vᵀ
            let mut ds = vec![0.0; t * t];
            kernels::gemm(go, MatRef::row_major(&vv[base..base + blk], t, d).t(), 0.0, &mut ds);
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut ds[i * t..(i + 1) * t];
                let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                dr[i + 1..].iter_mut().for_each(|x| *x = 0.0);
            }
            let dsm = MatRef::row_major(&ds, t, t);
            kernels::gemm(dsm, MatRef::row_major(&kv[base..base + blk], t, d), 0.0, dq);
            kernels::gemm(dsm.t(), MatRef::row_major(&qv[base..base + blk], t, d), 0.0, dk);
        });
        let (mut dq, mut dk, mut dv) = (vec![0.0; m * d], vec![0.0; m * d], vec![0.0; m * d]);
        for (s, buf) in packed.chunks(3 * blk).enumerate() {
            dq[s * blk..(s + 1) * blk].copy_from_slice(&buf[..blk]);
            dk[s * blk..(s + 1) * blk].copy_from_slice(&buf[blk..2 * blk]);
            dv[s * blk..(s + 1) * blk].copy_from_slice(&buf[2 * blk..]);
        }
        Ok(vec![
            (q, Tensor::matrix(m, d, dq)?),
            (k, Tensor::matrix(m, d, dk)?),
            (v, Tensor::matrix(m, d, dv)?),
        ])
    }
}

/// Run `build` on a fresh tape; convenience for value-only evaluation.
pub fn evaluate<F>(build: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).clone())
}
