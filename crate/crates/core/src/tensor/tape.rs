use super::kernels::{
    gelu, gelu_grad, gemm_acc, gemm_nt_acc, gemm_tn_acc, layer_norm_row, log_sum_exp, softmax_row,
};
use super::{check_finite, Result, Tensor, TensorError};
use crate::rng::RngStream;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Embedding { table: Var, ids: Vec<u32> },
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Gelu(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Dropout { x: Var, mask: Vec<f64> },
    GatherRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<u32>, mask: Vec<bool>, scale: f64 },
    LogSoftmaxGather { logits: Var, targets: Vec<u32> },
    Entropy { logits: Var, mask: Vec<bool>, scale: f64 },
    PpoClip { logp: Var, old: Vec<f64>, adv: Vec<f64>, mask: Vec<bool>, eps: f64, scale: f64 },
    Mse { pred: Var, target: Vec<f64>, mask: Vec<bool>, scale: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | AddRow(a, b) | Mul(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Softmax(a) | CausalSoftmax(a) | Gelu(a) | Reshape(a)
            | Sum(a) => vec![*a],
            Embedding { table, .. } => vec![*table],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat(parts) => parts.clone(),
            SliceCols { x, .. } | Dropout { x, .. } | GatherRows { x, .. } => vec![*x],
            CrossEntropy { logits, .. } | LogSoftmaxGather { logits, .. } | Entropy { logits, .. } => {
                vec![*logits]
            }
            PpoClip { logp, .. } => vec![*logp],
            Mse { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order, which is a topological order of
/// the computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
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

    fn push(&mut self, op: &'static str, shape: Vec<usize>, value: Vec<f64>, record: Op) -> Result<Var> {
        check_finite(op, &value)?;
        let requires_grad = record.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op: record,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a tensor (parameter or input) as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reachable and requires grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(TensorError::Invalid {
                op,
                message: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul_nt", vec![m, n], out, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    /// Adds a row vector `b` (`[n]`) to every row of `a` (`[m, n]`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", a)?;
        if self.value(b).len() != n {
            return Err(mismatch("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += x;
            }
        }
        self.push("add_row", vec![m, n], out, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(TensorError::Invalid {
                op: "embedding",
                message: format!("id {bad} out of range for {v} rows"),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
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

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let n = *s.last().expect("non-empty shape");
        (self.value(v).len() / n, n)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.rows_cols(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        self.push("softmax", self.shape(a).to_vec(), out, Op::Softmax(a))
    }

    /// Row-wise softmax of a square score matrix restricted to columns `j <= i`;
    /// masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("causal_softmax", a)?;
        if m != n {
            return Err(mismatch("causal_softmax", self.shape(a), &[m, m]));
        }
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            softmax_row(&mut row[..=i]);
            row[i + 1..].fill(0.0);
        }
        self.push("causal_softmax", vec![m, n], out, Op::CausalSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let mut out = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            for i in 0..m {
                stats.push(layer_norm_row(&xv[i * n..(i + 1) * n], gv, bv, &mut out[i * n..(i + 1) * n]));
            }
        }
        self.push("layer_norm", vec![m, n], out, Op::LayerNorm { x, gamma, beta, stats })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push("gelu", self.shape(a).to_vec(), out, Op::Gelu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(a))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            message: "no inputs".into(),
        })?;
        let (m, _) = self.dims2("concat", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2("concat", p)?;
            if pm != m {
                return Err(mismatch("concat", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        self.push("concat", vec![m, total], out, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if start >= end || end > n {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                message: format!("range {start}..{end} invalid for {n} columns"),
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + end]);
        }
        self.push("slice_cols", vec![m, end - start], out, Op::SliceCols { x, start })
    }

    /// Inverted dropout with drop probability `p`; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TensorError::Invalid {
                op: "dropout",
                message: format!("probability {p} must be below 1"),
            });
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.push("dropout", self.shape(x).to_vec(), out, Op::Dropout { x, mask })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", x)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                message: format!("row selection invalid for {m} rows"),
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        self.push(
            "gather_rows",
            vec![rows.len(), n],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    fn check_rows(&self, op: &'static str, logits: Var, len: usize) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(op, logits)?;
        if len != m {
            return Err(mismatch(op, &[m, n], &[len]));
        }
        Ok((m, n))
    }

    /// Mean next-token cross-entropy over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                message: "every position is masked".into(),
            });
        }
        self.cross_entropy_scaled(logits, targets, mask, 1.0 / count as f64)
    }

    /// `scale · Σ` of per-row cross-entropy over unmasked rows. Lets callers
    /// normalize by a count that spans several tapes.
    pub fn cross_entropy_scaled(&mut self, logits: Var, targets: &[u32], mask: &[bool], scale: f64) -> Result<Var> {
        let (m, n) = self.check_rows("cross_entropy", logits, targets.len())?;
        if mask.len() != m {
            return Err(mismatch("cross_entropy", &[m, n], &[mask.len()]));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            let t = targets[i] as usize;
            if t >= n {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    message: format!("target {t} out of range for {n} classes"),
                });
            }
            let row = &lv[i * n..(i + 1) * n];
            total += log_sum_exp(row) - row[t];
        }
        self.push(
            "cross_entropy",
            vec![1],
            vec![scale * total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                scale,
            },
        )
    }

    /// `log softmax(logits)[i, targets[i]]` per row.
    pub fn log_softmax_gather(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (m, n) = self.check_rows("log_softmax_gather", logits, targets.len())?;
        let lv = self.value(logits);
        let mut out = Vec::with_capacity(m);
        for (i, &t) in targets.iter().enumerate() {
            if t as usize >= n {
                return Err(TensorError::Invalid {
                    op: "log_softmax_gather",
                    message: format!("target {t} out of range for {n} classes"),
                });
            }
            let row = &lv[i * n..(i + 1) * n];
            out.push(row[t as usize] - log_sum_exp(row));
        }
        self.push(
            "log_softmax_gather",
            vec![m],
            out,
            Op::LogSoftmaxGather {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// `scale · Σ` of row entropies over rows where `mask` is set.
    pub fn entropy_scaled(&mut self, logits: Var, mask: &[bool], scale: f64) -> Result<Var> {
        let (m, n) = self.check_rows("entropy", logits, mask.len())?;
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut p = vec![0.0; n];
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            p.copy_from_slice(&lv[i * n..(i + 1) * n]);
            softmax_row(&mut p);
            total -= p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
        }
        self.push(
            "entropy",
            vec![1],
            vec![scale * total],
            Op::Entropy {
                logits,
                mask: mask.to_vec(),
                scale,
            },
        )
    }

    /// Negated clipped surrogate `-scale · Σ min(r·A, clip(r, 1-eps, 1+eps)·A)`
    /// with `r = exp(logp - old)`, over positions where `mask` is set.
    pub fn ppo_clip_objective(
        &mut self,
        logp: Var,
        old: &[f64],
        adv: &[f64],
        mask: &[bool],
        eps: f64,
        scale: f64,
    ) -> Result<Var> {
        let n = self.value(logp).len();
        if old.len() != n || adv.len() != n || mask.len() != n {
            return Err(mismatch("ppo_clip", self.shape(logp), &[old.len(), adv.len(), mask.len()]));
        }
        let lp = self.value(logp);
        let mut total = 0.0;
        for t in 0..n {
            if mask[t] {
                let r = (lp[t] - old[t]).exp();
                let clipped = r.clamp(1.0 - eps, 1.0 + eps);
                total += (r * adv[t]).min(clipped * adv[t]);
            }
        }
        self.push(
            "ppo_clip",
            vec![1],
            vec![-scale * total],
            Op::PpoClip {
                logp,
                old: old.to_vec(),
                adv: adv.to_vec(),
                mask: mask.to_vec(),
                eps,
                scale,
            },
        )
    }

    /// `scale · Σ (pred - target)²` over positions where `mask` is set.
    pub fn mse_scaled(&mut self, pred: Var, target: &[f64], mask: &[bool], scale: f64) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || mask.len() != n {
            return Err(mismatch("mse", self.shape(pred), &[target.len()]));
        }
        let total: f64 = self
            .value(pred)
            .iter()
            .zip(target)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((p, t), _)| (p - t) * (p - t))
            .sum();
        self.push(
            "mse",
            vec![1],
            vec![scale * total],
            Op::Mse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                scale,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = self.grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            backprop(&self.nodes, i, g, lower);
        }
        Ok(())
    }
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if let Some(da) = slot(lower, nodes, *a) {
                gemm_nt_acc(g, &nodes[b.0].value, da, m, n, k);
            }
            if let Some(db) = slot(lower, nodes, *b) {
                gemm_tn_acc(&nodes[a.0].value, g, db, m, k, n);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[0];
            if let Some(da) = slot(lower, nodes, *a) {
                gemm_acc(g, &nodes[b.0].value, da, m, n, k);
            }
            if let Some(db) = slot(lower, nodes, *b) {
                gemm_tn_acc(g, &nodes[a.0].value, db, m, n, k);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            if let Some(da) = slot(lower, nodes, *a) {
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += g[c * m + r];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = slot(lower, nodes, *v) {
                    add_into(d, g);
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(da) = slot(lower, nodes, *a) {
                add_into(da, g);
            }
            let n = nodes[b.0].value.len();
            if let Some(db) = slot(lower, nodes, *b) {
                for row in g.chunks(n) {
                    add_into(db, row);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(da) = slot(lower, nodes, *a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = slot(lower, nodes, *b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = slot(lower, nodes, *a) {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi * c;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].shape[1];
            if let Some(dt) = slot(lower, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id as usize * d..(id as usize + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::Softmax(a) | Op::CausalSoftmax(a) => {
            let n = *node.shape.last().unwrap();
            if let Some(da) = slot(lower, nodes, *a) {
                for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gi - s);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, stats } => {
            let n = node.shape[1];
            let (xv, gv) = (&nodes[x.0].value, &nodes[gamma.0].value);
            let mut xhat = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            let mut dgamma = vec![0.0; n];
            let mut dbeta = vec![0.0; n];
            let want_x = nodes[x.0].requires_grad;
            let mut dx_all = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
            for (r, &(mean, rstd)) in stats.iter().enumerate() {
                let xr = &xv[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                for j in 0..n {
                    xhat[j] = (xr[j] - mean) * rstd;
                    dxhat[j] = gr[j] * gv[j];
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                }
                if want_x {
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx_all[r * n + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
            }
            if let Some(dx) = slot(lower, nodes, *x) {
                add_into(dx, &dx_all);
            }
            if let Some(dg) = slot(lower, nodes, *gamma) {
                add_into(dg, &dgamma);
            }
            if let Some(db) = slot(lower, nodes, *beta) {
                add_into(db, &dbeta);
            }
        }
        Op::Gelu(a) => {
            let av = &nodes[a.0].value;
            if let Some(da) = slot(lower, nodes, *a) {
                for ((d, gi), &x) in da.iter_mut().zip(g).zip(av) {
                    *d += gi * gelu_grad(x);
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(lower, nodes, *a) {
                add_into(da, g);
            }
        }
        Op::Concat(parts) => {
            let total = node.shape[1];
            let m = node.shape[0];
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].shape[1];
                if let Some(dp) = slot(lower, nodes, *p) {
                    for r in 0..m {
                        add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let n = nodes[x.0].shape[1];
            let w = node.shape[1];
            if let Some(dx) = slot(lower, nodes, *x) {
                for (r, grow) in g.chunks(w).enumerate() {
                    add_into(&mut dx[r * n + start..r * n + start + w], grow);
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(lower, nodes, *x) {
                for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
        }
        Op::GatherRows { x, rows } => {
            let n = node.shape[1];
            if let Some(dx) = slot(lower, nodes, *x) {
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(lower, nodes, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::CrossEntropy { logits, targets, mask, scale } => {
            let n = nodes[logits.0].shape[1];
            let lv = &nodes[logits.0].value;
            if let Some(dl) = slot(lower, nodes, *logits) {
                let c = g[0] * scale;
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let mut p = lv[r * n..(r + 1) * n].to_vec();
                    softmax_row(&mut p);
                    p[t as usize] -= 1.0;
                    for (d, pi) in dl[r * n..(r + 1) * n].iter_mut().zip(&p) {
                        *d += c * pi;
                    }
                }
            }
        }
        Op::LogSoftmaxGather { logits, targets } => {
            let n = nodes[logits.0].shape[1];
            let lv = &nodes[logits.0].value;
            if let Some(dl) = slot(lower, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    if g[r] == 0.0 {
                        continue;
                    }
                    let mut p = lv[r * n..(r + 1) * n].to_vec();
                    softmax_row(&mut p);
                    let drow = &mut dl[r * n..(r + 1) * n];
                    for (d, pi) in drow.iter_mut().zip(&p) {
                        *d -= g[r] * pi;
                    }
                    drow[t as usize] += g[r];
                }
            }
        }
        Op::Entropy { logits, mask, scale } => {
            let n = nodes[logits.0].shape[1];
            let lv = &nodes[logits.0].value;
            if let Some(dl) = slot(lower, nodes, *logits) {
                let c = g[0] * scale;
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let mut p = lv[r * n..(r + 1) * n].to_vec();
                    softmax_row(&mut p);
                    let logp: Vec<f64> = p.iter().map(|&q| if q > 0.0 { q.ln() } else { 0.0 }).collect();
                    let h: f64 = -p.iter().zip(&logp).map(|(q, l)| q * l).sum::<f64>();
                    for ((d, q), l) in dl[r * n..(r + 1) * n].iter_mut().zip(&p).zip(&logp) {
                        *d -= c * q * (l + h);
                    }
                }
            }
        }
        Op::PpoClip { logp, old, adv, mask, eps, scale } => {
            let lp = &nodes[logp.0].value;
            if let Some(dl) = slot(lower, nodes, *logp) {
                for t in 0..lp.len() {
                    if !mask[t] {
                        continue;
                    }
                    let r = (lp[t] - old[t]).exp();
                    let clipped = r.clamp(1.0 - eps, 1.0 + eps);
                    // the clipped branch is constant in logp
                    if r * adv[t] <= clipped * adv[t] {
                        dl[t] -= g[0] * scale * adv[t] * r;
                    }
                }
            }
        }
        Op::Mse { pred, target, mask, scale } => {
            let pv = &nodes[pred.0].value;
            if let Some(dp) = slot(lower, nodes, *pred) {
                for t in 0..pv.len() {
                    if mask[t] {
                        dp[t] += g[0] * scale * 2.0 * (pv[t] - target[t]);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
