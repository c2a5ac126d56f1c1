//! Define-by-run reverse-mode autodiff over f64 tensors.
//!
//! A [`Graph`] is a growing arena of [`Tensor`] nodes; every op records its
//! inputs plus whatever it must remember for the backward pass (attention
//! probabilities, solved top-k rows). [`Graph::backward`] walks the arena in
//! reverse creation order, which is already a topological order for a
//! define-by-run tape.
//!
//! Gradients are held persistently only on `requires_grad` leaves; repeated
//! `backward` calls accumulate into them and [`Graph::zero_grads`] resets
//! them. Intermediate gradients live in scratch buffers that are dropped as
//! the sweep passes them.
//!
//! Graph construction and backward are single-threaded; a finished graph may
//! be read from multiple threads.

use super::linalg;
use crate::softtopk::{self, TopKRow};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// One node: value, optional persistent gradient, and the op that made it.
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Populated on `requires_grad` leaves by `backward`; same shape as `data`.
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// C = A Bᵀ (used for tied-embedding logits).
    MatmulTb { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// Row-vector broadcast add (bias).
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    /// Row-vector broadcast multiply (channel masks).
    MulRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    /// Broadcast multiply by a scalar node.
    MulScalar { a: Var, s: Var },
    Sigmoid { a: Var },
    Silu { a: Var },
    SoftmaxRows { a: Var },
    RmsNorm { a: Var, gain: Var },
    Embed { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    GatherCols { a: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        /// Saved softmax probabilities, head-major, n_heads * n * n.
        probs: Vec<f64>,
    },
    SoftTopK { z: Var, row: TopKRow },
}

const RMS_EPS: f64 = 1e-8;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar convenience accessor; panics if the node is not rank-0.
    pub fn scalar_value(&self, v: Var) -> f64 {
        assert!(self.nodes[v.0].shape.is_empty(), "not a scalar node");
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ── node construction ──────────────────────────────────────────────

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        needs_grad: bool,
        op: Op,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_shape(op: &'static str, shape: &[usize], data_len: usize) -> Result<()> {
        if shape.iter().any(|&d| d == 0) || numel(shape) != data_len {
            return Err(Error::BadShape {
                op,
                expected: "shape with nonzero dims matching data length",
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        Self::check_shape("leaf", &shape, data.len())?;
        self.push("leaf", shape, data, true, true, Op::Leaf)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        Self::check_shape("constant", &shape, data.len())?;
        self.push("constant", shape, data, false, false, Op::Leaf)
    }

    pub fn scalar(&mut self, c: f64) -> Result<Var> {
        self.push("scalar", vec![], vec![c], false, false, Op::Leaf)
    }

    // ── shape helpers ──────────────────────────────────────────────────

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(Error::BadShape {
                op,
                expected: "rank-2 tensor",
                got: s.clone(),
            })
        }
    }

    fn vec1(&self, v: Var, op: &'static str) -> Result<usize> {
        let s = &self.nodes[v.0].shape;
        if s.len() == 1 {
            Ok(s[0])
        } else {
            Err(Error::BadShape {
                op,
                expected: "rank-1 tensor",
                got: s.clone(),
            })
        }
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ── ops ────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.mat(a, "matmul")?;
        let (kb, n) = self.mat(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = linalg::matmul(self.value(a), self.value(b), m, ka, n);
        let ng = self.needs(&[a, b]);
        self.push("matmul", vec![m, n], data, false, ng, Op::Matmul { a, b })
    }

    /// C = A Bᵀ with A m-by-k, B n-by-k.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.mat(a, "matmul_tb")?;
        let (n, kb) = self.mat(b, "matmul_tb")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = linalg::matmul_a_bt(self.value(a), self.value(b), m, ka, n);
        let ng = self.needs(&[a, b]);
        self.push("matmul_tb", vec![m, n], data, false, ng, Op::MatmulTb { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, b]);
        self.push("add", shape, data, false, ng, Op::Add { a, b })
    }

    /// a + row broadcast over rows of a.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "add_row")?;
        let rn = self.vec1(row, "add_row")?;
        if rn != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rv = self.value(row).to_vec();
        let mut data = self.value(a).to_vec();
        for i in 0..m {
            for (x, r) in data[i * n..(i + 1) * n].iter_mut().zip(&rv) {
                *x += r;
            }
        }
        let ng = self.needs(&[a, row]);
        self.push("add_row", vec![m, n], data, false, ng, Op::AddRow { a, row })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, b]);
        self.push("mul", shape, data, false, ng, Op::Mul { a, b })
    }

    /// a * row broadcast over rows of a; this is how channel masks apply.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "mul_row")?;
        let rn = self.vec1(row, "mul_row")?;
        if rn != n {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rv = self.value(row).to_vec();
        let mut data = self.value(a).to_vec();
        for i in 0..m {
            for (x, r) in data[i * n..(i + 1) * n].iter_mut().zip(&rv) {
                *x *= r;
            }
        }
        let ng = self.needs(&[a, row]);
        self.push("mul_row", vec![m, n], data, false, ng, Op::MulRow { a, row })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        self.push("scale", shape, data, false, ng, Op::Scale { a, c })
    }

    /// Broadcast multiply by a rank-0 node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.shape(s).is_empty() {
            return Err(Error::BadShape {
                op: "mul_scalar",
                expected: "rank-0 scalar node",
                got: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s)[0];
        let data: Vec<f64> = self.value(a).iter().map(|x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, s]);
        self.push("mul_scalar", shape, data, false, ng, Op::MulScalar { a, s })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        self.push("sigmoid", shape, data, false, ng, Op::Sigmoid { a })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        self.push("silu", shape, data, false, ng, Op::Silu { a })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "softmax_rows")?;
        let av = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &x) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                let e = (x - mx).exp();
                *o = e;
                denom += e;
            }
            for o in &mut data[i * n..(i + 1) * n] {
                *o /= denom;
            }
        }
        let ng = self.needs(&[a]);
        self.push("softmax_rows", vec![m, n], data, false, ng, Op::SoftmaxRows { a })
    }

    /// Per-row RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "rms_norm")?;
        let gn = self.vec1(gain, "rms_norm")?;
        if gn != n {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let av = self.value(a);
        let gv = self.value(gain);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64 + RMS_EPS;
            let inv_r = 1.0 / ms.sqrt();
            for j in 0..n {
                data[i * n + j] = row[j] * gv[j] * inv_r;
            }
        }
        let ng = self.needs(&[a, gain]);
        self.push("rms_norm", vec![m, n], data, false, ng, Op::RmsNorm { a, gain })
    }

    /// Rows of `table` selected by token id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat(table, "embed")?;
        if ids.is_empty() {
            return Err(Error::BadShape {
                op: "embed",
                expected: "nonempty id sequence",
                got: vec![0],
            });
        }
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
        }
        let tv = self.value(table);
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.needs(&[table]);
        self.push(
            "embed",
            vec![ids.len(), d],
            data,
            false,
            ng,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(a, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::BadShape {
                op: "gather_rows",
                expected: "nonempty index list",
                got: vec![0],
            });
        }
        for &i in idx {
            if i >= m {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    size: m,
                });
            }
        }
        let av = self.value(a);
        let mut data = vec![0.0; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            data[r * n..(r + 1) * n].copy_from_slice(&av[i * n..(i + 1) * n]);
        }
        let ng = self.needs(&[a]);
        self.push(
            "gather_rows",
            vec![idx.len(), n],
            data,
            false,
            ng,
            Op::GatherRows { a, idx: idx.to_vec() },
        )
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(a, "gather_cols")?;
        if idx.is_empty() {
            return Err(Error::BadShape {
                op: "gather_cols",
                expected: "nonempty index list",
                got: vec![0],
            });
        }
        for &j in idx {
            if j >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_cols",
                    index: j,
                    size: n,
                });
            }
        }
        let av = self.value(a);
        let w = idx.len();
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            for (c, &j) in idx.iter().enumerate() {
                data[i * w + c] = av[i * n + j];
            }
        }
        let ng = self.needs(&[a]);
        self.push(
            "gather_cols",
            vec![m, w],
            data,
            false,
            ng,
            Op::GatherCols { a, idx: idx.to_vec() },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_rows",
                expected: "at least one part",
                got: vec![0],
            });
        }
        let (_, n) = self.mat(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_rows")?;
            if pn != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += pm;
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let ng = self.needs(parts);
        self.push(
            "concat_rows",
            vec![rows, n],
            data,
            false,
            ng,
            Op::ConcatRows { parts: parts.to_vec() },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "reshape",
                expected: "shape with matching element count",
                got: shape,
            });
        }
        let data = self.value(a).to_vec();
        let ng = self.needs(&[a]);
        self.push("reshape", shape, data, false, ng, Op::Reshape { a })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        let ng = self.needs(&[a]);
        self.push("sum", vec![], vec![s], false, ng, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s: f64 = self.value(a).iter().sum::<f64>() / n as f64;
        let ng = self.needs(&[a]);
        self.push("mean", vec![], vec![s], false, ng, Op::Mean { a })
    }

    /// Mean next-token cross-entropy over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.mat(logits, "cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::AllPositionsMasked);
        }
        for (i, &t) in targets.iter().enumerate() {
            if mask[i] && t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let ng = self.needs(&[logits]);
        self.push(
            "cross_entropy",
            vec![],
            vec![total / count as f64],
            false,
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product attention with a causal mask; q, k, v
    /// are n-by-d with the head dimension packed into columns.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (n, d) = self.mat(q, "causal_attention")?;
        for &x in &[k, v] {
            if self.shape(x) != [n, d] {
                return Err(Error::ShapeMismatch {
                    op: "causal_attention",
                    lhs: vec![n, d],
                    rhs: self.shape(x).to_vec(),
                });
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::BadShape {
                op: "causal_attention",
                expected: "head count dividing the model width",
                got: vec![n_heads, d],
            });
        }
        let dh = d / n_heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = vec![0.0; n_heads * n * n];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; n];
        for h in 0..n_heads {
            let off = h * dh;
            let pbase = h * n * n;
            for i in 0..n {
                let qi = &qv[i * d + off..i * d + off + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = linalg::dot(qi, &kv[j * d + off..j * d + off + dh]) * inv;
                    scores[j] = s;
                    mx = mx.max(s);
                }
                let mut denom = 0.0;
                for s in scores[..=i].iter_mut() {
                    *s = (*s - mx).exp();
                    denom += *s;
                }
                for j in 0..=i {
                    let p = scores[j] / denom;
                    probs[pbase + i * n + j] = p;
                    linalg::axpy(
                        p,
                        &vv[j * d + off..j * d + off + dh],
                        &mut out[i * d + off..i * d + off + dh],
                    );
                }
            }
        }
        let ng = self.needs(&[q, k, v]);
        self.push(
            "causal_attention",
            vec![n, d],
            out,
            false,
            ng,
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
        )
    }

    /// Budgeted top-k relaxation over the flattened input; see [`crate::softtopk`].
    pub fn soft_topk(&mut self, z: Var, t: usize) -> Result<Var> {
        let row = softtopk::soft_topk(self.value(z), t)?;
        let shape = self.shape(z).to_vec();
        let data = row.mask.clone();
        let ng = self.needs(&[z]);
        self.push("soft_topk", shape, data, false, ng, Op::SoftTopK { z, row })
    }

    /// The solved top-k row saved by a [`Graph::soft_topk`] node.
    pub fn topk_row(&self, v: Var) -> Option<&TopKRow> {
        match &self.nodes[v.0].op {
            Op::SoftTopK { row, .. } => Some(row),
            _ => None,
        }
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Accumulate d(loss)/d(leaf) into every `requires_grad` leaf. The loss
    /// must be a finite scalar. Calling twice without [`Graph::zero_grads`]
    /// accumulates two passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        {
            let lt = &self.nodes[loss.0];
            if !lt.shape.is_empty() {
                return Err(Error::NonScalarLoss {
                    shape: lt.shape.clone(),
                });
            }
            if !lt.data[0].is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        let n = loss.0 + 1;
        let mut tg: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        tg[loss.0] = Some(vec![1.0]);
        {
            let nodes = &self.nodes;
            for id in (0..n).rev() {
                if !nodes[id].needs_grad {
                    tg[id] = None;
                    continue;
                }
                if matches!(nodes[id].op, Op::Leaf) {
                    continue; // leave the scratch grad for the fold below
                }
                let Some(g) = tg[id].take() else { continue };
                backprop_op(nodes, id, &g, &mut tg);
            }
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let pg = node
                .grad
                .get_or_insert_with(|| vec![0.0; node.data.len()]);
            if let Some(Some(t)) = tg.get(id) {
                linalg::axpy(1.0, t, pg);
            }
        }
        Ok(())
    }

    /// Reset every `requires_grad` leaf's gradient to zeros.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
    }
}

/// Scratch-gradient accessor: allocate on first touch.
fn acc<'a>(tg: &'a mut [Option<Vec<f64>>], nodes: &[Tensor], v: Var) -> &'a mut Vec<f64> {
    let slot = &mut tg[v.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[v.0].data.len()]);
    }
    slot.as_mut().unwrap()
}

fn backprop_op(nodes: &[Tensor], id: usize, g: &[f64], tg: &mut [Option<Vec<f64>>]) {
    let wants = |v: Var| nodes[v.0].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if wants(*a) {
                let da = linalg::matmul_a_bt(g, &nodes[b.0].data, m, n, k);
                linalg::axpy(1.0, &da, acc(tg, nodes, *a));
            }
            if wants(*b) {
                let db = linalg::matmul_at_b(&nodes[a.0].data, g, m, k, n);
                linalg::axpy(1.0, &db, acc(tg, nodes, *b));
            }
        }
        Op::MatmulTb { a, b } => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[0];
            if wants(*a) {
                let da = linalg::matmul(g, &nodes[b.0].data, m, n, k);
                linalg::axpy(1.0, &da, acc(tg, nodes, *a));
            }
            if wants(*b) {
                let db = linalg::matmul_at_b(g, &nodes[a.0].data, m, n, k);
                linalg::axpy(1.0, &db, acc(tg, nodes, *b));
            }
        }
        Op::Add { a, b } => {
            if wants(*a) {
                linalg::axpy(1.0, g, acc(tg, nodes, *a));
            }
            if wants(*b) {
                linalg::axpy(1.0, g, acc(tg, nodes, *b));
            }
        }
        Op::AddRow { a, row } => {
            if wants(*a) {
                linalg::axpy(1.0, g, acc(tg, nodes, *a));
            }
            if wants(*row) {
                let n = nodes[row.0].data.len();
                let dr = acc(tg, nodes, *row);
                for chunk in g.chunks_exact(n) {
                    linalg::axpy(1.0, chunk, dr);
                }
            }
        }
        Op::Mul { a, b } => {
            if wants(*a) {
                let da = acc(tg, nodes, *a);
                for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(&nodes[b.0].data) {
                    *d += gv * bv;
                }
            }
            if wants(*b) {
                let db = acc(tg, nodes, *b);
                for ((d, &gv), &av) in db.iter_mut().zip(g).zip(&nodes[a.0].data) {
                    *d += gv * av;
                }
            }
        }
        Op::MulRow { a, row } => {
            let n = nodes[row.0].data.len();
            if wants(*a) {
                let rv = &nodes[row.0].data;
                let da = acc(tg, nodes, *a);
                for (dchunk, gchunk) in da.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                    for ((d, &gv), &r) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                        *d += gv * r;
                    }
                }
            }
            if wants(*row) {
                let av = &nodes[a.0].data;
                let dr = acc(tg, nodes, *row);
                for (achunk, gchunk) in av.chunks_exact(n).zip(g.chunks_exact(n)) {
                    for ((d, &gv), &a) in dr.iter_mut().zip(gchunk).zip(achunk) {
                        *d += gv * a;
                    }
                }
            }
        }
        Op::Scale { a, c } => {
            if wants(*a) {
                linalg::axpy(*c, g, acc(tg, nodes, *a));
            }
        }
        Op::MulScalar { a, s } => {
            if wants(*a) {
                linalg::axpy(nodes[s.0].data[0], g, acc(tg, nodes, *a));
            }
            if wants(*s) {
                let ds: f64 = g.iter().zip(&nodes[a.0].data).map(|(gv, av)| gv * av).sum();
                acc(tg, nodes, *s)[0] += ds;
            }
        }
        Op::Sigmoid { a } => {
            if wants(*a) {
                let y = &nodes[id].data;
                let da = acc(tg, nodes, *a);
                for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
        }
        Op::Silu { a } => {
            if wants(*a) {
                let x = &nodes[a.0].data;
                let da = acc(tg, nodes, *a);
                for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    let s = sigmoid(xv);
                    *d += gv * s * (1.0 + xv * (1.0 - s));
                }
            }
        }
        Op::SoftmaxRows { a } => {
            if wants(*a) {
                let n = nodes[id].shape[1];
                let p = &nodes[id].data;
                let da = acc(tg, nodes, *a);
                for ((dchunk, gchunk), pchunk) in da
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(p.chunks_exact(n))
                {
                    let s = linalg::dot(gchunk, pchunk);
                    for ((d, &gv), &pv) in dchunk.iter_mut().zip(gchunk).zip(pchunk) {
                        *d += pv * (gv - s);
                    }
                }
            }
        }
        Op::RmsNorm { a, gain } => {
            let n = nodes[id].shape[1];
            let x = &nodes[a.0].data;
            let gv = &nodes[gain.0].data;
            if wants(*a) {
                let da = acc(tg, nodes, *a);
                for ((dchunk, gchunk), xchunk) in da
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(x.chunks_exact(n))
                {
                    let ms = xchunk.iter().map(|v| v * v).sum::<f64>() / n as f64 + RMS_EPS;
                    let r = ms.sqrt();
                    let inner: f64 = (0..n).map(|j| gchunk[j] * gv[j] * xchunk[j]).sum();
                    let c = inner / (n as f64 * r * r * r);
                    for j in 0..n {
                        dchunk[j] += gchunk[j] * gv[j] / r - xchunk[j] * c;
                    }
                }
            }
            if wants(*gain) {
                let dg = acc(tg, nodes, *gain);
                for (gchunk, xchunk) in g.chunks_exact(n).zip(x.chunks_exact(n)) {
                    let ms = xchunk.iter().map(|v| v * v).sum::<f64>() / n as f64 + RMS_EPS;
                    let r = ms.sqrt();
                    for j in 0..n {
                        dg[j] += gchunk[j] * xchunk[j] / r;
                    }
                }
            }
        }
        Op::Embed { table, ids } => {
            if wants(*table) {
                let d = nodes[table.0].shape[1];
                let dt = acc(tg, nodes, *table);
                for (i, &idx) in ids.iter().enumerate() {
                    linalg::axpy(1.0, &g[i * d..(i + 1) * d], &mut dt[idx * d..(idx + 1) * d]);
                }
            }
        }
        Op::GatherRows { a, idx } => {
            if wants(*a) {
                let n = nodes[a.0].shape[1];
                let da = acc(tg, nodes, *a);
                for (r, &i) in idx.iter().enumerate() {
                    linalg::axpy(1.0, &g[r * n..(r + 1) * n], &mut da[i * n..(i + 1) * n]);
                }
            }
        }
        Op::GatherCols { a, idx } => {
            if wants(*a) {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let w = idx.len();
                let da = acc(tg, nodes, *a);
                for i in 0..m {
                    for (c, &j) in idx.iter().enumerate() {
                        da[i * n + j] += g[i * w + c];
                    }
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].data.len();
                if wants(p) {
                    linalg::axpy(1.0, &g[offset..offset + len], acc(tg, nodes, p));
                }
                offset += len;
            }
        }
        Op::Reshape { a } => {
            if wants(*a) {
                linalg::axpy(1.0, g, acc(tg, nodes, *a));
            }
        }
        Op::Sum { a } => {
            if wants(*a) {
                let da = acc(tg, nodes, *a);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean { a } => {
            if wants(*a) {
                let scale = g[0] / nodes[a.0].data.len() as f64;
                let da = acc(tg, nodes, *a);
                for d in da.iter_mut() {
                    *d += scale;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
        } => {
            if wants(*logits) {
                let (n, v) = (nodes[logits.0].shape[0], nodes[logits.0].shape[1]);
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let gl = g[0] / count;
                let lv = &nodes[logits.0].data;
                let dl = acc(tg, nodes, *logits);
                for i in 0..n {
                    if !mask[i] {
                        continue;
                    }
                    let row = &lv[i * v..(i + 1) * v];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                    let drow = &mut dl[i * v..(i + 1) * v];
                    for j in 0..v {
                        let p = (row[j] - mx).exp() / denom;
                        drow[j] += gl * (p - if j == targets[i] { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Op::CausalAttention {
            q,
            k,
            v,
            n_heads,
            probs,
        } => {
            let (n, d) = (nodes[id].shape[0], nodes[id].shape[1]);
            let dh = d / n_heads;
            let inv = 1.0 / (dh as f64).sqrt();
            let qv = &nodes[q.0].data;
            let kv = &nodes[k.0].data;
            let vv = &nodes[v.0].data;
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for h in 0..*n_heads {
                let off = h * dh;
                let pbase = h * n * n;
                for i in 0..n {
                    let gi = &g[i * d + off..i * d + off + dh];
                    let prow = &probs[pbase + i * n..pbase + i * n + i + 1];
                    for j in 0..=i {
                        dp[j] = linalg::dot(gi, &vv[j * d + off..j * d + off + dh]);
                        linalg::axpy(prow[j], gi, &mut dv[j * d + off..j * d + off + dh]);
                    }
                    let s = linalg::dot(&dp[..=i], prow);
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - s) * inv;
                        linalg::axpy(
                            ds,
                            &kv[j * d + off..j * d + off + dh],
                            &mut dq[i * d + off..i * d + off + dh],
                        );
                        linalg::axpy(
                            ds,
                            &qv[i * d + off..i * d + off + dh],
                            &mut dk[j * d + off..j * d + off + dh],
                        );
                    }
                }
            }
            if wants(*q) {
                linalg::axpy(1.0, &dq, acc(tg, nodes, *q));
            }
            if wants(*k) {
                linalg::axpy(1.0, &dk, acc(tg, nodes, *k));
            }
            if wants(*v) {
                linalg::axpy(1.0, &dv, acc(tg, nodes, *v));
            }
        }
        Op::SoftTopK { z, row } => {
            if wants(*z) {
                let dz = softtopk::backward_from_row(row, g);
                linalg::axpy(1.0, &dz, acc(tg, nodes, *z));
            }
        }
    }
}
