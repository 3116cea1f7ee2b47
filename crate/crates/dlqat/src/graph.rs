//! Define-by-run reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value and a record of how it was produced. Nodes are created in
//! topological order by construction, so `backward` is a single reverse walk
//! that visits each node exactly once and sums gradient contributions into
//! shared inputs. Graphs are rebuilt every training step and never reused
//! across iterations.
//!
//! Ops with non-standard gradients (the fake quantizers) plug in through the
//! [`CustomOp`] trait rather than patching the tape.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a tensor living on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Epsilon inside the RMS: `rms = sqrt(mean(x^2) + EPS)`.
pub const RMSNORM_EPS: f64 = 1e-5;

/// Additive base for rotary position angles.
pub const ROPE_BASE: f64 = 10000.0;

/// Value written into causally masked attention scores. Large and negative
/// but finite, so the finiteness invariant holds and softmax maps it to an
/// exact zero weight after max-subtraction.
pub const MASKED_SCORE: f64 = -1e30;

/// An operation with externally supplied forward and backward rules.
///
/// `backward` returns one optional gradient buffer per input, in input
/// order; `None` means "no gradient flows to this input".
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

#[derive(Debug)]
enum OpRecord {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: f64 },
    MulColVec { a: Var, v: Var },
    MulRowVec { a: Var, v: Var },
    AddColVec { a: Var, v: Var },
    Clip { a: Var, lo: f64, hi: f64 },
    RoundHalfEven,
    Transpose { a: Var },
    SliceRows { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    CausalMask { a: Var },
    Softmax { a: Var, axis: usize },
    Silu { a: Var },
    RmsNorm { x: Var, gain: Var },
    Rope { x: Var, n_heads: usize },
    EmbeddingLookup { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum { a: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: OpRecord,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. Leaves are the only entry points for data and
    /// parameters; everything else is derived through ops.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: OpRecord::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a tensor after `backward`, if any was accumulated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, requires_grad: bool, op: OpRecord) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // -- binary elementwise ------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", out, self.any_requires(&[a, b]), OpRecord::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("sub", out, self.any_requires(&[a, b]), OpRecord::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", out, self.any_requires(&[a, b]), OpRecord::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(Error::DivisionByZero);
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("div", out, self.any_requires(&[a, b]), OpRecord::Div { a, b })
    }

    // -- scalar and broadcast ----------------------------------------------

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add_scalar", out, self.nodes[a.0].requires_grad, OpRecord::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul_scalar", out, self.nodes[a.0].requires_grad, OpRecord::MulScalar { a, c })
    }

    /// Multiply each row `i` of a 2-D tensor by `v[i]`.
    pub fn mul_col_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if self.value(v).numel() != rows {
            return Err(Error::shape(
                "mul_col_vec",
                format!("matrix has {} rows, vector has {} elements", rows, self.value(v).numel()),
            ));
        }
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = av[i * cols + j] * vv[i];
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("mul_col_vec", out, self.any_requires(&[a, v]), OpRecord::MulColVec { a, v })
    }

    /// Multiply each column `j` of a 2-D tensor by `v[j]`.
    pub fn mul_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if self.value(v).numel() != cols {
            return Err(Error::shape(
                "mul_row_vec",
                format!("matrix has {} cols, vector has {} elements", cols, self.value(v).numel()),
            ));
        }
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = av[i * cols + j] * vv[j];
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("mul_row_vec", out, self.any_requires(&[a, v]), OpRecord::MulRowVec { a, v })
    }

    /// Add `v[i]` to every element of row `i` (bias over output channels).
    pub fn add_col_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if self.value(v).numel() != rows {
            return Err(Error::shape(
                "add_col_vec",
                format!("matrix has {} rows, vector has {} elements", rows, self.value(v).numel()),
            ));
        }
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = av[i * cols + j] + vv[i];
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("add_col_vec", out, self.any_requires(&[a, v]), OpRecord::AddColVec { a, v })
    }

    // -- pointwise nonlinearities and friends --------------------------------

    /// `clip(x, lo, hi) = min(max(x, lo), hi)`.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(lo).min(hi)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("clip", out, self.nodes[a.0].requires_grad, OpRecord::Clip { a, lo, hi })
    }

    /// Round half to even. Zero gradient everywhere; quantizers that need
    /// straight-through behaviour use their own [`CustomOp`] instead.
    pub fn round_half_even(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.round_ties_even()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("round_half_even", out, self.nodes[a.0].requires_grad, OpRecord::RoundHalfEven)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("silu", out, self.nodes[a.0].requires_grad, OpRecord::Silu { a })
    }

    // -- structural ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::shape("matmul", format!("[{m}x{ka}] * [{kb}x{n}]")));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, ka, n);
        let out = Tensor::new(vec![m, n], data)?;
        self.push("matmul", out, self.any_requires(&[a, b]), OpRecord::Matmul { a, b })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        let out = Tensor::new(vec![cols, rows], transpose_data(self.value(a).data(), rows, cols))?;
        self.push("transpose", out, self.nodes[a.0].requires_grad, OpRecord::Transpose { a })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if start >= end || end > rows {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                detail: format!("rows {start}..{end} of {rows}"),
            });
        }
        let data = self.value(a).data()[start * cols..end * cols].to_vec();
        let out = Tensor::new(vec![end - start, cols], data)?;
        self.push("slice_rows", out, self.nodes[a.0].requires_grad, OpRecord::SliceRows { a, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat_rows of zero tensors".into()));
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("column counts differ: {cols} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let requires = self.any_requires(parts);
        self.push("concat_rows", out, requires, OpRecord::ConcatRows { parts: parts.to_vec() })
    }

    /// Causal attention mask on a square score matrix laid out
    /// `[key position, query position]`: entries with key > query are
    /// replaced by [`MASKED_SCORE`].
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if rows != cols {
            return Err(Error::shape("causal_mask", format!("expected square scores, got {rows}x{cols}")));
        }
        let av = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for s in 0..rows {
            for t in 0..cols {
                data[s * cols + t] = if s > t { MASKED_SCORE } else { av[s * cols + t] };
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("causal_mask", out, self.nodes[a.0].requires_grad, OpRecord::CausalMask { a })
    }

    /// Softmax over `axis` of a 2-D tensor (0 = down each column, 1 = along
    /// each row), max-subtracted for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if axis > 1 {
            return Err(Error::Invalid(format!("softmax axis {axis} on 2-D tensor")));
        }
        let av = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        let (outer, inner, ostride, istride) = if axis == 0 {
            (cols, rows, 1, cols) // walk down a column
        } else {
            (rows, cols, cols, 1) // walk along a row
        };
        for o in 0..outer {
            let base = o * ostride;
            let mut max = f64::NEG_INFINITY;
            for i in 0..inner {
                max = max.max(av[base + i * istride]);
            }
            let mut sum = 0.0;
            for i in 0..inner {
                let e = (av[base + i * istride] - max).exp();
                data[base + i * istride] = e;
                sum += e;
            }
            for i in 0..inner {
                data[base + i * istride] /= sum;
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("softmax", out, self.nodes[a.0].requires_grad, OpRecord::Softmax { a, axis })
    }

    /// RMS normalization down each column with a learnable per-row gain:
    /// `out[i,t] = gain[i] * x[i,t] / sqrt(mean_i(x[:,t]^2) + eps)`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gain).numel() != rows {
            return Err(Error::shape(
                "rmsnorm",
                format!("x has {} rows, gain has {} elements", rows, self.value(gain).numel()),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let mut data = vec![0.0; rows * cols];
        for t in 0..cols {
            let inv = inv_rms_column(xv, rows, cols, t);
            for i in 0..rows {
                data[i * cols + t] = gv[i] * xv[i * cols + t] * inv;
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("rmsnorm", out, self.any_requires(&[x, gain]), OpRecord::RmsNorm { x, gain })
    }

    /// Rotary position encoding applied per head down the feature axis of a
    /// `[d, T]` tensor; pairs `(2j, 2j+1)` within each head rotate by
    /// `t * base^(-2j/head_dim)`.
    pub fn rope(&mut self, x: Var, n_heads: usize) -> Result<Var> {
        let (d, t_len) = self.value(x).dims2()?;
        if n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(Error::shape(
                "rope",
                format!("feature dim {d} not divisible into {n_heads} even-sized heads"),
            ));
        }
        let data = rope_apply(self.value(x).data(), d, t_len, n_heads, false);
        let out = Tensor::new(vec![d, t_len], data)?;
        self.push("rope", out, self.nodes[x.0].requires_grad, OpRecord::Rope { x, n_heads })
    }

    /// Gather rows of `table[vocab, d]` into columns of a `[d, T]` output.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::IndexOutOfRange {
                op: "embedding_lookup",
                detail: format!("id {bad} >= vocab {vocab}"),
            });
        }
        let tv = self.value(table).data();
        let t_len = ids.len();
        let mut data = vec![0.0; d * t_len];
        for (t, &id) in ids.iter().enumerate() {
            for i in 0..d {
                data[i * t_len + t] = tv[id * d + i];
            }
        }
        let out = Tensor::new(vec![d, t_len], data)?;
        self.push(
            "embedding_lookup",
            out,
            self.nodes[table.0].requires_grad,
            OpRecord::EmbeddingLookup { table, ids: ids.to_vec() },
        )
    }

    /// Mean negative log-likelihood (nats) of `targets[t]` under column-wise
    /// softmax of `logits[vocab, T]`. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (vocab, t_len) = self.value(logits).dims2()?;
        if targets.len() != t_len {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits have {t_len} columns, {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= vocab) {
            return Err(Error::IndexOutOfRange {
                op: "cross_entropy",
                detail: format!("target {bad} >= vocab {vocab}"),
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; vocab * t_len];
        let mut nll_sum = 0.0;
        for t in 0..t_len {
            let mut max = f64::NEG_INFINITY;
            for v in 0..vocab {
                max = max.max(lv[v * t_len + t]);
            }
            let mut sum = 0.0;
            for v in 0..vocab {
                let e = (lv[v * t_len + t] - max).exp();
                probs[v * t_len + t] = e;
                sum += e;
            }
            for v in 0..vocab {
                probs[v * t_len + t] /= sum;
            }
            let lse = max + sum.ln();
            nll_sum += lse - lv[targets[t] * t_len + t];
        }
        let out = Tensor::scalar(nll_sum / t_len as f64);
        self.push(
            "cross_entropy",
            out,
            self.nodes[logits.0].requires_grad,
            OpRecord::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(total), self.nodes[a.0].requires_grad, OpRecord::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Append an op with externally supplied forward/backward rules.
    pub fn apply_custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let name = op.name();
        let out = op.forward(&values)?;
        let requires = self.any_requires(inputs);
        self.push(name, out, requires, OpRecord::Custom { inputs: inputs.to_vec(), op })
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor reachable from `loss`; unreachable tensors
    /// keep no gradient. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Invalid("backward already ran on this graph; rebuild the graph".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let grad_out = self.nodes[i].grad.clone().expect("checked above");
            let contribs = self.backward_op(i, &grad_out)?;
            for (var, contrib) in contribs {
                self.accumulate(var, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(contrib.len(), self.nodes[v.0].value.numel());
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += ci;
                }
            }
            None => self.nodes[v.0].grad = Some(contrib),
        }
    }

    /// Per-op vector-Jacobian products. Returns `(input, contribution)`
    /// pairs; inputs that get no gradient are omitted.
    fn backward_op(&self, i: usize, go: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            OpRecord::Leaf | OpRecord::RoundHalfEven => {}
            OpRecord::Add { a, b } => {
                out.push((*a, go.to_vec()));
                out.push((*b, go.to_vec()));
            }
            OpRecord::Sub { a, b } => {
                out.push((*a, go.to_vec()));
                out.push((*b, go.iter().map(|g| -g).collect()));
            }
            OpRecord::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, go.iter().zip(bv).map(|(g, y)| g * y).collect()));
                out.push((*b, go.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            OpRecord::Div { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, go.iter().zip(bv).map(|(g, y)| g / y).collect()));
                out.push((
                    *b,
                    go.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                ));
            }
            OpRecord::AddScalar { a } => out.push((*a, go.to_vec())),
            OpRecord::MulScalar { a, c } => out.push((*a, go.iter().map(|g| g * c).collect())),
            OpRecord::MulColVec { a, v } => {
                let (rows, cols) = self.value(*a).dims2()?;
                let (av, vv) = (self.value(*a).data(), self.value(*v).data());
                let mut da = vec![0.0; rows * cols];
                let mut dv = vec![0.0; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        let g = go[r * cols + c];
                        da[r * cols + c] = g * vv[r];
                        dv[r] += g * av[r * cols + c];
                    }
                }
                out.push((*a, da));
                out.push((*v, dv));
            }
            OpRecord::MulRowVec { a, v } => {
                let (rows, cols) = self.value(*a).dims2()?;
                let (av, vv) = (self.value(*a).data(), self.value(*v).data());
                let mut da = vec![0.0; rows * cols];
                let mut dv = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let g = go[r * cols + c];
                        da[r * cols + c] = g * vv[c];
                        dv[c] += g * av[r * cols + c];
                    }
                }
                out.push((*a, da));
                out.push((*v, dv));
            }
            OpRecord::AddColVec { a, v } => {
                let (rows, cols) = self.value(*a).dims2()?;
                let mut dv = vec![0.0; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        dv[r] += go[r * cols + c];
                    }
                }
                out.push((*a, go.to_vec()));
                out.push((*v, dv));
            }
            OpRecord::Clip { a, lo, hi } => {
                let av = self.value(*a).data();
                out.push((
                    *a,
                    go.iter()
                        .zip(av)
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect(),
                ));
            }
            OpRecord::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                // dA = dY * B^T, dB = A^T * dY
                out.push((*a, matmul_nt(go, self.value(*b).data(), m, n, k)));
                out.push((*b, matmul_tn(self.value(*a).data(), go, k, m, n)));
            }
            OpRecord::Transpose { a } => {
                let (rows, cols) = self.value(*a).dims2()?;
                out.push((*a, transpose_data(go, cols, rows)));
            }
            OpRecord::SliceRows { a, start } => {
                let (rows, cols) = self.value(*a).dims2()?;
                let mut da = vec![0.0; rows * cols];
                da[start * cols..start * cols + go.len()].copy_from_slice(go);
                out.push((*a, da));
            }
            OpRecord::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    out.push((p, go[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            OpRecord::CausalMask { a } => {
                let (rows, cols) = self.value(*a).dims2()?;
                let mut da = vec![0.0; rows * cols];
                for s in 0..rows {
                    for t in s..cols {
                        da[s * cols + t] = go[s * cols + t];
                    }
                }
                out.push((*a, da));
            }
            OpRecord::Softmax { a, axis } => {
                let (rows, cols) = self.value(*a).dims2()?;
                let p = node.value.data();
                let mut da = vec![0.0; rows * cols];
                let (outer, inner, ostride, istride) = if *axis == 0 {
                    (cols, rows, 1, cols)
                } else {
                    (rows, cols, cols, 1)
                };
                for o in 0..outer {
                    let base = o * ostride;
                    let mut dot = 0.0;
                    for i in 0..inner {
                        let idx = base + i * istride;
                        dot += go[idx] * p[idx];
                    }
                    for i in 0..inner {
                        let idx = base + i * istride;
                        da[idx] = p[idx] * (go[idx] - dot);
                    }
                }
                out.push((*a, da));
            }
            OpRecord::Silu { a } => {
                let av = self.value(*a).data();
                out.push((
                    *a,
                    go.iter()
                        .zip(av)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                ));
            }
            OpRecord::RmsNorm { x, gain } => {
                let (rows, cols) = self.value(*x).dims2()?;
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; rows];
                for t in 0..cols {
                    let inv = inv_rms_column(xv, rows, cols, t);
                    // dot = sum_j go_j * gain_j * x_j
                    let mut dot = 0.0;
                    for j in 0..rows {
                        dot += go[j * cols + t] * gv[j] * xv[j * cols + t];
                    }
                    let k = inv * inv * inv / rows as f64;
                    for i in 0..rows {
                        let idx = i * cols + t;
                        dx[idx] = gv[i] * go[idx] * inv - k * dot * xv[idx];
                        dg[i] += go[idx] * xv[idx] * inv;
                    }
                }
                out.push((*x, dx));
                out.push((*gain, dg));
            }
            OpRecord::Rope { x, n_heads } => {
                let (d, t_len) = self.value(*x).dims2()?;
                out.push((*x, rope_apply(go, d, t_len, *n_heads, true)));
            }
            OpRecord::EmbeddingLookup { table, ids } => {
                let (vocab, d) = self.value(*table).dims2()?;
                let t_len = ids.len();
                let mut dt = vec![0.0; vocab * d];
                for (t, &id) in ids.iter().enumerate() {
                    for i in 0..d {
                        dt[id * d + i] += go[i * t_len + t];
                    }
                }
                out.push((*table, dt));
            }
            OpRecord::CrossEntropy { logits, targets, probs } => {
                let (vocab, t_len) = self.value(*logits).dims2()?;
                let scale = go[0] / t_len as f64;
                let mut dl = vec![0.0; vocab * t_len];
                for t in 0..t_len {
                    for v in 0..vocab {
                        let idx = v * t_len + t;
                        let indicator = if v == targets[t] { 1.0 } else { 0.0 };
                        dl[idx] = scale * (probs[idx] - indicator);
                    }
                }
                out.push((*logits, dl));
            }
            OpRecord::Sum { a } => {
                out.push((*a, vec![go[0]; self.value(*a).numel()]));
            }
            OpRecord::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let grads = op.backward(&values, &node.value, go)?;
                for (v, g) in inputs.iter().zip(grads) {
                    if let Some(g) = g {
                        out.push((*v, g));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn inv_rms_column(xv: &[f64], rows: usize, cols: usize, t: usize) -> f64 {
    let mut ms = 0.0;
    for i in 0..rows {
        let v = xv[i * cols + t];
        ms += v * v;
    }
    1.0 / (ms / rows as f64 + RMSNORM_EPS).sqrt()
}

/// Rotate (or, with `inverse`, un-rotate) feature pairs of a `[d, T]`
/// buffer; shared between forward and backward since the map is orthogonal.
fn rope_apply(data: &[f64], d: usize, t_len: usize, n_heads: usize, inverse: bool) -> Vec<f64> {
    let head_dim = d / n_heads;
    let half = head_dim / 2;
    let mut out = vec![0.0; d * t_len];
    for h in 0..n_heads {
        for j in 0..half {
            let theta = ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64);
            let r0 = h * head_dim + 2 * j;
            let r1 = r0 + 1;
            for t in 0..t_len {
                let angle = t as f64 * theta;
                let (sin, cos) = if inverse { (-angle).sin_cos() } else { angle.sin_cos() };
                let a = data[r0 * t_len + t];
                let b = data[r1 * t_len + t];
                out[r0 * t_len + t] = a * cos - b * sin;
                out[r1 * t_len + t] = a * sin + b * cos;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let id = g.constant(t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t2(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(id, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t2(1, 1, vec![2.0]));
        let b = g.constant(t2(1, 1, vec![3.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(t2(2, 3, vec![0.0; 6]));
        let b = g.constant(t2(2, 2, vec![0.0; 4]));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn round_half_even_ties() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![2.5, 3.5, -2.5, 0.5]));
        let y = g.round_half_even(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, -2.0, 0.0]);
    }

    #[test]
    fn clip_clamps_upper() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(40.0));
        let y = g.clip(x, -8.0, 7.0).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 7.0);
    }

    #[test]
    fn broadcast_mul_matches_scalar_loop() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.3 - 2.0).collect();
        let col: Vec<f64> = (0..4).map(|i| 1.5 - i as f64).collect();
        let a = g.constant(t2(4, 6, data.clone()));
        let v = g.constant(Tensor::vector(col.clone()));
        let y = g.mul_col_vec(a, v).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                // scalar loop oracle
                assert_eq!(g.value(y).data()[i * 6 + j], data[i * 6 + j] * col[i]);
            }
        }
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t2(3, 1, vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_saturated_correct() {
        let mut g = Graph::new();
        let logits = g.constant(t2(2, 1, vec![20.0, -20.0]));
        let loss = g.cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(loss).item().unwrap() <= 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::new();
        let logits = g.constant(t2(2, 1, vec![0.0, 0.0]));
        assert!(matches!(
            g.cross_entropy(logits, &[2]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradient_accumulates_on_reuse() {
        // using x twice doubles its gradient vs using it once
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.5, -0.5]), true);
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn unreachable_tensor_keeps_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0]), true);
        let orphan = g.leaf(Tensor::vector(vec![5.0]), true);
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(orphan).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0), true);
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Invalid(_))));
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Invalid(_))));
    }

    #[test]
    fn div_by_zero_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0]));
        let b = g.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(g.div(a, b), Err(Error::DivisionByZero)));
    }

    #[test]
    fn causal_mask_zeroes_future_softmax_weight() {
        let mut g = Graph::new();
        let s = g.constant(t2(3, 3, vec![1.0; 9]));
        let m = g.causal_mask(s).unwrap();
        let p = g.softmax(m, 0).unwrap();
        let pv = g.value(p).data();
        // column 0 attends only to key 0
        assert_eq!(pv[0], 1.0);
        assert_eq!(pv[3], 0.0);
        assert_eq!(pv[6], 0.0);
    }

    #[test]
    fn rope_preserves_column_norms_and_inverts() {
        let mut g = Graph::new();
        let x = t2(4, 3, (0..12).map(|i| (i as f64) * 0.37 - 1.0).collect());
        let v = g.constant(x.clone());
        let y = g.rope(v, 2).unwrap();
        let (d, t_len) = (4, 3);
        for t in 0..t_len {
            let n0: f64 = (0..d).map(|i| x.data()[i * t_len + t].powi(2)).sum();
            let n1: f64 = (0..d).map(|i| g.value(y).data()[i * t_len + t].powi(2)).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
        let back = rope_apply(g.value(y).data(), d, t_len, 2, true);
        for (a, b) in back.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_lookup_places_rows_in_columns() {
        let mut g = Graph::new();
        let table = g.constant(t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let x = g.embedding_lookup(table, &[2, 0]).unwrap();
        assert_eq!(g.value(x).shape(), &[2, 2]);
        assert_eq!(g.value(x).data(), &[5.0, 1.0, 6.0, 2.0]);
        assert!(matches!(
            g.embedding_lookup(table, &[3]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }
}
