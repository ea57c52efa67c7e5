//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a row-major matrix (`[rows, cols]`; scalars are
//! `[1, 1]`). Operations append nodes in forward-creation order and `backward`
//! sweeps the tape strictly in reverse, accumulating gradient contributions
//! into every node that requires them. Multiple uses of a tensor sum their
//! gradients.

mod cells;
mod check;

pub use cells::{gru_step, lstm_step, GruParams, LstmParams, LstmState};
pub use check::{finite_difference_check, finite_difference_check_multi, rel_err};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: [usize; 2],
    },
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op}: mask length {mask_len} does not match dimension {dim}")]
    MaskMismatch {
        op: &'static str,
        mask_len: usize,
        dim: usize,
    },
    #[error("backward root must be a scalar, got shape {got:?}")]
    NonScalarRoot { got: [usize; 2] },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// `[m,n] + [1,n]`, the row added to every row of the left operand.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
        len: usize,
    },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    // masks act only at forward time; backward reads the saved output
    RowSoftmax { x: usize },
    Embed {
        table: usize,
        ids: Vec<u32>,
        pad: u32,
    },
    NllSoftmax {
        logits: usize,
        targets: Vec<u32>,
    },
    Mse(usize, usize),
    SumAll(usize),
}

impl Op {
    fn inputs(&self, out: &mut Vec<usize>) {
        out.clear();
        match self {
            Op::Leaf => {}
            Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::ConcatCols(a, b)
            | Op::Mse(a, b) => {
                out.push(*a);
                out.push(*b);
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SliceCols { x: a, .. }
            | Op::SliceRows { x: a, .. }
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::RowSoftmax { x: a, .. }
            | Op::SumAll(a) => out.push(*a),
            Op::ConcatRows(xs) => out.extend_from_slice(xs),
            Op::Embed { table, .. } => out.push(*table),
            Op::NllSoftmax { logits, .. } => out.push(*logits),
        }
    }
}

struct Node {
    shape: [usize; 2],
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
    label: Option<String>,
}

/// Forward tape. One tape is owned by one logical task; leaves may be
/// re-inserted from shared read-only storage each step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all nodes, keeping allocations where possible.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: [usize; 2], values: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape[0] * shape[1], values.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
            label: None,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, shape: [usize; 2], values: Vec<f64>, requires_grad: bool) -> TensorId {
        self.push(shape, values, requires_grad, Op::Leaf)
    }

    pub fn leaf_labeled(
        &mut self,
        shape: [usize; 2],
        values: Vec<f64>,
        requires_grad: bool,
        label: &str,
    ) -> TensorId {
        let id = self.push(shape, values, requires_grad, Op::Leaf);
        self.nodes[id.0].label = Some(label.to_string());
        id
    }

    pub fn constant(&mut self, shape: [usize; 2], values: Vec<f64>) -> TensorId {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant([1, 1], vec![v])
    }

    pub fn shape(&self, id: TensorId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.needs(id)
    }

    pub fn label(&self, id: TensorId) -> Option<&str> {
        self.nodes[id.0].label.as_deref()
    }

    /// Gradient of the last `backward` root with respect to `id`, if any
    /// was accumulated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// All transitive inputs of `id`, including `id` itself.
    pub fn ancestors(&self, id: TensorId) -> Vec<TensorId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![id.0];
        let mut out = Vec::new();
        let mut inputs = Vec::new();
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            out.push(TensorId(i));
            self.nodes[i].op.inputs(&mut inputs);
            stack.extend_from_slice(&inputs);
        }
        out
    }

    // ── element-wise and shape ops ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let values = zip_map(self.values(a), self.values(b), |x, y| x + y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(sa, values, rg, Op::Add(a.0, b.0)))
    }

    /// Add a `[1,n]` row to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let n = sa[1];
        let rv = self.values(row);
        let mut values = self.values(a).to_vec();
        for chunk in values.chunks_mut(n) {
            for (c, r) in chunk.iter_mut().zip(rv) {
                *c += r;
            }
        }
        let rg = self.needs(a) || self.needs(row);
        Ok(self.push(sa, values, rg, Op::AddRow(a.0, row.0)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                left: sa,
                right: sb,
            });
        }
        let values = zip_map(self.values(a), self.values(b), |x, y| x - y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(sa, values, rg, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: sa,
                right: sb,
            });
        }
        let values = zip_map(self.values(a), self.values(b), |x, y| x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(sa, values, rg, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let sa = self.shape(a);
        let values = self.values(a).iter().map(|x| x * c).collect();
        let rg = self.needs(a);
        self.push(sa, values, rg, Op::Scale(a.0, c))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut values = vec![0.0; m * n];
        matmul_into(&mut values, self.values(a), self.values(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push([m, n], values, rg, Op::Matmul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let [m, n] = self.shape(a);
        let av = self.values(a);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.needs(a);
        self.push([n, m], values, rg, Op::Transpose(a.0))
    }

    /// Concatenate along the last axis: `[m,p] ++ [m,q] -> [m,p+q]`.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: sa,
                right: sb,
            });
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.values(a), self.values(b));
        let mut values = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            values.extend_from_slice(&av[i * p..(i + 1) * p]);
            values.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push([m, p + q], values, rg, Op::ConcatCols(a.0, b.0)))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let n = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp[1] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: sp,
                });
            }
            rows += sp[0];
        }
        let mut values = Vec::with_capacity(rows * n);
        for &p in parts {
            values.extend_from_slice(self.values(p));
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push([rows, n], values, rg, Op::ConcatRows(ids)))
    }

    /// Columns `start..start+len` of every row.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let [m, n] = self.shape(x);
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                limit: n,
            });
        }
        let xv = self.values(x);
        let mut values = Vec::with_capacity(m * len);
        for i in 0..m {
            values.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.needs(x);
        Ok(self.push([m, len], values, rg, Op::SliceCols { x: x.0, start, len }))
    }

    /// Rows `start..start+len`.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let [m, n] = self.shape(x);
        if start + len > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                limit: m,
            });
        }
        let values = self.values(x)[start * n..(start + len) * n].to_vec();
        let rg = self.needs(x);
        Ok(self.push([len, n], values, rg, Op::SliceRows { x: x.0, start, len }))
    }

    /// Row `t` as a `[1,n]` tensor.
    pub fn row(&mut self, x: TensorId, t: usize) -> Result<TensorId> {
        self.slice_rows(x, t, 1)
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a);
        let values = self.values(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let rg = self.needs(a);
        self.push(sa, values, rg, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a);
        let values = self.values(a).iter().map(|x| x.tanh()).collect();
        let rg = self.needs(a);
        self.push(sa, values, rg, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a);
        let values = self.values(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.needs(a);
        self.push(sa, values, rg, Op::Relu(a.0))
    }

    // ── softmax and losses ──────────────────────────────────────────────

    pub fn row_softmax(&mut self, x: TensorId) -> TensorId {
        self.row_softmax_masked(x, None, None)
            .expect("unmasked softmax cannot fail")
    }

    /// Row-wise softmax with per-row max subtraction. Masked columns get
    /// probability 0 and masked rows come out all-zero.
    pub fn row_softmax_masked(
        &mut self,
        x: TensorId,
        row_mask: Option<&[bool]>,
        col_mask: Option<&[bool]>,
    ) -> Result<TensorId> {
        let [m, n] = self.shape(x);
        if let Some(rm) = row_mask {
            if rm.len() != m {
                return Err(TensorError::MaskMismatch {
                    op: "row_softmax",
                    mask_len: rm.len(),
                    dim: m,
                });
            }
        }
        if let Some(cm) = col_mask {
            if cm.len() != n {
                return Err(TensorError::MaskMismatch {
                    op: "row_softmax",
                    mask_len: cm.len(),
                    dim: n,
                });
            }
        }
        let xv = self.values(x);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            if row_mask.map(|rm| !rm[i]).unwrap_or(false) {
                continue;
            }
            let row = &xv[i * n..(i + 1) * n];
            softmax_row_into(&mut values[i * n..(i + 1) * n], row, col_mask);
        }
        let rg = self.needs(x);
        Ok(self.push([m, n], values, rg, Op::RowSoftmax { x: x.0 }))
    }

    /// Embedding lookup. `pad` ids embed to the zero row and receive no
    /// gradient; any other id must be a valid row of `table`.
    pub fn embed(&mut self, table: TensorId, ids: &[u32], pad: u32) -> Result<TensorId> {
        let [v, e] = self.shape(table);
        for &id in ids {
            if id != pad && id as usize >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed",
                    index: id as usize,
                    limit: v,
                });
            }
        }
        let tv = self.values(table);
        let mut values = vec![0.0; ids.len() * e];
        for (pos, &id) in ids.iter().enumerate() {
            if id != pad {
                let r = id as usize;
                values[pos * e..(pos + 1) * e].copy_from_slice(&tv[r * e..(r + 1) * e]);
            }
        }
        let rg = self.needs(table);
        Ok(self.push(
            [ids.len(), e],
            values,
            rg,
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
                pad,
            },
        ))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[T,V]`), one target per row.
    pub fn nll_softmax(&mut self, logits: TensorId, targets: &[u32]) -> Result<TensorId> {
        let [t, v] = self.shape(logits);
        if targets.len() != t {
            return Err(TensorError::BadShape {
                op: "nll_softmax",
                expected: "one target per logit row",
                got: [targets.len(), 1],
            });
        }
        for &y in targets {
            if y as usize >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll_softmax",
                    index: y as usize,
                    limit: v,
                });
            }
        }
        let lv = self.values(logits);
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y as usize];
        }
        let rg = self.needs(logits);
        Ok(self.push(
            [1, 1],
            vec![total],
            rg,
            Op::NllSoftmax {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean squared element-wise difference.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                left: sa,
                right: sb,
            });
        }
        let n = (sa[0] * sa[1]) as f64;
        let total: f64 = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push([1, 1], vec![total / n], rg, Op::Mse(a.0, b.0)))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.values(a).iter().sum();
        let rg = self.needs(a);
        self.push([1, 1], vec![total], rg, Op::SumAll(a.0))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Existing gradients are cleared.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        let rs = self.shape(root);
        if rs != [1, 1] {
            return Err(TensorError::NonScalarRoot { got: rs });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.needs(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, target: usize, contribution: &[f64]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let buf = self.grads[target]
            .get_or_insert_with(|| vec![0.0; self.nodes[target].values.len()]);
        for (d, c) in buf.iter_mut().zip(contribution) {
            *d += c;
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::AddRow(a, r) => {
                self.accum(a, g);
                let n = self.nodes[r].values.len();
                let mut rg = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (d, c) in rg.iter_mut().zip(chunk) {
                        *d += c;
                    }
                }
                self.accum(r, &rg);
            }
            Op::Sub(a, b) => {
                self.accum(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let da = zip_map(g, &self.nodes[b].values, |x, y| x * y);
                    self.accum(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let db = zip_map(g, &self.nodes[a].values, |x, y| x * y);
                    self.accum(b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accum(a, &da);
            }
            Op::Matmul(a, b) => {
                let [m, k] = self.nodes[a].shape;
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    // dA = g · B^T
                    let bv = &self.nodes[b].values;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accum(a, &da);
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T · g
                    let av = self.nodes[a].values.clone();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, gg) in drow.iter_mut().zip(grow) {
                                *d += aip * gg;
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::Transpose(a) => {
                let [m, n] = self.nodes[a].shape;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.accum(a, &da);
            }
            Op::ConcatCols(a, b) => {
                let [m, p] = self.nodes[a].shape;
                let q = self.nodes[b].shape[1];
                let mut da = vec![0.0; m * p];
                let mut db = vec![0.0; m * q];
                for i in 0..m {
                    da[i * p..(i + 1) * p].copy_from_slice(&g[i * (p + q)..i * (p + q) + p]);
                    db[i * q..(i + 1) * q]
                        .copy_from_slice(&g[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p].values.len();
                    let slice = g[offset..offset + len].to_vec();
                    self.accum(p, &slice);
                    offset += len;
                }
            }
            Op::SliceCols { x, start, len } => {
                let [m, n] = self.nodes[x].shape;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accum(x, &dx);
            }
            Op::SliceRows { x, start, len } => {
                let [m, n] = self.nodes[x].shape;
                let mut dx = vec![0.0; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(&g[..len * n]);
                self.accum(x, &dx);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].values;
                let da = zip_map(g, y, |gg, yy| gg * yy * (1.0 - yy));
                self.accum(a, &da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].values;
                let da = zip_map(g, y, |gg, yy| gg * (1.0 - yy * yy));
                self.accum(a, &da);
            }
            Op::Relu(a) => {
                let y = &self.nodes[i].values;
                let da = zip_map(g, y, |gg, yy| if yy > 0.0 { gg } else { 0.0 });
                self.accum(a, &da);
            }
            Op::RowSoftmax { x } => {
                let y = &self.nodes[i].values;
                let [m, n] = self.nodes[x].shape;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(x, &dx);
            }
            Op::Embed { table, ids, pad } => {
                let [v, e] = self.nodes[table].shape;
                let mut dt = vec![0.0; v * e];
                for (pos, &id) in ids.iter().enumerate() {
                    if id == pad {
                        continue;
                    }
                    let r = id as usize;
                    for j in 0..e {
                        dt[r * e + j] += g[pos * e + j];
                    }
                }
                self.accum(table, &dt);
            }
            Op::NllSoftmax { logits, targets } => {
                let [t, v] = self.nodes[logits].shape;
                let lv = self.nodes[logits].values.clone();
                let mut dl = vec![0.0; t * v];
                let up = g[0];
                for (r, &y) in targets.iter().enumerate() {
                    let row = &lv[r * v..(r + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..v {
                        let p = (row[j] - max).exp() / sum;
                        dl[r * v + j] = up * (p - if j == y as usize { 1.0 } else { 0.0 });
                    }
                }
                self.accum(logits, &dl);
            }
            Op::Mse(a, b) => {
                let n = self.nodes[a].values.len() as f64;
                let up = g[0];
                if self.nodes[a].requires_grad {
                    let da = zip_map(&self.nodes[a].values, &self.nodes[b].values, |x, y| {
                        up * 2.0 * (x - y) / n
                    });
                    self.accum(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let db = zip_map(&self.nodes[a].values, &self.nodes[b].values, |x, y| {
                        up * 2.0 * (y - x) / n
                    });
                    self.accum(b, &db);
                }
            }
            Op::SumAll(a) => {
                let up = g[0];
                let da = vec![up; self.nodes[a].values.len()];
                self.accum(a, &da);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bpj) in crow.iter_mut().zip(brow) {
                *cj += aip * bpj;
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row_into(out: &mut [f64], row: &[f64], col_mask: Option<&[bool]>) {
    let valid = |j: usize| col_mask.map(|cm| cm[j]).unwrap_or(true);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if valid(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        // fully masked row
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, &x) in row.iter().enumerate() {
        if valid(j) {
            let e = (x - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant([2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let p = t.matmul(i2, i2).unwrap();
        assert_eq!(t.values(p), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = Tape::new();
        let a = t.constant([2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t.constant([2, 1], vec![1.0, 1.0]);
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.values(p), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant([2, 3], vec![0.0; 6]);
        let b = t.constant([2, 2], vec![0.0; 4]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        // f = sum(a·b); da = column-sums of b broadcast over rows
        let b_vals = vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75];
        let x0 = vec![0.3, -0.2, 0.9, 1.4, -2.0, 0.1];
        let err = finite_difference_check(&x0, [2, 3], 1e-4, |t, a| {
            let b = t.constant([3, 2], b_vals.clone());
            let p = t.matmul(a, b)?;
            Ok(t.sum_all(p))
        })
        .unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn softmax_symmetry_and_hand_case() {
        let mut t = Tape::new();
        let x = t.constant([1, 2], vec![0.0, 0.0]);
        let y = t.row_softmax(x);
        assert_eq!(t.values(y), &[0.5, 0.5]);

        let x = t.constant([1, 2], vec![1.0f64.ln(), 3.0f64.ln()]);
        let y = t.row_softmax(x);
        assert!(close(t.values(y)[0], 0.25, 1e-12));
        assert!(close(t.values(y)[1], 0.75, 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant([3, 4], (0..12).map(|i| (i as f64) * 0.7 - 3.0).collect());
        let y = t.row_softmax(x);
        for row in t.values(y).chunks(4) {
            assert!(close(row.iter().sum::<f64>(), 1.0, 1e-9));
        }
    }

    #[test]
    fn softmax_grad_of_sum_is_zero() {
        // each row sums to the constant 1, so the gradient vanishes
        let x0 = vec![0.2, -1.3, 0.7, 2.2, 0.0, -0.5];
        let mut tape = Tape::new();
        let x = tape.leaf([2, 3], x0.clone(), true);
        let y = tape.row_softmax(x);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        for &g in tape.grad(x).unwrap() {
            assert!(g.abs() < 1e-12, "grad {g}");
        }
        // and the numeric check agrees within absolute 1e-7
        let mut t2 = Tape::new();
        let x2 = t2.leaf([2, 3], x0.clone(), true);
        let y2 = t2.row_softmax(x2);
        let _ = t2.sum_all(y2);
        for i in 0..x0.len() {
            let f = |v: f64| {
                let mut tp = Tape::new();
                let mut xs = x0.clone();
                xs[i] = v;
                let x = tp.leaf([2, 3], xs, false);
                let y = tp.row_softmax(x);
                let s = tp.sum_all(y);
                tp.value_scalar(s)
            };
            let num = (f(x0[i] + 1e-4) - f(x0[i] - 1e-4)) / 2e-4;
            assert!(num.abs() < 1e-7);
        }
    }

    #[test]
    fn masked_softmax_ignores_masked_columns_and_rows() {
        let mut t = Tape::new();
        let x = t.constant([2, 3], vec![5.0, 1.0, 100.0, 2.0, 2.0, -50.0]);
        let y = t
            .row_softmax_masked(x, Some(&[true, false]), Some(&[true, true, false]))
            .unwrap();
        let v = t.values(y);
        // row 0: softmax over first two entries only
        let d = (5.0f64 - 1.0).exp();
        assert!(close(v[0], d / (d + 1.0), 1e-12));
        assert!(close(v[1], 1.0 / (d + 1.0), 1e-12));
        assert_eq!(v[2], 0.0);
        // row 1 masked out entirely
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn elementwise_hand_cases() {
        let mut t = Tape::new();
        let x = t.constant([1, 2], vec![1.0, 2.0]);
        let ones = t.constant([1, 2], vec![1.0, 1.0]);
        let y = t.mul(x, ones).unwrap();
        assert_eq!(t.values(y), t.values(x));

        let a = t.constant([1, 2], vec![1.0, 2.0]);
        let b = t.constant([1, 2], vec![3.0, 4.0]);
        let m = t.mul(a, b).unwrap();
        assert_eq!(t.values(m), &[3.0, 8.0]);

        let p = t.constant([1, 1], vec![1.0]);
        let q = t.constant([1, 1], vec![2.0]);
        let c = t.concat_cols(p, q).unwrap();
        assert_eq!(t.values(c), &[1.0, 2.0]);
        assert_eq!(t.shape(c), [1, 2]);
    }

    #[test]
    fn nonlinear_hand_cases() {
        let mut t = Tape::new();
        let x = t.constant([1, 1], vec![0.0]);
        let s = t.sigmoid(x);
        assert_eq!(t.value_scalar(s), 0.5);

        let x = t.constant([1, 2], vec![-3.0, 3.0]);
        let r = t.relu(x);
        assert_eq!(t.values(r), &[0.0, 3.0]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let err = finite_difference_check(&[0.0], [1, 1], 1e-4, |t, x| {
            let y = t.tanh(x);
            Ok(t.sum_all(y))
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn losses_hand_cases() {
        let mut t = Tape::new();
        // uniform logits over V classes -> ln V per token
        let v = 7;
        let logits = t.constant([2, v], vec![0.3; 2 * v]);
        let nll = t.nll_softmax(logits, &[1, 5]).unwrap();
        assert!(close(t.value_scalar(nll), 2.0 * (v as f64).ln(), 1e-12));

        let a = t.constant([1, 2], vec![1.0, 2.0]);
        let m0 = t.mse(a, a).unwrap();
        assert_eq!(t.value_scalar(m0), 0.0);

        let b = t.constant([1, 2], vec![3.0, 2.0]);
        let m = t.mse(a, b).unwrap();
        assert_eq!(t.value_scalar(m), 2.0);
    }

    #[test]
    fn nll_target_out_of_range() {
        let mut t = Tape::new();
        let logits = t.constant([1, 3], vec![0.0; 3]);
        assert!(matches!(
            t.nll_softmax(logits, &[3]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn embed_pad_is_zero_and_skipped_in_grad() {
        let mut t = Tape::new();
        let table = t.leaf([3, 2], vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0], true);
        let e = t.embed(table, &[0, 2, 1], 0).unwrap();
        assert_eq!(t.values(e), &[0.0, 0.0, 3.0, 4.0, 1.0, 2.0]);
        let s = t.sum_all(e);
        t.backward(s).unwrap();
        let g = t.grad(table).unwrap();
        assert_eq!(g, &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn embed_out_of_range() {
        let mut t = Tape::new();
        let table = t.constant([3, 2], vec![0.0; 6]);
        assert!(matches!(
            t.embed(table, &[5], 0),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn shared_subexpression_gradients_accumulate() {
        // f(x) = sum(x · x^T): both uses of x must contribute
        let x0 = vec![0.4, -1.1, 2.0, 0.3, 0.9, -0.6];
        let err = finite_difference_check(&x0, [2, 3], 1e-4, |t, x| {
            let xt = t.transpose(x);
            let p = t.matmul(x, xt)?;
            Ok(t.sum_all(p))
        })
        .unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn sum_grad_is_all_ones() {
        let x0 = vec![1.0, -2.0, 0.5];
        let mut tape = Tape::new();
        let x = tape.leaf([1, 3], x0, true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.constant([2, 2], vec![0.1, 0.2, 0.3, 0.4]);
            let y = t.sigmoid(x);
            let z = t.matmul(y, x).unwrap();
            let s = t.row_softmax(z);
            t.values(s).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ancestors_walks_the_dag() {
        let mut t = Tape::new();
        let a = t.leaf_labeled([1, 1], vec![1.0], true, "a");
        let b = t.leaf_labeled([1, 1], vec![2.0], false, "b");
        let c = t.mul(a, b).unwrap();
        let d = t.leaf_labeled([1, 1], vec![3.0], false, "d");
        let e = t.add(c, d).unwrap();
        let anc = t.ancestors(e);
        assert!(anc.contains(&a) && anc.contains(&b) && anc.contains(&d));
        let anc_c = t.ancestors(c);
        assert!(!anc_c.contains(&d));
        assert_eq!(t.label(a), Some("a"));
    }
}
