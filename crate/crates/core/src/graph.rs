//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the tape and returns a [`Var`] handle.
//! [`Graph::backward`] walks the tape in reverse execution order and
//! accumulates gradients additively into every tracked ancestor of the loss.

use crate::error::{invalid, Error, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        scale: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    tracked: bool,
}

/// Reduction applied by [`Graph::cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// A computation tape. Rebuilt for every forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose leaves are never tracked; used for inference.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked input (when gradients are enabled on this tape).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let tracked = self.grad_enabled;
        self.push(value, Op::Leaf, tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Gradient of the last backward pass, present iff `v` is a tracked
    /// ancestor of the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.shape()[1] != bv.shape()[1] {
            return Err(shape_err("matmul_bt", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        matmul_bt_into(av.data(), bv.data(), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(invalid(format!("transpose needs a matrix, got {:?}", av.shape())));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), tracked))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Sub(a, b), tracked))
    }

    /// Element-wise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b), tracked))
    }

    /// Scalar times tensor; the only broadcast the tape allows.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(a);
        self.push(t, Op::Scale(a, s), tracked)
    }

    /// Adds a bias vector of length `cols` to every row of a matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if !xv.is_matrix() || bv.shape() != [xv.cols()] {
            return Err(shape_err("add_row", xv, bv));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % c])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(t, Op::AddRow(x, bias), tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(t, Op::Relu(x), tracked)
    }

    /// Row-wise softmax. `mask`, when given, has one flag per entry
    /// (`true` = keep); masked entries get probability exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(Error::Shape {
                    op: "softmax_rows(mask)",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let (r, c) = (xv.rows(), xv.cols());
        if !xv.data().iter().all(|v| v.is_finite()) {
            return Err(invalid("softmax input must be finite"));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(invalid(format!("softmax row {i} has every position masked")));
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= z;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Softmax(x), tracked))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows(x, None)
    }

    /// Row-wise layer normalisation followed by a learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if d < 2 {
            return Err(invalid("layer_norm needs at least two features"));
        }
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let r = xv.rows();
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Row lookup into a `vocab × dim` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if !tv.is_matrix() {
            return Err(invalid("embedding table must be a matrix"));
        }
        if ids.is_empty() {
            return Err(invalid("cannot embed an empty sequence"));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(invalid(format!("token id {id} outside vocabulary of size {v}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let tracked = self.tracked(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if !xv.is_matrix() || start >= end || end > c {
            return Err(invalid(format!("bad column slice {start}..{end} of {:?}", xv.shape())));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv.data()[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::SliceCols { x, start }, tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let r = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if !pv.is_matrix() || pv.rows() != r {
                return Err(shape_err("concat_cols", self.value(*first), pv));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(rows)?;
        let tracked = self.tracked(x);
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Token-level cross-entropy of `logits [T×V]` against `targets`.
    ///
    /// `None` targets are padding and excluded. With smoothing `eps` the
    /// target distribution is `(1-eps)·onehot + eps/V`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
        reduction: Reduction,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (t_len, vocab) = (lv.rows(), lv.cols());
        if !lv.is_matrix() || targets.len() != t_len {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..=1.0).contains(&smoothing) {
            return Err(invalid(format!("label smoothing {smoothing} outside [0, 1]")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(invalid("every target position is padding"));
        }
        let mut probs = vec![0.0; t_len * vocab];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            if y >= vocab {
                return Err(invalid(format!("target id {y} outside vocabulary of size {vocab}")));
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            let mut row_loss = -(1.0 - smoothing) * (row[y] - log_z);
            if smoothing > 0.0 {
                let mean_logp = row.iter().map(|v| v - log_z).sum::<f64>() / vocab as f64;
                row_loss -= smoothing * mean_logp;
            }
            total += row_loss;
            for (j, v) in row.iter().enumerate() {
                probs[i * vocab + j] = (v - log_z).exp();
            }
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / count as f64,
        };
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                scale,
                probs,
            },
            tracked,
        ))
    }

    fn take_grad(&mut self, v: Var) -> Vec<f64> {
        let n = self.nodes[v.0].value.len();
        self.nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; n])
    }

    fn put_grad(&mut self, v: Var, g: Vec<f64>) {
        self.nodes[v.0].grad = Some(g);
    }

    /// Adds `contrib(buffer)` into the gradient of `v`, if tracked.
    fn accumulate(&mut self, v: Var, contrib: impl FnOnce(&Graph, &mut [f64])) {
        if !self.tracked(v) {
            return;
        }
        let mut buf = self.take_grad(v);
        contrib(self, &mut buf);
        self.put_grad(v, buf);
    }

    /// Clears gradients left by a previous backward pass.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Back-propagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if !self.tracked(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked || self.nodes[idx].grad.is_none() {
                continue;
            }
            let out_grad = self.nodes[idx].grad.take().expect("checked above");
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_op(Var(idx), &op, &out_grad);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(out_grad);
        }
        Ok(())
    }

    fn backprop_op(&mut self, out: Var, op: &Op, dy: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let (a, b) = (*a, *b);
                self.accumulate(a, |g, ga| matmul_bt_into(dy, g.value(b).data(), ga, m, n, k));
                self.accumulate(b, |g, gb| matmul_at_into(g.value(a).data(), dy, gb, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                let (a, b) = (*a, *b);
                self.accumulate(a, |g, ga| matmul_into(dy, g.value(b).data(), ga, m, n, k));
                self.accumulate(b, |g, gb| matmul_at_into(dy, g.value(a).data(), gb, m, n, k));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                self.accumulate(*a, |_, ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += dy[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |_, ga| add_into(ga, dy));
                self.accumulate(*b, |_, gb| add_into(gb, dy));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |_, ga| add_into(ga, dy));
                self.accumulate(*b, |_, gb| {
                    for (g, d) in gb.iter_mut().zip(dy) {
                        *g -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |g, ga| {
                    for ((o, d), y) in ga.iter_mut().zip(dy).zip(g.value(b).data()) {
                        *o += d * y;
                    }
                });
                self.accumulate(b, |g, gb| {
                    for ((o, d), x) in gb.iter_mut().zip(dy).zip(g.value(a).data()) {
                        *o += d * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, |_, ga| {
                    for (o, d) in ga.iter_mut().zip(dy) {
                        *o += s * d;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                self.accumulate(*x, |_, gx| add_into(gx, dy));
                self.accumulate(*bias, |_, gb| {
                    let c = gb.len();
                    for (i, d) in dy.iter().enumerate() {
                        gb[i % c] += d;
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                self.accumulate(x, |g, gx| {
                    for ((o, d), v) in gx.iter_mut().zip(dy).zip(g.value(x).data()) {
                        if *v > 0.0 {
                            *o += d;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = self.value(out).cols();
                self.accumulate(*x, |g, gx| {
                    let y = g.value(out).data();
                    for (i, (yr, dr)) in y.chunks(c).zip(dy.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*x).cols();
                let gamma_v = self.value(*gamma).data().to_vec();
                self.accumulate(*gamma, |_, gg| {
                    for (i, dv) in dy.iter().enumerate() {
                        gg[i % d] += dv * xhat[i];
                    }
                });
                self.accumulate(*beta, |_, gb| {
                    for (i, dv) in dy.iter().enumerate() {
                        gb[i % d] += dv;
                    }
                });
                self.accumulate(*x, |_, gx| {
                    for (i, &is) in inv_std.iter().enumerate() {
                        let row = i * d..(i + 1) * d;
                        let dxhat: Vec<f64> = dy[row.clone()]
                            .iter()
                            .zip(&gamma_v)
                            .map(|(a, b)| a * b)
                            .collect();
                        let xh = &xhat[row];
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += is * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                self.accumulate(*table, |_, gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = self.value(out).cols();
                let start = *start;
                self.accumulate(*x, |_, gx| {
                    for (i, dr) in dy.chunks(w).enumerate() {
                        add_into(&mut gx[i * c + start..i * c + start + w], dr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.value(out).cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(p, |_, gp| {
                        for (i, gr) in gp.chunks_mut(w).enumerate() {
                            add_into(gr, &dy[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SelectRows { x, rows } => {
                let c = self.value(*x).cols();
                self.accumulate(*x, |_, gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * c..(r + 1) * c], &dy[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Sum(x) => {
                let d0 = dy[0];
                self.accumulate(*x, |_, gx| {
                    for g in gx.iter_mut() {
                        *g += d0;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                scale,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let coef = dy[0] * scale;
                let uniform = smoothing / vocab as f64;
                self.accumulate(*logits, |_, gl| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(y) = *t else { continue };
                        for j in 0..vocab {
                            let mut q = uniform;
                            if j == y {
                                q += 1.0 - smoothing;
                            }
                            gl[i * vocab + j] += coef * (probs[i * vocab + j] - q);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, v: &[f64]) -> Var {
        g.leaf(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn grad_of_sum() {
        let mut g = Graph::new();
        let w = vec_leaf(&mut g, &[0.5, -1.0, 2.0]);
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let w = vec_leaf(&mut g, &[1.0, 2.0]);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let w = vec_leaf(&mut g, &[1.0, 2.0]);
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let p = g.mul(w, c).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
        assert!(!g.requires_grad(c));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = vec_leaf(&mut g, &[1.0, 2.0]);
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn add_refuses_broadcast() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn sharing_accumulates_additively() {
        // loss = sum(w) + sum(w) => grad 2
        let mut g = Graph::new();
        let w = vec_leaf(&mut g, &[1.0, 1.0]);
        let s1 = g.sum(w);
        let s2 = g.sum(w);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 5.0, 2.0]]).unwrap());
        let y = g.softmax_rows(x, Some(&[true, false, true])).unwrap();
        let v = g.value(y).data().to_vec();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        let all_masked = g.softmax_rows(x, Some(&[false, false, false]));
        assert!(all_masked.is_err());
    }

    #[test]
    fn no_grad_tape_tracks_nothing() {
        let mut g = Graph::no_grad();
        let w = vec_leaf(&mut g, &[1.0, 2.0]);
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[2, 4]));
        let loss = g
            .cross_entropy(logits, &[Some(1), Some(3)], 0.0, Reduction::Mean)
            .unwrap();
        assert!((g.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(g.cross_entropy(logits, &[None, None], 0.0, Reduction::Mean).is_err());
    }
}
