//! Reverse-mode autodiff tape.
//!
//! Operations append nodes in topological order; [`Tape::backward`] walks the
//! nodes once in reverse and accumulates gradients into every tensor that
//! requires them. One tape records one forward pass; a second backward on the
//! same tape is an error.

use crate::tensor::{Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a[m,k] @ b[k,n]
    Matmul(Var, Var),
    /// x[m,d] @ w[d,h] + bias[h] broadcast over rows
    Affine(Var, Var, Var),
    Relu(Var),
    /// Row-wise log softmax, max-subtracted.
    LogSoftmax(Var),
    /// Mean over rows of -log_probs[i][label_i].
    NllLoss(Var, Vec<usize>),
    /// Mean over entries of softplus(-label_i * score_i), labels in ±1.
    LogisticLoss(Var, Vec<f64>),
    /// out[i] = x[i, index_i], shape m×1.
    GatherCols(Var, Vec<usize>),
    /// out[r] = x[rows[r]], shape k×cols.
    SelectRows(Var, Vec<usize>),
    Exp(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Mean(Var),
    Sum(Var),
    /// Row-wise softmax((ln p + noise) / tau) over probability rows.
    GumbelSoftmax { probs: Var, tau: f64 },
}

struct Node {
    tensor: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Numerically stable log(1 + exp(t)).
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Logistic sigmoid, stable on both tails.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
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

    /// Record an input tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was
    /// reachable from the loss and requires grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn out(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        let tensor = Tensor::new(shape, values)?;
        tensor.check_finite(op_name)?;
        Ok(self.push(tensor, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let values = mat_mul(ta.values(), tb.values(), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        self.out("matmul", vec![m, n], values, Op::Matmul(a, b), rg)
    }

    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].tensor,
            &self.nodes[w.0].tensor,
            &self.nodes[bias.0].tensor,
        );
        let ok = tx.shape().len() == 2
            && tw.shape().len() == 2
            && tb.shape().len() == 1
            && tx.shape()[1] == tw.shape()[0]
            && tw.shape()[1] == tb.shape()[0];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                detail: format!("{:?} x {:?} + {:?}", tx.shape(), tw.shape(), tb.shape()),
            });
        }
        let (m, d, h) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        let mut values = mat_mul(tx.values(), tw.values(), m, d, h);
        for r in 0..m {
            for c in 0..h {
                values[r * h + c] += tb.values()[c];
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(bias);
        self.out("affine", vec![m, h], values, Op::Affine(x, w, bias), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].tensor;
        let values = tx.values().iter().map(|&v| v.max(0.0)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.needs(x);
        self.out("relu", shape, values, Op::Relu(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].tensor;
        if tx.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax",
                detail: format!("expected matrix, got {:?}", tx.shape()),
            });
        }
        let (m, c) = (tx.shape()[0], tx.shape()[1]);
        let mut values = vec![0.0; m * c];
        for r in 0..m {
            let row = &tx.values()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                values[r * c + j] = row[j] - max - log_norm;
            }
        }
        let rg = self.needs(x);
        self.out("log_softmax", vec![m, c], values, Op::LogSoftmax(x), rg)
    }

    pub fn nll_loss(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let t = &self.nodes[log_probs.0].tensor;
        let (m, c) = (t.shape()[0], t.shape()[1]);
        if labels.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "nll_loss",
                detail: format!("{m} rows vs {} labels", labels.len()),
            });
        }
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::LabelOutOfRange {
                    label,
                    classes: c,
                    row,
                });
            }
            total -= t.values()[row * c + label];
        }
        let rg = self.needs(log_probs);
        self.out(
            "nll_loss",
            vec![],
            vec![total / m as f64],
            Op::NllLoss(log_probs, labels.to_vec()),
            rg,
        )
    }

    pub fn logistic_loss(&mut self, scores: Var, labels: &[f64]) -> Result<Var, TensorError> {
        let t = &self.nodes[scores.0].tensor;
        if labels.len() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "logistic_loss",
                detail: format!("{} scores vs {} labels", t.len(), labels.len()),
            });
        }
        let m = t.len() as f64;
        let total: f64 = t
            .values()
            .iter()
            .zip(labels)
            .map(|(&s, &y)| softplus(-y * s))
            .sum();
        let rg = self.needs(scores);
        self.out(
            "logistic_loss",
            vec![],
            vec![total / m],
            Op::LogisticLoss(scores, labels.to_vec()),
            rg,
        )
    }

    /// Per-row column lookup: `out[i] = x[i, indices[i]]`, shape m×1.
    pub fn gather_cols(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].tensor;
        let (m, c) = (t.shape()[0], t.shape()[1]);
        if indices.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "gather_cols",
                detail: format!("{m} rows vs {} indices", indices.len()),
            });
        }
        let mut values = Vec::with_capacity(m);
        for (row, &idx) in indices.iter().enumerate() {
            if idx >= c {
                return Err(TensorError::LabelOutOfRange {
                    label: idx,
                    classes: c,
                    row,
                });
            }
            values.push(t.values()[row * c + idx]);
        }
        let rg = self.needs(x);
        self.out(
            "gather_cols",
            vec![m, 1],
            values,
            Op::GatherCols(x, indices.to_vec()),
            rg,
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].tensor;
        let (m, c) = (t.shape()[0], t.shape()[1]);
        let mut values = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= m {
                return Err(TensorError::RowOutOfRange { index: r, rows: m });
            }
            values.extend_from_slice(&t.values()[r * c..(r + 1) * c]);
        }
        let rg = self.needs(x);
        self.out(
            "select_rows",
            vec![rows.len(), c],
            values,
            Op::SelectRows(x, rows.to_vec()),
            rg,
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].tensor;
        let values = t.values().iter().map(|v| v.exp()).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs(x);
        self.out("exp", shape, values, Op::Exp(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        self.out("add", shape, values, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].tensor;
        let values = t.values().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs(x);
        self.out("scale", shape, values, Op::Scale(x, factor), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].tensor;
        let n = t.len().max(1) as f64;
        let total: f64 = t.values().iter().sum();
        let rg = self.needs(x);
        self.out("mean", vec![], vec![total / n], Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].tensor;
        let total: f64 = t.values().iter().sum();
        let rg = self.needs(x);
        self.out("sum", vec![], vec![total], Op::Sum(x), rg)
    }

    /// Differentiable categorical relaxation: `softmax((ln p + noise) / tau)`
    /// row-wise. `probs` rows must be probability vectors; `noise` supplies
    /// one pre-drawn Gumbel(0,1) point per entry so the draw is a constant of
    /// the graph.
    pub fn gumbel_softmax(
        &mut self,
        probs: Var,
        noise: &[f64],
        tau: f64,
    ) -> Result<Var, TensorError> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(TensorError::BadTemperature(tau));
        }
        let t = &self.nodes[probs.0].tensor;
        if t.shape().len() != 2 || noise.len() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gumbel_softmax",
                detail: format!("probs {:?}, noise len {}", t.shape(), noise.len()),
            });
        }
        let (m, g) = (t.shape()[0], t.shape()[1]);
        let mut values = vec![0.0; m * g];
        for r in 0..m {
            let row = &t.values()[r * g..(r + 1) * g];
            let z: Vec<f64> = row
                .iter()
                .zip(&noise[r * g..(r + 1) * g])
                .map(|(&p, &gum)| (p.ln() + gum) / tau)
                .collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..g {
                let e = (z[j] - max).exp();
                values[r * g + j] = e;
                denom += e;
            }
            for j in 0..g {
                values[r * g + j] /= denom;
            }
        }
        let rg = self.needs(probs);
        self.out(
            "gumbel_softmax",
            vec![m, g],
            values,
            Op::GumbelSoftmax { probs, tau },
            rg,
        )
    }

    /// Populate gradients of every requires-grad ancestor of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(TensorError::NonScalarLoss(
                self.nodes[loss.0].tensor.shape().to_vec(),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g_out) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g_out, &mut grads);
            self.nodes[id].tensor.set_grad(g_out);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = G @ B^T
                    let ga = acc(grads, *a, m * k);
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g_out[r * n + j] * tb.values()[c * n + j];
                            }
                            ga[r * k + c] += s;
                        }
                    }
                }
                if self.needs(*b) {
                    // dB = A^T @ G
                    let gb = acc(grads, *b, k * n);
                    for r in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ta.values()[i * k + r] * g_out[i * n + j];
                            }
                            gb[r * n + j] += s;
                        }
                    }
                }
            }
            Op::Affine(x, w, bias) => {
                let (tx, tw) = (&self.nodes[x.0].tensor, &self.nodes[w.0].tensor);
                let (m, d, h) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                if self.needs(*x) {
                    let gx = acc(grads, *x, m * d);
                    for r in 0..m {
                        for c in 0..d {
                            let mut s = 0.0;
                            for j in 0..h {
                                s += g_out[r * h + j] * tw.values()[c * h + j];
                            }
                            gx[r * d + c] += s;
                        }
                    }
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, d * h);
                    for r in 0..d {
                        for j in 0..h {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += tx.values()[i * d + r] * g_out[i * h + j];
                            }
                            gw[r * h + j] += s;
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = acc(grads, *bias, h);
                    for r in 0..m {
                        for j in 0..h {
                            gb[j] += g_out[r * h + j];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let tx = &self.nodes[x.0].tensor;
                    let gx = acc(grads, *x, tx.len());
                    for (i, &v) in tx.values().iter().enumerate() {
                        if v > 0.0 {
                            gx[i] += g_out[i];
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if self.needs(*x) {
                    let ty = &self.nodes[id].tensor;
                    let (m, c) = (ty.shape()[0], ty.shape()[1]);
                    let gx = acc(grads, *x, m * c);
                    for r in 0..m {
                        let g_row = &g_out[r * c..(r + 1) * c];
                        let row_sum: f64 = g_row.iter().sum();
                        for j in 0..c {
                            let p = ty.values()[r * c + j].exp();
                            gx[r * c + j] += g_row[j] - p * row_sum;
                        }
                    }
                }
            }
            Op::NllLoss(x, labels) => {
                if self.needs(*x) {
                    let t = &self.nodes[x.0].tensor;
                    let (m, c) = (t.shape()[0], t.shape()[1]);
                    let gx = acc(grads, *x, m * c);
                    let g = g_out[0] / m as f64;
                    for (row, &label) in labels.iter().enumerate() {
                        gx[row * c + label] -= g;
                    }
                }
            }
            Op::LogisticLoss(scores, labels) => {
                if self.needs(*scores) {
                    let t = &self.nodes[scores.0].tensor;
                    let gx = acc(grads, *scores, t.len());
                    let g = g_out[0] / t.len() as f64;
                    for (i, (&s, &y)) in t.values().iter().zip(labels).enumerate() {
                        gx[i] += g * (-y) * sigmoid(-y * s);
                    }
                }
            }
            Op::GatherCols(x, indices) => {
                if self.needs(*x) {
                    let t = &self.nodes[x.0].tensor;
                    let c = t.shape()[1];
                    let gx = acc(grads, *x, t.len());
                    for (row, &idx) in indices.iter().enumerate() {
                        gx[row * c + idx] += g_out[row];
                    }
                }
            }
            Op::SelectRows(x, rows) => {
                if self.needs(*x) {
                    let t = &self.nodes[x.0].tensor;
                    let c = t.shape()[1];
                    let gx = acc(grads, *x, t.len());
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += g_out[r * c + j];
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    let ty = &self.nodes[id].tensor;
                    let gx = acc(grads, *x, ty.len());
                    for (i, &y) in ty.values().iter().enumerate() {
                        gx[i] += g_out[i] * y;
                    }
                }
            }
            Op::Add(a, b) => {
                let len = self.nodes[id].tensor.len();
                if self.needs(*a) {
                    let ga = acc(grads, *a, len);
                    for i in 0..len {
                        ga[i] += g_out[i];
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, len);
                    for i in 0..len {
                        gb[i] += g_out[i];
                    }
                }
            }
            Op::Scale(x, factor) => {
                if self.needs(*x) {
                    let len = self.nodes[id].tensor.len();
                    let gx = acc(grads, *x, len);
                    for i in 0..len {
                        gx[i] += g_out[i] * factor;
                    }
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let len = self.nodes[x.0].tensor.len();
                    let g = g_out[0] / len.max(1) as f64;
                    let gx = acc(grads, *x, len);
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let len = self.nodes[x.0].tensor.len();
                    let gx = acc(grads, *x, len);
                    for v in gx.iter_mut() {
                        *v += g_out[0];
                    }
                }
            }
            Op::GumbelSoftmax { probs, tau } => {
                if self.needs(*probs) {
                    let tp = &self.nodes[probs.0].tensor;
                    let ty = &self.nodes[id].tensor;
                    let (m, g) = (ty.shape()[0], ty.shape()[1]);
                    let gx = acc(grads, *probs, m * g);
                    for r in 0..m {
                        let y_row = &ty.values()[r * g..(r + 1) * g];
                        let g_row = &g_out[r * g..(r + 1) * g];
                        let weighted: f64 = y_row.iter().zip(g_row).map(|(y, go)| y * go).sum();
                        for j in 0..g {
                            let y = y_row[j];
                            if y == 0.0 {
                                continue;
                            }
                            let p = tp.values()[r * g + j];
                            gx[r * g + j] += y * (g_row[j] - weighted) / (tau * p);
                        }
                    }
                }
            }
        }
    }
}

fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            let o_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
    out
}
