use super::kernels;
use super::{shape_err, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of one backward rule. Used only to prove that the
/// gradient checker catches a wrong derivative.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the GELU derivative by 1.5.
    GeluDerivative,
    /// Drops the gain gradient of every RMS norm.
    RmsNormGain,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        n_heads: usize,
        base: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A node requires a gradient iff it is a leaf registered with
/// `requires_grad` or any of its inputs requires one. Frozen leaves never
/// receive gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is
    /// frozen or does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.value(v).matrix_dims(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds vector `b` to every last-dimension row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.ndim() != 1 || tb.numel() != ta.cols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % cols])
            .collect();
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, kernels::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.map(a, kernels::silu);
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, TensorError> {
        kernels::check_rms_norm(self.value(x), self.value(gain), eps)?;
        let tx = self.value(x);
        let (data, inv_rms) = kernels::rms_norm(tx.data(), self.value(gain).data(), tx.cols(), eps);
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Softmax over each row of a matrix; `causal` zeroes entries above the
    /// diagonal.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var, TensorError> {
        let (r, c) = self.dims(x, "softmax_rows")?;
        let data = kernels::softmax_rows(self.value(x).data(), r, c, causal);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::Softmax { x }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::matrix(c, r, data)?, Op::Transpose(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(x, "slice_cols")?;
        if start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let (r, _) = self.dims(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("row count {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let (_, c) = self.dims(*first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", format!("width {pc} vs {c}")));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims(table, "gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    bound: r,
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let out = Tensor::matrix(ids.len(), c, data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rotary embedding of a `[seq × hidden]` matrix, heads laid out as
    /// contiguous column blocks; position `p` is row `p`.
    pub fn rope(&mut self, x: Var, n_heads: usize, base: f64) -> Result<Var, TensorError> {
        let (seq, hidden) = self.dims(x, "rope")?;
        if n_heads == 0 || hidden % n_heads != 0 || !(hidden / n_heads).is_multiple_of(2) {
            return Err(shape_err(
                "rope",
                format!("hidden {hidden} with {n_heads} heads needs an even head size"),
            ));
        }
        let data = kernels::rope(self.value(x).data(), seq, hidden, n_heads, base, 1.0);
        Ok(self.push(Tensor::matrix(seq, hidden, data)?, Op::Rope { x, n_heads, base }, &[x]))
    }

    /// Mean cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let (r, v) = self.dims(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: "no target positions".into(),
            });
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), r, v, false);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(TensorError::Index {
                        op: "cross_entropy",
                        index: t,
                        bound: v,
                    });
                }
                // log-sum-exp form keeps tiny probabilities finite
                let row = self.value(logits).row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for &z in row {
                    s += (z - max).exp();
                }
                total += max + s.ln() - row[t];
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(total / count as f64), op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = 0.0;
        for &v in self.value(x).data() {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.data.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor {
                    shape: self.nodes[v.0].value.shape().to_vec(),
                    data: delta,
                });
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, kernels::matmul_nt(gd, tb.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(ta.data(), gd, m, k, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.requires_grad(*b) {
                    let cols = self.value(*b).numel();
                    let mut gb = vec![0.0; cols];
                    for (i, &v) in gd.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, d);
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|x| x * c).collect());
            }
            Op::Gelu(a) => {
                let slope = match self.fault {
                    Some(BackwardFault::GeluDerivative) => 1.5,
                    _ => 1.0,
                };
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| gv * kernels::gelu_grad(x) * slope)
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| gv * kernels::silu_grad(x))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                self.rms_norm_backward(*x, *gain, inv_rms, gd, grads);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let mut dot = 0.0;
                    for (a, b) in yr.iter().zip(gr) {
                        dot += a * b;
                    }
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                if self.requires_grad(*x) {
                    let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    let len = node.value.shape()[1];
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows { table, ids } => {
                if self.requires_grad(*table) {
                    let t = self.value(*table);
                    let c = t.cols();
                    let mut d = vec![0.0; t.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            d[id * c + j] += gd[i * c + j];
                        }
                    }
                    self.accumulate(grads, *table, d);
                }
            }
            Op::Rope { x, n_heads, base } => {
                let (seq, hidden) = (node.value.shape()[0], node.value.shape()[1]);
                let d = kernels::rope(gd, seq, hidden, *n_heads, *base, -1.0);
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let upstream = gd[0] / *count as f64;
                let v = self.value(*logits).cols();
                let mut d = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[i * v + j] = (probs[i * v + j] - onehot) * upstream;
                        }
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
        }
    }

    fn rms_norm_backward(&self, x: Var, gain: Var, inv_rms: &[f64], gd: &[f64], grads: &mut [Option<Tensor>]) {
        let tx = self.value(x);
        let tg = self.value(gain).data();
        let cols = tx.cols();
        let xd = tx.data();
        if self.requires_grad(x) {
            let mut d = vec![0.0; xd.len()];
            for (r, &ir) in inv_rms.iter().enumerate() {
                let xr = &xd[r * cols..(r + 1) * cols];
                let gr = &gd[r * cols..(r + 1) * cols];
                let mut dot = 0.0;
                for j in 0..cols {
                    dot += tg[j] * gr[j] * xr[j];
                }
                let coef = ir * ir * ir * dot / cols as f64;
                for j in 0..cols {
                    d[r * cols + j] = ir * tg[j] * gr[j] - coef * xr[j];
                }
            }
            self.accumulate(grads, x, d);
        }
        if self.requires_grad(gain) && self.fault != Some(BackwardFault::RmsNormGain) {
            let mut d = vec![0.0; cols];
            for (r, &ir) in inv_rms.iter().enumerate() {
                for j in 0..cols {
                    d[j] += gd[r * cols + j] * xd[r * cols + j] * ir;
                }
            }
            self.accumulate(grads, gain, d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Tensor) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let out = build(&mut tape, x);
        let loss = tape.sum(out);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let x = tape.leaf(t, false);
                let out = build(&mut tape, x);
                let l = tape.sum(out);
                tape.value(l).item().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "index {i}: analytic {a} vs numeric {numeric}");
        }
    }

    fn sample(shape: Vec<usize>, salt: u64) -> Tensor {
        // deterministic values in [-2, 2]
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let k = (i as u64 + 1).wrapping_mul(2654435761).wrapping_add(salt * 97) % 4001;
                k as f64 / 1000.0 - 2.0
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(2.0), false);
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(w, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn unreachable_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let unused = tape.leaf(Tensor::scalar(1.0), true);
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.scale(x, 2.0);
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        fd_check(|t, x| t.gelu(x), sample(vec![3, 4], 1));
        fd_check(|t, x| t.silu(x), sample(vec![3, 4], 2));
        fd_check(|t, x| t.mul(x, x).unwrap(), sample(vec![5], 3));
        fd_check(|t, x| t.scale(x, -1.7), sample(vec![5], 4));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let b = sample(vec![4, 3], 5);
        fd_check(
            move |t, x| {
                let bv = t.constant(b.clone());
                let y = t.matmul(x, bv).unwrap();
                t.mul(y, y).unwrap()
            },
            sample(vec![2, 4], 6),
        );
        let a = sample(vec![2, 4], 7);
        fd_check(
            move |t, x| {
                let av = t.constant(a.clone());
                let y = t.matmul(av, x).unwrap();
                t.gelu(y)
            },
            sample(vec![4, 3], 8),
        );
    }

    #[test]
    fn rms_norm_gradients_match_finite_differences() {
        let gain = sample(vec![4], 9);
        let w = sample(vec![3, 4], 10);
        fd_check(
            move |t, x| {
                let g = t.constant(gain.clone());
                let y = t.rms_norm(x, g, 1e-6).unwrap();
                let wv = t.constant(w.clone());
                t.mul(y, wv).unwrap()
            },
            sample(vec![3, 4], 11),
        );
        let x0 = sample(vec![3, 4], 12);
        let w = sample(vec![3, 4], 13);
        fd_check(
            move |t, g| {
                let x = t.constant(x0.clone());
                let y = t.rms_norm(x, g, 1e-6).unwrap();
                let wv = t.constant(w.clone());
                t.mul(y, wv).unwrap()
            },
            sample(vec![4], 14),
        );
    }

    #[test]
    fn softmax_and_cross_entropy_gradients() {
        let w = sample(vec![4, 4], 15);
        for causal in [false, true] {
            let w = w.clone();
            fd_check(
                move |t, x| {
                    let s = t.softmax_rows(x, causal).unwrap();
                    let wv = t.constant(w.clone());
                    t.mul(s, wv).unwrap()
                },
                sample(vec![4, 4], 16),
            );
        }
        fd_check(
            |t, x| t.cross_entropy(x, &[Some(1), None, Some(3)]).unwrap(),
            sample(vec![3, 5], 17),
        );
    }

    #[test]
    fn structural_op_gradients() {
        let w = sample(vec![4, 8], 18);
        fd_check(
            move |t, x| {
                let a = t.slice_cols(x, 0, 2).unwrap();
                let b = t.slice_cols(x, 2, 4).unwrap();
                let c = t.concat_cols(&[b, a, a]).unwrap();
                let wv = t.constant(w.clone());
                let y = t.mul(c, wv).unwrap();
                let tr = t.transpose(y).unwrap();
                t.gelu(tr)
            },
            sample(vec![4, 6], 19),
        );
        fd_check(
            |t, x| {
                let rows = t.gather_rows(x, &[2, 0, 2]).unwrap();
                let both = t.concat_rows(&[rows, x]).unwrap();
                t.silu(both)
            },
            sample(vec![3, 2], 20),
        );
        let bias = sample(vec![3], 21);
        fd_check(
            move |t, x| {
                let b = t.leaf(bias.clone(), true);
                let y = t.add_row(x, b).unwrap();
                let z = t.add(y, x).unwrap();
                t.mul(z, z).unwrap()
            },
            sample(vec![2, 3], 22),
        );
        let w = sample(vec![3, 8], 23);
        fd_check(
            move |t, x| {
                let r = t.rope(x, 2, 10000.0).unwrap();
                let wv = t.constant(w.clone());
                t.mul(r, wv).unwrap()
            },
            sample(vec![3, 8], 24),
        );
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3, 3]));
        let s = tape.softmax_rows(x, true).unwrap();
        let v = tape.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
        assert!((v.at(2, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rope_rejects_odd_head_size() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 6]));
        assert!(tape.rope(x, 2, 10000.0).is_err());
    }

    #[test]
    fn gather_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.gather_rows(x, &[2]),
            Err(TensorError::Index { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn gelu_fault_changes_gradient() {
        let mut tape = Tape::with_fault(BackwardFault::GeluDerivative);
        let x = tape.leaf(Tensor::scalar(0.7), true);
        let y = tape.gelu(x);
        let faulty = tape.backward(y).unwrap().get(x).unwrap().item().unwrap();
        assert!((faulty - 1.5 * kernels::gelu_grad(0.7)).abs() < 1e-15);
    }
}
