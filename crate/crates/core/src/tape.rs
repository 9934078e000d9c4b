//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse, producing a [`Gradients`]
//! table that can be queried per node or folded into the gradient buffers of
//! the parameter tensors the tape was built from.
//!
//! Nodes that cannot reach a parameter or a differentiable leaf carry no
//! gradient, so constant inputs cost nothing on the way back.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Position of a parameter tensor in its owner's declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Dense { x: Var, w: Var, b: Var },
    Relu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Sigmoid(Var),
    SoftmaxTemp { x: Var, tau: f64 },
    LogClamped(Var),
    RowEntropy(Var),
    CrossEntropy { probs: Var, labels: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    GradReverse { x: Var, coeff: f64 },
    ConcatCols(Var, Var),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    AbsPow { x: Var, q: f64 },
    StackMean(Vec<Var>),
    StackVariance(Vec<Var>),
    RowMean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, false)
    }

    /// A differentiable input that is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, true)
    }

    /// Records a parameter; its gradient is routed back to `id`.
    pub fn param(&mut self, value: &Tensor, id: ParamId) -> Var {
        self.push(value.detached(), Op::Param(id), true)
    }

    /// Affine map `x·W + b` over a batch of row vectors.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, inp) = matrix_dims(xv, "dense")?;
        let (w_in, out) = matrix_dims(wv, "dense")?;
        if inp != w_in || bv.len() != out || bv.shape().len() != 1 {
            return Err(Error::shape(
                "dense",
                format!("x {:?}, W {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let (xs, ws, bs) = (xv.values(), wv.values(), bv.values());
        let mut y = vec![0.0; batch * out];
        for (r, yrow) in y.chunks_exact_mut(out).enumerate() {
            yrow.copy_from_slice(bs);
            for (i, &xi) in xs[r * inp..(r + 1) * inp].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (yj, &wij) in yrow.iter_mut().zip(&ws[i * out..(i + 1) * out]) {
                    *yj += xi * wij;
                }
            }
        }
        let value = Tensor::checked(vec![batch, out], y, "dense")?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let y = xv.values().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), y);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    /// Multiplies by a precomputed inverted-dropout mask.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape("dropout", format!("mask of {} for {} values", mask.len(), xv.len())));
        }
        let y = xv.values().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::checked(xv.shape().to_vec(), y, "dropout")?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let y = xv.values().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), y);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sigmoid(x), rg))
    }

    /// Row-wise softmax of `x / tau`.
    pub fn softmax_temp(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau", format!("temperature must be positive, got {tau}")));
        }
        let xv = self.value(x);
        let (rows, cols) = matrix_dims(xv, "softmax_temp")?;
        let mut y = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            y.extend(softmax_row(xv.row(r), tau));
        }
        let value = Tensor::checked(vec![rows, cols], y, "softmax_temp")?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxTemp { x, tau }, rg))
    }

    /// Elementwise `ln(max(x, LOG_FLOOR))`.
    pub fn log_clamped(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let y = xv.values().iter().map(|&v| v.max(LOG_FLOOR).ln()).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), y);
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogClamped(x), rg))
    }

    /// Shannon entropy of each row of a `[B×C]` probability matrix, shape `[B]`.
    pub fn row_entropy(&mut self, p: Var) -> Result<Var> {
        let pv = self.value(p);
        let (rows, _) = matrix_dims(pv, "row_entropy")?;
        let y = (0..rows).map(|r| entropy_unchecked(pv.row(r))).collect();
        let value = Tensor::checked(vec![rows], y, "row_entropy")?;
        let rg = self.rg(p);
        Ok(self.push(value, Op::RowEntropy(p), rg))
    }

    /// Mean negative log-likelihood of integer labels under row distributions.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        let (rows, cols) = matrix_dims(pv, "cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= cols {
                return Err(Error::LabelOutOfRange {
                    label: label as i64,
                    classes: cols,
                });
            }
            let row = pv.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::MalformedDistribution(s));
            }
            total -= row[label].max(LOG_FLOOR).ln();
        }
        let value = Tensor::checked(vec![1], vec![total / rows as f64], "cross_entropy")?;
        let rg = self.rg(probs);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "add")?;
        let y = av.values().iter().zip(bv.values()).map(|(x, y)| x + y).collect();
        let value = Tensor::checked(av.shape().to_vec(), y, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "sub")?;
        let y = av.values().iter().zip(bv.values()).map(|(x, y)| x - y).collect();
        let value = Tensor::checked(av.shape().to_vec(), y, "sub")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "mul")?;
        let y = av.values().iter().zip(bv.values()).map(|(x, y)| x * y).collect();
        let value = Tensor::checked(av.shape().to_vec(), y, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xv = self.value(x);
        let y = xv.values().iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::checked(xv.shape().to_vec(), y, "affine")?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Affine { x, scale }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// Identity on the way forward; multiplies the incoming gradient by `-coeff`.
    pub fn grad_reverse(&mut self, x: Var, coeff: f64) -> Result<Var> {
        if !(coeff >= 0.0 && coeff.is_finite()) {
            return Err(Error::invalid("coeff", format!("reversal coefficient must be >= 0, got {coeff}")));
        }
        let value = self.value(x).detached();
        let rg = self.rg(x);
        Ok(self.push(value, Op::GradReverse { x, coeff }, rg))
    }

    /// Joins `[B×m]` and `[B×n]` into `[B×(m+n)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = matrix_dims(av, "concat_cols")?;
        let (rb, cb) = matrix_dims(bv, "concat_cols")?;
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let mut y = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            y.extend_from_slice(av.row(r));
            y.extend_from_slice(bv.row(r));
        }
        let value = Tensor::from_parts(vec![ra, ca + cb], y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, xv.rows()),
            ));
        }
        let c = xv.cols();
        let y = xv.values()[start * c..(start + len) * c].to_vec();
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let value = Tensor::from_parts(shape, y);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(shape, xv.values().to_vec())
            .map_err(|_| Error::shape("reshape", format!("cannot view {:?} with a new shape", xv.shape())))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).values().iter().sum();
        let value = Tensor::checked(vec![1], vec![s], "sum")?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.values().iter().sum::<f64>() / xv.len() as f64;
        let value = Tensor::checked(vec![1], vec![s], "mean")?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// `Σ weights[i]·x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::shape("weighted_sum", format!("{} weights for {} values", weights.len(), xv.len())));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("weighted_sum weights"));
        }
        let s = xv.values().iter().zip(weights).map(|(a, w)| a * w).sum();
        let value = Tensor::checked(vec![1], vec![s], "weighted_sum")?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise `|x|^q` for `q >= 1`.
    pub fn abs_pow(&mut self, x: Var, q: f64) -> Result<Var> {
        if !(q >= 1.0 && q.is_finite()) {
            return Err(Error::invalid("q", format!("exponent must be >= 1, got {q}")));
        }
        let xv = self.value(x);
        let y = xv.values().iter().map(|v| v.abs().powf(q)).collect();
        let value = Tensor::checked(xv.shape().to_vec(), y, "abs_pow")?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AbsPow { x, q }, rg))
    }

    fn check_stack(&self, xs: &[Var], op: &'static str) -> Result<Vec<usize>> {
        let first = xs.first().ok_or(Error::Empty("stack"))?;
        let shape = self.value(*first).shape().to_vec();
        for &v in xs {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::shape(op, format!("{shape:?} vs {:?}", self.value(v).shape())));
            }
        }
        Ok(shape)
    }

    /// Elementwise mean over equally shaped tensors.
    pub fn stack_mean(&mut self, xs: &[Var]) -> Result<Var> {
        let shape = self.check_stack(xs, "stack_mean")?;
        let n = self.value(xs[0]).len();
        let t = xs.len() as f64;
        let mut acc = vec![0.0; n];
        for &v in xs {
            for (a, x) in acc.iter_mut().zip(self.value(v).values()) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= t);
        let value = Tensor::checked(shape, acc, "stack_mean")?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::StackMean(xs.to_vec()), rg))
    }

    /// Elementwise population variance over equally shaped tensors.
    pub fn stack_variance(&mut self, xs: &[Var]) -> Result<Var> {
        let shape = self.check_stack(xs, "stack_variance")?;
        let n = self.value(xs[0]).len();
        let t = xs.len() as f64;
        let mean = stack_mean_values(self, xs, n);
        let mut acc = vec![0.0; n];
        for &v in xs {
            for ((a, x), m) in acc.iter_mut().zip(self.value(v).values()).zip(&mean) {
                let d = x - m;
                *a += d * d;
            }
        }
        acc.iter_mut().for_each(|a| *a /= t);
        let value = Tensor::checked(shape, acc, "stack_variance")?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::StackVariance(xs.to_vec()), rg))
    }

    /// Mean of each row of a matrix, shape `[B]`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = matrix_dims(xv, "row_mean")?;
        let y = (0..rows).map(|r| xv.row(r).iter().sum::<f64>() / cols as f64).collect();
        let value = Tensor::checked(vec![rows], y, "row_mean")?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::RowMean(x), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, inp) = (xv.rows(), xv.cols());
                let outd = wv.cols();
                if self.rg(*x) {
                    let ws = wv.values();
                    let mut dx = vec![0.0; batch * inp];
                    for r in 0..batch {
                        let grow = &g[r * outd..(r + 1) * outd];
                        for i in 0..inp {
                            dx[r * inp + i] = grow.iter().zip(&ws[i * outd..(i + 1) * outd]).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let xs = xv.values();
                    let mut dw = vec![0.0; inp * outd];
                    for r in 0..batch {
                        let grow = &g[r * outd..(r + 1) * outd];
                        for i in 0..inp {
                            let xi = xs[r * inp + i];
                            if xi == 0.0 {
                                continue;
                            }
                            for (d, &gj) in dw[i * outd..(i + 1) * outd].iter_mut().zip(grow) {
                                *d += xi * gj;
                            }
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; outd];
                    for grow in g.chunks_exact(outd) {
                        db.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = out.values().iter().zip(g).map(|(s, gv)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxTemp { x, tau } => {
                let cols = out.cols();
                let mut dx = vec![0.0; out.len()];
                for (r, (prow, grow)) in out.values().chunks_exact(cols).zip(g.chunks_exact(cols)).enumerate() {
                    let dot: f64 = prow.iter().zip(grow).map(|(p, gv)| p * gv).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = prow[c] * (grow[c] - dot) / tau;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogClamped(x) => {
                let dx = self
                    .value(*x)
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > LOG_FLOOR { gv / v } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::RowEntropy(p) => {
                let pv = self.value(*p);
                let cols = pv.cols();
                let dx = pv
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let inner = v.max(LOG_FLOOR).ln() + if v > LOG_FLOOR { 1.0 } else { 0.0 };
                        -g[i / cols] * inner
                    })
                    .collect();
                self.accumulate(grads, *p, dx);
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = self.value(*probs);
                let cols = pv.cols();
                let n = labels.len() as f64;
                let mut dx = vec![0.0; pv.len()];
                for (r, &label) in labels.iter().enumerate() {
                    let p = pv.values()[r * cols + label];
                    if p > LOG_FLOOR {
                        dx[r * cols + label] = -g[0] / (n * p);
                    }
                }
                self.accumulate(grads, *probs, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv.values()).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av.values()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * scale).collect());
            }
            Op::GradReverse { x, coeff } => {
                self.accumulate(grads, *x, g.iter().map(|v| -coeff * v).collect());
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for grow in g.chunks_exact(ca + cb) {
                    da.extend_from_slice(&grow[..ca]);
                    db.extend_from_slice(&grow[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights.iter().map(|w| w * g[0]).collect());
            }
            Op::AbsPow { x, q } => {
                let dx = self
                    .value(*x)
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        if v == 0.0 {
                            0.0
                        } else {
                            gv * q * v.abs().powf(q - 1.0) * v.signum()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::StackMean(xs) => {
                let t = xs.len() as f64;
                for &v in xs {
                    self.accumulate(grads, v, g.iter().map(|gv| gv / t).collect());
                }
            }
            Op::StackVariance(xs) => {
                let t = xs.len() as f64;
                let mean = stack_mean_values(self, xs, g.len());
                for &v in xs {
                    let dx = self
                        .value(v)
                        .values()
                        .iter()
                        .zip(&mean)
                        .zip(g)
                        .map(|((x, m), gv)| 2.0 * (x - m) * gv / t)
                        .collect();
                    self.accumulate(grads, v, dx);
                }
            }
            Op::RowMean(x) => {
                let cols = self.value(*x).cols();
                let dx = g.iter().flat_map(|gv| std::iter::repeat_n(gv / cols as f64, cols)).collect();
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn stack_mean_values(tape: &Tape, xs: &[Var], n: usize) -> Vec<f64> {
    let t = xs.len() as f64;
    let mut mean = vec![0.0; n];
    for &v in xs {
        for (m, x) in mean.iter_mut().zip(tape.value(v).values()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    mean
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `row / tau` with max subtraction.
pub fn softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
    let exps: Vec<f64> = row.iter().map(|&v| (v / tau - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn entropy_unchecked(row: &[f64]) -> f64 {
    -row.iter().map(|&p| p * p.max(LOG_FLOOR).ln()).sum::<f64>()
}

/// Gradients produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the `grad` buffers of `params`, indexed
    /// by [`ParamId`]. Parameters bound several times receive the sum.
    pub fn accumulate_into(&self, params: &mut [&mut Tensor]) -> Result<()> {
        for &(ParamId(id), node) in &self.params {
            let Some(g) = self.grads[node].as_deref() else { continue };
            let t = params.get_mut(id).ok_or(Error::MissingGrad(id))?;
            if t.len() != g.len() {
                return Err(Error::shape("accumulate_into", format!("param {id}: {} vs {}", t.len(), g.len())));
            }
            let buf = t.grad_mut().ok_or(Error::MissingGrad(id))?;
            buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn dense_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[vec![1.0, 0.0]]));
        let w = tape.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 0.0]);
    }

    #[test]
    fn dense_hand_multiply() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[vec![1.0, 2.0]]));
        let w = tape.constant(mat(&[vec![1.0, 1.0], vec![1.0, -1.0]]));
        let b = tape.constant(Tensor::vector(vec![0.5, 0.5]).unwrap());
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[3.5, -0.5]);
    }

    #[test]
    fn dense_zero_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3, 4]).unwrap());
        let w = tape.constant(Tensor::full(vec![4, 5], 0.7).unwrap());
        let b = tape.constant(Tensor::zeros(vec![5]).unwrap());
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 5]);
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let w = tape.constant(Tensor::zeros(vec![4, 5]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![5]).unwrap());
        assert!(matches!(tape.dense(x, w, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn dense_overflow_is_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[vec![1e300, 1e300]]));
        let w = tape.constant(mat(&[vec![1e300], vec![1e300]]));
        let b = tape.constant(Tensor::zeros(vec![1]).unwrap());
        assert!(matches!(tape.dense(x, w, b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn relu_values_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5]).unwrap());
        let y = tape.relu(x).unwrap();
        let l = tape.weighted_sum(y, &[3.0]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[3.0]);
    }

    #[test]
    fn dropout_mask_scaling() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2.0; 4]).unwrap());
        let y = tape.dropout(x, vec![2.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(tape.value(y).values(), &[4.0, 0.0, 4.0, 4.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[vec![0.0, 0.0], vec![1.0, 0.0]]));
        let p = tape.softmax_temp(x, 1.0).unwrap();
        let v = tape.value(p).values();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        let e = std::f64::consts::E;
        assert!((v[2] - e / (e + 1.0)).abs() < 1e-15);
        assert!((v[2] - 0.73106).abs() < 1e-5);
        assert!((v[3] - 0.26894).abs() < 1e-5);

        let q = tape.softmax_temp(x, 1e6).unwrap();
        for &v in &tape.value(q).values()[2..] {
            assert!((v - 0.5).abs() < 1e-5);
        }
        assert!(tape.softmax_temp(x, 0.0).is_err());
        assert!(tape.softmax_temp(x, -1.0).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[vec![1000.0, 999.0, -1000.0]]));
        let p = tape.softmax_temp(x, 1.0).unwrap();
        let s: f64 = tape.value(p).values().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::new();
        let onehot = tape.constant(mat(&[vec![0.0, 1.0]]));
        let l = tape.cross_entropy(onehot, &[1]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let uniform = tape.constant(mat(&[vec![0.25; 4], vec![0.25; 4]]));
        let l = tape.cross_entropy(uniform, &[0, 3]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!((tape.value(l).item() - 1.38629).abs() < 1e-5);

        let p = tape.constant(mat(&[vec![0.73106, 0.26894]]));
        let l = tape.cross_entropy(p, &[1]).unwrap();
        assert!((tape.value(l).item() - 1.31326).abs() < 1e-4);

        assert!(matches!(
            tape.cross_entropy(p, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_log_floor() {
        let mut tape = Tape::new();
        let p = tape.constant(mat(&[vec![1.0, 0.0]]));
        let l = tape.cross_entropy(p, &[1]).unwrap();
        assert!((tape.value(l).item() + LOG_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let w = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.1, 0.0, 5.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let wv = tape.param(&w, ParamId(0));
        let s = tape.sum(wv).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(wv).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut w = Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let wv = tape.param(&w, ParamId(0));
        let sq = tape.mul(wv, wv).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        g.accumulate_into(&mut [&mut w]).unwrap();
        let once = w.grad().unwrap().to_vec();
        assert_eq!(once, vec![2.0, 4.0]);
        g.accumulate_into(&mut [&mut w]).unwrap();
        let twice: Vec<f64> = once.iter().map(|v| 2.0 * v).collect();
        assert_eq!(w.grad().unwrap(), twice.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn missing_grad_buffer_is_an_error() {
        let mut w = Tensor::vector(vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&w, ParamId(0));
        let s = tape.sum(wv).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(matches!(g.accumulate_into(&mut [&mut w]), Err(Error::MissingGrad(0))));
    }

    #[test]
    fn grad_reversal_scaling() {
        for (coeff, upstream, expected) in [
            (0.0, vec![1.0, 1.0], vec![0.0, 0.0]),
            (1.0, vec![3.0, -2.0], vec![-3.0, 2.0]),
            (0.5, vec![2.0, -4.0], vec![-1.0, 2.0]),
        ] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![0.3, 0.7]).unwrap());
            let r = tape.grad_reverse(x, coeff).unwrap();
            assert_eq!(tape.value(r).values(), tape.value(x).values());
            let l = tape.weighted_sum(r, &upstream).unwrap();
            let g = tape.backward(l).unwrap();
            let got = g.wrt(x).unwrap();
            for (a, b) in got.iter().zip(&expected) {
                assert_eq!(*a, *b);
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0]).unwrap());
        let x = tape.leaf(Tensor::vector(vec![2.0]).unwrap());
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[1.0]);
    }

    #[test]
    fn variance_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[vec![1.0, 0.0]]));
        let b = tape.constant(mat(&[vec![0.0, 1.0]]));
        let v = tape.stack_variance(&[a, b]).unwrap();
        assert_eq!(tape.value(v).values(), &[0.25, 0.25]);
        let m = tape.row_mean(v).unwrap();
        assert_eq!(tape.value(m).values(), &[0.25]);
    }
}
