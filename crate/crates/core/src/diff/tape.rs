//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node to the [`Tape`] holding its output value
//! and whatever it needs for the backward sweep. Node inputs always precede
//! the node, so a single reverse pass over the node list visits the graph in
//! reverse topological order.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    StopGradient,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Transpose(Var),
    LeakyRelu(Var, f64),
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    RowSoftmax(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    StackRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        probs: Var,
        target: Vec<f64>,
        floor: f64,
    },
    WeightedMeans {
        weights: Var,
        points: Var,
        mass: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient => "stop_gradient",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Abs(..) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Transpose(..) => "transpose",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MaxPoolRows { .. } => "max_pool_rows",
            Op::RowSoftmax(..) => "row_softmax",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::StackRows(..) => "stack_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedMeans { .. } => "weighted_means",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the form tracked by running statistics.
    pub var: Vec<f64>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Recording of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut [f64] {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Names of the recorded primitives, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A leaf whose gradient backward will report.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Passes values through and blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// Adds vector `b` to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 1 || ta.cols() != tb.len() {
            return Err(Error::Dimension {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        let n = tb.len();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Elementwise absolute value; subgradient 0 at exactly 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v.abs()).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    /// Entrywise clamp to `[lo, hi]`; gradient passes where the input is
    /// inside the interval and is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        Ok(self.sum(prod))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), rg))
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere. The derivative at exactly
    /// zero is taken as 1.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    fn check_norm_params(&self, x: Var, scale: Var, shift: Var) -> Result<(usize, usize)> {
        let tx = self.value(x);
        let d = tx.cols();
        for p in [scale, shift] {
            let tp = self.value(p);
            if tx.shape().len() != 2 || tp.shape() != [d] {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    left: tx.shape().to_vec(),
                    right: tp.shape().to_vec(),
                });
            }
        }
        Ok((tx.rows(), d))
    }

    fn affine_normalize(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    ) -> Var {
        let (tx, ts, tb) = (self.value(x), self.value(scale), self.value(shift));
        let d = tx.cols();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) * inv_std[j] * ts.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        let op = Op::BatchNorm {
            x,
            scale,
            shift,
            mean,
            inv_std,
            train,
        };
        self.push(out, op, rg)
    }

    /// Normalizes each column of `x` by its batch mean and biased variance,
    /// then applies the per-column affine map.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, d) = self.check_norm_params(x, scale, shift)?;
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let data = self.value(x).data();
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in data.chunks(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        Ok((
            self.affine_normalize(x, scale, shift, mean, inv_std, true),
            stats,
        ))
    }

    /// Batch norm with externally supplied statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, d) = self.check_norm_params(x, scale, shift)?;
        if mean.len() != d || var.len() != d {
            return Err(Error::Dimension {
                op: "batch_norm_eval",
                left: vec![d],
                right: vec![mean.len(), var.len()],
            });
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.affine_normalize(x, scale, shift, mean.to_vec(), inv_std, false))
    }

    /// Column-wise maximum over rows. Gradient goes to the first row that
    /// attains each maximum.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() || t.shape().len() != 2 || t.rows() == 0 {
            return Err(Error::EmptyInput("max_pool_rows"));
        }
        let d = t.cols();
        let mut best = t.row(0).to_vec();
        let mut argmax = vec![0; d];
        for i in 1..t.rows() {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(best), Op::MaxPoolRows { x, argmax }, rg))
    }

    /// Softmax along each row, shifted by the row maximum.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.all_finite() {
            return Err(Error::Numeric("row_softmax: non-finite logits".into()));
        }
        let d = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowSoftmax(x), rg))
    }

    /// Scales each row (or the single vector) to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::DegenerateNorm("normalize_rows"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn l2_normalize(&mut self, v: Var) -> Result<Var> {
        self.normalize_rows(v)
    }

    /// Stacks vectors of equal length into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(Error::EmptyInput("stack_rows"))?;
        let d = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.value(r);
            if t.len() != d {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    left: vec![d],
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        let out = Tensor::matrix(rows.len(), d, data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || start >= end || end > t.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: t.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let d = t.cols();
        let out = Tensor::matrix(end - start, d, t.data()[start * d..end * d].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// `-(1/N) * sum(target * ln(max(probs, floor)))` for an `N x J`
    /// probability matrix. `target` is plain data and never differentiated.
    pub fn cross_entropy(&mut self, probs: Var, target: Vec<f64>, floor: f64) -> Result<Var> {
        let t = self.value(probs);
        if target.len() != t.len() || t.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let n = t.rows() as f64;
        let total: f64 = t
            .data()
            .iter()
            .zip(&target)
            .map(|(&s, &g)| if g == 0.0 { 0.0 } else { g * s.max(floor).ln() })
            .sum();
        let rg = self.rg(probs);
        let op = Op::CrossEntropy {
            probs,
            target,
            floor,
        };
        Ok(self.push(Tensor::scalar(-total / n), op, rg))
    }

    /// Rows of the result are the `weights`-weighted means of the rows of
    /// `points`, one per weight column: `C = diag(1/colsum(W)) W^T P`.
    pub fn weighted_means(&mut self, weights: Var, points: Var, mass_floor: f64) -> Result<Var> {
        let (tw, tp) = (self.value(weights), self.value(points));
        if tw.shape().len() != 2 || tp.shape().len() != 2 || tw.rows() != tp.rows() {
            return Err(Error::Dimension {
                op: "weighted_means",
                left: tw.shape().to_vec(),
                right: tp.shape().to_vec(),
            });
        }
        let (n, j, c) = (tw.rows(), tw.cols(), tp.cols());
        let mut mass = vec![0.0; j];
        for row in tw.data().chunks(j) {
            mass.iter_mut().zip(row).for_each(|(m, w)| *m += w);
        }
        if let Some((column, &m)) = mass.iter().enumerate().find(|(_, &m)| !(m > mass_floor)) {
            return Err(Error::DeadPrototype { column, mass: m });
        }
        let mut out = vec![0.0; j * c];
        gemm(j, n, c, tw.data(), true, tp.data(), false, 0.0, &mut out);
        for (row, m) in out.chunks_mut(c).zip(&mass) {
            row.iter_mut().for_each(|v| *v /= m);
        }
        let rg = self.rg(weights) || self.rg(points);
        let op = Op::WeightedMeans {
            weights,
            points,
            mass,
        };
        Ok(self.push(Tensor::matrix(j, c, out)?, op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// A tape can be swept once; call [`Tape::reset`] to sweep again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.len() != 1 || lt.shape().len() > 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Allows another backward sweep over the same recording.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if rg(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    gemm(m, n, k, g, false, tb.data(), true, 1.0, ga);
                }
                if rg(*b) {
                    let gb = accumulate(grads, *b, k * n);
                    gemm(k, m, n, ta.data(), true, g, false, 1.0, gb);
                }
            }
            Op::AddRow(a, b) => {
                let n = val(*b).len();
                if rg(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(*b) {
                    let gb = accumulate(grads, *b, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if rg(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(*b) {
                    let gb = accumulate(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let tb = val(*b).data();
                    let ga = accumulate(grads, *a, g.len());
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(tb) {
                        *x += y * w;
                    }
                }
                if rg(*b) {
                    let ta = val(*a).data();
                    let gb = accumulate(grads, *b, g.len());
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(ta) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(a, factor) => {
                let ga = accumulate(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
            }
            Op::Abs(a) => {
                let ta = val(*a).data();
                let ga = accumulate(grads, *a, g.len());
                for ((x, y), v) in ga.iter_mut().zip(g).zip(ta) {
                    let s = if *v > 0.0 {
                        1.0
                    } else if *v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *x += s * y;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let ta = val(*a).data();
                let ga = accumulate(grads, *a, g.len());
                for ((x, y), v) in ga.iter_mut().zip(g).zip(ta) {
                    if (*lo..=*hi).contains(v) {
                        *x += y;
                    }
                }
            }
            Op::Sum(a) => {
                let len = val(*a).len();
                let ga = accumulate(grads, *a, len);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                let ga = accumulate(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let tx = val(*x).data();
                let gx = accumulate(grads, *x, g.len());
                for ((acc, y), v) in gx.iter_mut().zip(g).zip(tx) {
                    *acc += if *v >= 0.0 { *y } else { slope * y };
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
                train,
            } => {
                let tx = val(*x);
                let (n, d) = (tx.rows(), tx.cols());
                let gamma = val(*scale).data();
                let xhat = |i: usize, j: usize| (tx.data()[i * d + j] - mean[j]) * inv_std[j];
                let mut sum_dy = vec![0.0; d];
                let mut sum_dy_xhat = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        let dy = g[i * d + j];
                        sum_dy[j] += dy;
                        sum_dy_xhat[j] += dy * xhat(i, j);
                    }
                }
                if rg(*x) {
                    let gx = accumulate(grads, *x, n * d);
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..d {
                            let dy = g[i * d + j];
                            gx[i * d + j] += if *train {
                                gamma[j] * inv_std[j] / nf
                                    * (nf * dy - sum_dy[j] - xhat(i, j) * sum_dy_xhat[j])
                            } else {
                                gamma[j] * inv_std[j] * dy
                            };
                        }
                    }
                }
                if rg(*scale) {
                    let gs = accumulate(grads, *scale, d);
                    gs.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b);
                }
                if rg(*shift) {
                    let gb = accumulate(grads, *shift, d);
                    gb.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b);
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                let tx = val(*x);
                let d = tx.cols();
                let gx = accumulate(grads, *x, tx.len());
                for (j, &i) in argmax.iter().enumerate() {
                    gx[i * d + j] += g[j];
                }
            }
            Op::RowSoftmax(x) => {
                let y = node.value.data();
                let d = node.value.cols();
                let gx = accumulate(grads, *x, y.len());
                for ((gx_row, y_row), g_row) in gx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let inner: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        gx_row[k] += y_row[k] * (g_row[k] - inner);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let d = node.value.cols();
                let gx = accumulate(grads, *x, y.len());
                for (r, ((gx_row, y_row), g_row)) in gx
                    .chunks_mut(d)
                    .zip(y.chunks(d))
                    .zip(g.chunks(d))
                    .enumerate()
                {
                    let inner: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        gx_row[k] += (g_row[k] - y_row[k] * inner) / norms[r];
                    }
                }
            }
            Op::StackRows(rows) => {
                let d = node.value.cols();
                for (r, &v) in rows.iter().enumerate() {
                    if rg(v) {
                        let gv = accumulate(grads, v, d);
                        gv.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.cols();
                let gx = accumulate(grads, *x, val(*x).len());
                gx[start * d..start * d + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
            Op::CrossEntropy {
                probs,
                target,
                floor,
            } => {
                let tp = val(*probs);
                let n = tp.rows() as f64;
                let gp = accumulate(grads, *probs, tp.len());
                for ((acc, &s), &t) in gp.iter_mut().zip(tp.data()).zip(target) {
                    if s > *floor {
                        *acc -= g[0] * t / (n * s);
                    }
                }
            }
            Op::WeightedMeans {
                weights,
                points,
                mass,
            } => {
                let (tw, tp) = (val(*weights), val(*points));
                let (n, j, c) = (tw.rows(), tw.cols(), tp.cols());
                let means = node.value.data();
                let scaled: Vec<f64> = g
                    .chunks(c)
                    .zip(mass)
                    .flat_map(|(row, m)| row.iter().map(move |v| v / m))
                    .collect();
                if rg(*weights) {
                    // dW_ij = (p_i - c_j) . dC_j / m_j
                    let mut pg = vec![0.0; n * j];
                    gemm(n, c, j, tp.data(), false, &scaled, true, 0.0, &mut pg);
                    let offsets: Vec<f64> = (0..j)
                        .map(|q| {
                            means[q * c..(q + 1) * c]
                                .iter()
                                .zip(&scaled[q * c..(q + 1) * c])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    let gw = accumulate(grads, *weights, n * j);
                    for (acc_row, pg_row) in gw.chunks_mut(j).zip(pg.chunks(j)) {
                        for q in 0..j {
                            acc_row[q] += pg_row[q] - offsets[q];
                        }
                    }
                }
                if rg(*points) {
                    let gp = accumulate(grads, *points, n * c);
                    gemm(n, j, c, tw.data(), false, &scaled, false, 1.0, gp);
                }
            }
        }
    }
}
