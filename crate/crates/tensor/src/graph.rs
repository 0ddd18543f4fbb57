//! Dynamic computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so creation order is already a topological order and
//! [`Graph::backward`] walks the node list once in reverse.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::{split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    Gelu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        /// Per-row normalized activations and reciprocal std.
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: T,
        /// Row-stochastic attention weights `[n, m]`.
        probs: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Operation records in evaluation order.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const GELU_COEF: f64 = 0.044_715;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf. Leaves with `requires_grad` receive a gradient buffer on
    /// every backward pass that reaches them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(v).len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape(v).to_vec(),
            }),
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[.., d] + bias[d]`, broadcasting the bias over all leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v * c).collect()).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let data = transpose_raw(self.value(x).data(), r, c);
        let out = Tensor::new(vec![c, r], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                extent: shape[axis],
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Narrow { input: x, axis, start }, rg))
    }

    /// Selects rows (indices along axis 0). Rows may repeat; the backward
    /// pass scatter-adds into the source rows.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Rank {
                op: "gather_rows",
                expected: 1,
                shape,
            });
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let out = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                input: x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_f64(v.numel() as f64);
        let s: T = v.data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SumAxis { input: x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::from_f64(n as f64)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(GELU_COEF);
        let half = T::from_f64(0.5);
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let mut max = T::neg_infinity();
                for e in 0..extent {
                    max = max.max(src[at(e)]);
                }
                let mut total = T::zero();
                for e in 0..extent {
                    let ex = (src[at(e)] - max).exp();
                    data[at(e)] = ex;
                    total += ex;
                }
                for e in 0..extent {
                    data[at(e)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { input: x, axis }, rg))
    }

    /// Layer normalization over the last axis followed by `gain * xhat + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::Rank {
            op: "layernorm",
            expected: 1,
            shape: shape.clone(),
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                data[r * d + c] = g[c] * xh + b[c];
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Dropout { input: x, mask }, rg))
    }

    /// Mean binary cross-entropy over all elements, computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let z = self.value(logits).data();
        let n = T::from_f64(z.len() as f64);
        let total: T = z
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// `softmax(q kᵀ · scale) v` for 2-D `q: [n, d]`, `k: [m, d]`, `v: [m, e]`.
    ///
    /// Reductions over the key axis add their terms in sorted order, so
    /// permuting the rows of `k` and `v` together leaves every output bit
    /// unchanged.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: T) -> Result<Var> {
        let (n, d) = self.dims2("attention", q)?;
        let (m, dk) = self.dims2("attention", k)?;
        let (mv, e) = self.dims2("attention", v)?;
        if d != dk || m != mv {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: vec![n, d, m, dk],
                rhs: vec![mv, e],
            });
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); n * m];
        let mut terms = Vec::with_capacity(m);
        for i in 0..n {
            let row = &mut probs[i * m..(i + 1) * m];
            let qi = &qd[i * d..(i + 1) * d];
            let mut max = T::neg_infinity();
            for (j, s) in row.iter_mut().enumerate() {
                let dot: T = qi.iter().zip(&kd[j * d..(j + 1) * d]).map(|(&a, &b)| a * b).sum();
                *s = dot * scale;
                max = max.max(*s);
            }
            terms.clear();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                terms.push(*s);
            }
            let total = sorted_sum(&mut terms);
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        let mut out = vec![T::zero(); n * e];
        for i in 0..n {
            for c in 0..e {
                terms.clear();
                terms.extend((0..m).map(|j| probs[i * m + j] * vd[j * e + c]));
                out[i * e + c] = sorted_sum(&mut terms);
            }
        }
        let out = Tensor::new(vec![n, e], out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, scale, probs }, rg))
    }

    /// Accumulates d`loss`/d`leaf` into every reachable leaf that requires a
    /// gradient. Calling it twice without [`Graph::zero_grad`] doubles the
    /// stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_updates = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_updates.push((i, g)),
                op => self.propagate(op, &node.value, g, &mut grads),
            }
        }
        for (i, g) in leaf_updates {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g) {
                        *a += v;
                    }
                }
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                let gb = g.iter().zip(va).map(|(&g, &x)| g * x).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(x, bias) => {
                let d = self.shape(*bias)[0];
                let mut gb = vec![T::zero(); d];
                for (i, &v) in g.iter().enumerate() {
                    gb[i % d] += v;
                }
                self.accumulate(grads, *bias, gb);
                self.accumulate(grads, *x, g);
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    self.accumulate(grads, *a, matmul_raw(&g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, &g, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *x, transpose_raw(&g, r, c));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g),
            Op::Concat { inputs, axis } => {
                let (outer, extent, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * extent + offset) * inner;
                            part.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, part);
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, extent, inner) = split_axis(in_shape, *axis);
                let len = out.shape()[*axis];
                let mut gi = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *input, gi);
            }
            Op::GatherRows { input, index } => {
                let in_shape = self.shape(*input);
                let width: usize = in_shape[1..].iter().product();
                let mut gi = vec![T::zero(); in_shape[0] * width];
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..width {
                        gi[i * width + c] += g[r * width + c];
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / T::from_f64(n as f64);
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::SumAxis { input, axis } => {
                let (outer, extent, inner) = split_axis(self.shape(*input), *axis);
                let mut gi = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        for i in 0..inner {
                            gi[(o * extent + e) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Gelu(x) => {
                let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
                let k = T::from_f64(GELU_COEF);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let gi = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &g)| {
                        let u = c * (v + k * v * v * v);
                        let t = u.tanh();
                        let du = c * (T::one() + three * k * v * v);
                        g * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Softmax { input, axis } => {
                let (outer, extent, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut gi = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| (o * extent + e) * inner + i;
                        let dot: T = (0..extent).map(|e| g[at(e)] * y[at(e)]).sum();
                        for e in 0..extent {
                            gi[at(e)] = y[at(e)] * (g[at(e)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                let rows = rstd.len();
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                            gb[c] += g[r * d + c];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                    self.accumulate(grads, *bias, gb);
                }
                if self.requires_grad(*input) {
                    let dn = T::from_f64(d as f64);
                    let mut gi = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gx: Vec<T> = (0..d).map(|c| g[r * d + c] * gv[c]).collect();
                        let mean_g = gx.iter().copied().sum::<T>() / dn;
                        let mean_gx = (0..d).map(|c| gx[c] * xhat[r * d + c]).sum::<T>() / dn;
                        for c in 0..d {
                            gi[r * d + c] = rstd[r] * (gx[c] - mean_g - xhat[r * d + c] * mean_gx);
                        }
                    }
                    self.accumulate(grads, *input, gi);
                }
            }
            Op::Dropout { input, mask } => {
                let gi = g.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *input, gi);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let n = T::from_f64(z.len() as f64);
                let gi = z
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, gi);
            }
            Op::Attention { q, k, v, scale, probs } => {
                let (n, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let (m, e) = (self.shape(*v)[0], self.shape(*v)[1]);
                if self.requires_grad(*v) {
                    let pt = transpose_raw(probs, n, m);
                    self.accumulate(grads, *v, matmul_raw(&pt, &g, m, n, e));
                }
                if self.requires_grad(*q) || self.requires_grad(*k) {
                    let vt = transpose_raw(self.value(*v).data(), m, e);
                    let dp = matmul_raw(&g, &vt, n, e, m);
                    let mut ds = vec![T::zero(); n * m];
                    for i in 0..n {
                        let row = i * m..(i + 1) * m;
                        let dot: T = dp[row.clone()].iter().zip(&probs[row]).map(|(&a, &b)| a * b).sum();
                        for j in 0..m {
                            ds[i * m + j] = probs[i * m + j] * (dp[i * m + j] - dot) * *scale;
                        }
                    }
                    if self.requires_grad(*q) {
                        self.accumulate(grads, *q, matmul_raw(&ds, self.value(*k).data(), n, m, d));
                    }
                    if self.requires_grad(*k) {
                        let dst = transpose_raw(&ds, n, m);
                        self.accumulate(grads, *k, matmul_raw(&dst, self.value(*q).data(), m, n, d));
                    }
                }
            }
        }
    }
}

/// Sums `terms` in ascending order, making the result independent of the
/// order the terms were produced in.
fn sorted_sum<T: Float>(terms: &mut [T]) -> T {
    terms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.iter().copied().sum()
}

pub fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `a[m×k] · b[k×n]`, i-k-j loop order.
pub fn matmul_raw<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose_raw<T: Float>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
