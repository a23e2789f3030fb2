//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Ops append nodes to a [`Tape`]; construction order is already a
//! topological order, so `backward` is a single reverse sweep that visits
//! each node exactly once and sums gradients at fan-out points. Every op
//! validates shapes up front and checks its output for NaN/Inf.


use rayon::prelude::*;

use super::kernels::{matmul_nn, matmul_nt_acc, matmul_tn_acc};
use super::{strides_of, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add { a: usize, b: usize },
    AddBias { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: T },
    Gelu { a: usize },
    LogClamped { a: usize, floor: T },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Slice { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Gather { a: usize, map: Vec<usize> },
    Expand { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    SumAll { a: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

/// Growable DAG of tensor ops with reverse-mode gradients.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0]
            .grad
            .as_ref()
            .map(|g| Tensor::from_vec(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    fn push(&mut self, name: &'static str, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ----------------------------------------------------

    /// Elementwise sum. Shapes must have equal rank; each dim must match or
    /// be 1 on one side (size-1 broadcast only: use `expand` for more).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape("add", &sa, &sb)?;
        let value = if sa == sb {
            let da = self.nodes[a.0].value.data();
            let db = self.nodes[b.0].value.data();
            let data = da.iter().zip(db).map(|(&x, &y)| x + y).collect();
            Tensor::from_vec(out_shape, data)?
        } else {
            let data = broadcast_zip(
                self.nodes[a.0].value.data(),
                &sa,
                self.nodes[b.0].value.data(),
                &sb,
                &out_shape,
                |x, y| x + y,
            );
            Tensor::from_vec(out_shape, data)?
        };
        self.push("add", Op::Add { a: a.0, b: b.0 }, value)
    }

    /// Add `b` broadcast over the leading axes of `a`; `b`'s shape must be a
    /// suffix of `a`'s shape (the linear-bias case).
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("{:?} is not a suffix of {:?}", sb, sa),
            });
        }
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let blen = db.len().max(1);
        let data = da.iter().enumerate().map(|(i, &x)| x + db[i % blen]).collect();
        let value = Tensor::from_vec(sa, data)?;
        self.push("add_bias", Op::AddBias { a: a.0, b: b.0 }, value)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let data = da.iter().zip(db).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(sa, data)?;
        self.push("mul", Op::Mul { a: a.0, b: b.0 }, value)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.push("scale", Op::Scale { a: a.0, c }, value)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(gelu_tanh);
        self.push("gelu", Op::Gelu { a: a.0 }, value)
    }

    /// ln(max(x, floor)); the clamp keeps saturated probabilities out of -inf.
    pub fn log_clamped(&mut self, a: Var, floor: T) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x.max(floor).ln());
        self.push("log_clamped", Op::LogClamped { a: a.0, floor }, value)
    }

    // ---- matmul ----------------------------------------------------------

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    /// Batch dims must agree or broadcast from size 1 (ranks are aligned by
    /// left-padding with 1).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("operands must be at least rank 2, got {:?} and {:?}", sa, sb),
            });
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dimensions disagree: {:?} x {:?}", sa, sb),
            });
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_batch("matmul", batch_a, batch_b, &sa, &sb)?;
        let nb: usize = batch.iter().product();

        let a_data = self.nodes[a.0].value.data();
        let b_data = self.nodes[b.0].value.data();
        let a_index = BatchIndex::new(&batch, batch_a);
        let b_index = BatchIndex::new(&batch, batch_b);

        let mut out = vec![T::zero(); nb * m * n];
        let run = |(bi, chunk): (usize, &mut [T])| {
            let ao = a_index.offset(bi) * m * ka;
            let bo = b_index.offset(bi) * ka * n;
            matmul_nn(&a_data[ao..ao + m * ka], &b_data[bo..bo + ka * n], chunk, m, ka, n);
        };
        if parallel::worth_it(nb, m * ka * n) {
            parallel::pool().install(|| {
                out.par_chunks_mut(m * n).enumerate().for_each(run);
            });
        } else {
            out.chunks_mut(m * n).enumerate().for_each(run);
        }

        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("matmul", Op::MatMul { a: a.0, b: b.0, m, k: ka, n }, value)
    }

    // ---- normalization and softmax ---------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {} out of range for {:?}", axis, shape),
            });
        }
        let (outer, lanes, inner) = lane_split(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lanes * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..lanes {
                    max = max.max(src[base + l * inner]);
                }
                let mut sum = T::zero();
                for l in 0..lanes {
                    let e = (src[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    sum = sum + e;
                }
                for l in 0..lanes {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        self.push("softmax", Op::Softmax { a: a.0, axis }, value)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape {
            op: "layernorm",
            detail: "rank-0 input".into(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "layernorm",
                detail: format!(
                    "gamma {:?} / beta {:?} must both be [{}]",
                    self.shape(gamma),
                    self.shape(beta),
                    d
                ),
            });
        }
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); src.len()];
        let dn = T::from_f64(d as f64);
        for (row, out_row) in src.chunks(d).zip(out.chunks_mut(d)) {
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / dn;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..d {
                out_row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        self.push("layernorm", Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }, value)
    }

    // ---- rearrangements ---------------------------------------------------

    /// Same buffer under a new shape; element count must be conserved.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!(
                    "cannot reshape {:?} ({} elements) to {:?} ({})",
                    self.shape(a),
                    self.nodes[a.0].value.numel(),
                    shape,
                    numel
                ),
            });
        }
        let value = Tensor::from_vec(shape, self.nodes[a.0].value.data().to_vec())?;
        self.push("reshape", Op::Reshape { a: a.0 }, value)
    }

    /// Axis permutation; `perm` must be a permutation of `0..rank`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if !is_permutation(perm, shape.len()) {
            return Err(Error::Shape {
                op: "permute",
                detail: format!("{:?} is not a permutation of 0..{}", perm, shape.len()),
            });
        }
        let (out_shape, data) = permute_data(&shape, self.nodes[a.0].value.data(), perm);
        let value = Tensor::from_vec(out_shape, data)?;
        self.push("permute", Op::Permute { a: a.0, perm: perm.to_vec() }, value)
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            });
        }
        let (outer, lanes, inner) = lane_split(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * lanes + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("slice", Op::Slice { a: a.0, axis, start }, value)
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape { op: "concat", detail: "no inputs".into() });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {} out of range for {:?}", axis, first),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{:?} does not align with {:?} off axis {}", s, first, axis),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = lane_split(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let lanes_p = self.shape(p)[axis];
                let src = self.nodes[p.0].value.data();
                let base = o * lanes_p * inner;
                out.extend_from_slice(&src[base..base + lanes_p * inner]);
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("concat", Op::Concat { parts: parts.iter().map(|v| v.0).collect(), axis }, value)
    }

    /// Arbitrary single-source rearrangement: `out[i] = in[map[i]]`. The
    /// gradient scatters back through the same map.
    pub fn gather(&mut self, a: Var, map: Vec<usize>, out_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if numel != map.len() {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("map has {} entries, shape {:?} needs {}", map.len(), out_shape, numel),
            });
        }
        let src = self.nodes[a.0].value.data();
        if let Some(&bad) = map.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("index {} out of bounds for {} elements", bad, src.len()),
            });
        }
        let data: Vec<T> = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(out_shape, data)?;
        self.push("gather", Op::Gather { a: a.0, map }, value)
    }

    /// Replicate a size-1 axis `copies` times (the explicit broadcast op).
    pub fn expand(&mut self, a: Var, axis: usize, copies: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] != 1 || copies == 0 {
            return Err(Error::Shape {
                op: "expand",
                detail: format!("axis {} of {:?} must have size 1", axis, shape),
            });
        }
        let (outer, _, inner) = lane_split(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * copies * inner);
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for _ in 0..copies {
                out.extend_from_slice(block);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = copies;
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("expand", Op::Expand { a: a.0, axis }, value)
    }

    // ---- reductions --------------------------------------------------------

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "mean_axis",
                detail: format!("axis {} out of range for {:?}", axis, shape),
            });
        }
        let (outer, lanes, inner) = lane_split(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let ln = T::from_f64(lanes as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..lanes {
                let base = (o * lanes + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v / ln;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("mean_axis", Op::MeanAxis { a: a.0, axis }, value)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut s = T::zero();
        for &v in self.nodes[a.0].value.data() {
            s = s + v;
        }
        let value = Tensor::from_vec(vec![1], vec![s])?;
        self.push("sum_all", Op::SumAll { a: a.0 }, value)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// that the loss depends on; fan-out contributions are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        for node in self.nodes.iter_mut() {
            node.grad = Some(vec![T::zero(); node.value.numel()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = T::one();

        for i in (0..=loss.0).rev() {
            let grad = self.nodes[i].grad.take().unwrap();
            self.apply_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn apply_backward(&mut self, i: usize, g: &[T]) {
        // Ops only reference earlier nodes, so splitting at `i` lets us read
        // the node while mutating its parents' gradient buffers.
        let (before, after) = self.nodes.split_at_mut(i);
        let node = &after[0];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let out_shape = node.value.shape().to_vec();
                let sa = before[*a].value.shape().to_vec();
                accumulate_broadcast(before[*a].grad.as_mut().unwrap(), &sa, g, &out_shape);
                let sb = before[*b].value.shape().to_vec();
                accumulate_broadcast(before[*b].grad.as_mut().unwrap(), &sb, g, &out_shape);
            }
            Op::AddBias { a, b } => {
                let ga = before[*a].grad.as_mut().unwrap();
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x = *x + gi;
                }
                let gb = before[*b].grad.as_mut().unwrap();
                let blen = gb.len().max(1);
                for (idx, &gi) in g.iter().enumerate() {
                    gb[idx % blen] = gb[idx % blen] + gi;
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (before[*a].value.data().to_vec(), before[*b].value.data().to_vec());
                {
                    let ga = before[*a].grad.as_mut().unwrap();
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *x = *x + gi * y;
                    }
                }
                let gb = before[*b].grad.as_mut().unwrap();
                for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(&av) {
                    *x = *x + gi * y;
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                let ga = before[*a].grad.as_mut().unwrap();
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x = *x + gi * c;
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let sa = before[*a].value.shape().to_vec();
                let sb = before[*b].value.shape().to_vec();
                let batch: Vec<usize> =
                    node.value.shape()[..node.value.shape().len() - 2].to_vec();
                let nb: usize = batch.iter().product();
                let a_index = BatchIndex::new(&batch, &sa[..sa.len() - 2]);
                let b_index = BatchIndex::new(&batch, &sb[..sb.len() - 2]);
                let b_data = before[*b].value.data().to_vec();
                let a_data = before[*a].value.data().to_vec();
                {
                    let ga = before[*a].grad.as_mut().unwrap();
                    if a_index.is_full() && parallel::worth_it(nb, m * k * n) {
                        parallel::pool().install(|| {
                            ga.par_chunks_mut(m * k).enumerate().for_each(|(bi, chunk)| {
                                let go = bi * m * n;
                                let bo = b_index.offset(bi) * k * n;
                                matmul_nt_acc(
                                    &g[go..go + m * n],
                                    &b_data[bo..bo + k * n],
                                    chunk,
                                    m,
                                    n,
                                    k,
                                );
                            });
                        });
                    } else {
                        for bi in 0..nb {
                            let go = bi * m * n;
                            let ao = a_index.offset(bi) * m * k;
                            let bo = b_index.offset(bi) * k * n;
                            matmul_nt_acc(
                                &g[go..go + m * n],
                                &b_data[bo..bo + k * n],
                                &mut ga[ao..ao + m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                let gb = before[*b].grad.as_mut().unwrap();
                if b_index.is_full() && parallel::worth_it(nb, m * k * n) {
                    parallel::pool().install(|| {
                        gb.par_chunks_mut(k * n).enumerate().for_each(|(bi, chunk)| {
                            let go = bi * m * n;
                            let ao = a_index.offset(bi) * m * k;
                            matmul_tn_acc(&a_data[ao..ao + m * k], &g[go..go + m * n], chunk, m, k, n);
                        });
                    });
                } else {
                    for bi in 0..nb {
                        let go = bi * m * n;
                        let ao = a_index.offset(bi) * m * k;
                        let bo = b_index.offset(bi) * k * n;
                        matmul_tn_acc(
                            &a_data[ao..ao + m * k],
                            &g[go..go + m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let s = node.value.data();
                let (outer, lanes, inner) = lane_split(node.value.shape(), *axis);
                let ga = before[*a].grad.as_mut().unwrap();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lanes * inner + i;
                        let mut dot = T::zero();
                        for l in 0..lanes {
                            let idx = base + l * inner;
                            dot = dot + g[idx] * s[idx];
                        }
                        for l in 0..lanes {
                            let idx = base + l * inner;
                            ga[idx] = ga[idx] + s[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *node.value.shape().last().unwrap();
                let dn = T::from_f64(d as f64);
                let eps = *eps;
                let xv = before[*x].value.data().to_vec();
                let gv = before[*gamma].value.data().to_vec();
                {
                    let gx = before[*x].grad.as_mut().unwrap();
                    for (row_idx, row) in xv.chunks(d).enumerate() {
                        let g_row = &g[row_idx * d..(row_idx + 1) * d];
                        let mut mean = T::zero();
                        for &v in row {
                            mean = mean + v;
                        }
                        mean = mean / dn;
                        let mut var = T::zero();
                        for &v in row {
                            let c = v - mean;
                            var = var + c * c;
                        }
                        var = var / dn;
                        let inv_std = (var + eps).sqrt().recip();
                        let mut dxhat_sum = T::zero();
                        let mut dxhat_xhat_sum = T::zero();
                        let mut dxhat = vec![T::zero(); d];
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            dxhat[j] = g_row[j] * gv[j];
                            dxhat_sum = dxhat_sum + dxhat[j];
                            dxhat_xhat_sum = dxhat_xhat_sum + dxhat[j] * xhat;
                        }
                        let base = row_idx * d;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let t = dn * dxhat[j] - dxhat_sum - xhat * dxhat_xhat_sum;
                            gx[base + j] = gx[base + j] + inv_std / dn * t;
                        }
                    }
                }
                {
                    let ggamma = before[*gamma].grad.as_mut().unwrap();
                    for (row_idx, row) in xv.chunks(d).enumerate() {
                        let g_row = &g[row_idx * d..(row_idx + 1) * d];
                        let mut mean = T::zero();
                        for &v in row {
                            mean = mean + v;
                        }
                        mean = mean / dn;
                        let mut var = T::zero();
                        for &v in row {
                            let c = v - mean;
                            var = var + c * c;
                        }
                        var = var / dn;
                        let inv_std = (var + eps).sqrt().recip();
                        for j in 0..d {
                            ggamma[j] = ggamma[j] + g_row[j] * (row[j] - mean) * inv_std;
                        }
                    }
                }
                let gbeta = before[*beta].grad.as_mut().unwrap();
                for g_row in g.chunks(d) {
                    for j in 0..d {
                        gbeta[j] = gbeta[j] + g_row[j];
                    }
                }
            }
            Op::Gelu { a } => {
                let xv = before[*a].value.data().to_vec();
                let ga = before[*a].grad.as_mut().unwrap();
                for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(&xv) {
                    *x = *x + gi * gelu_tanh_grad(xi);
                }
            }
            Op::LogClamped { a, floor } => {
                let floor = *floor;
                let xv = before[*a].value.data().to_vec();
                let ga = before[*a].grad.as_mut().unwrap();
                for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(&xv) {
                    if xi > floor {
                        *x = *x + gi / xi;
                    }
                }
            }
            Op::Reshape { a } => {
                let ga = before[*a].grad.as_mut().unwrap();
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x = *x + gi;
                }
            }
            Op::Permute { a, perm } => {
                // Gradient flows through the inverse permutation.
                let inv = inverse_permutation(perm);
                let (_, gperm) = permute_data(node.value.shape(), g, &inv);
                let ga = before[*a].grad.as_mut().unwrap();
                for (x, gi) in ga.iter_mut().zip(gperm) {
                    *x = *x + gi;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = before[*a].value.shape().to_vec();
                let (outer, lanes, inner) = lane_split(&in_shape, *axis);
                let len = node.value.shape()[*axis];
                let ga = before[*a].grad.as_mut().unwrap();
                for o in 0..outer {
                    let src_base = o * len * inner;
                    let dst_base = (o * lanes + start) * inner;
                    for idx in 0..len * inner {
                        ga[dst_base + idx] = ga[dst_base + idx] + g[src_base + idx];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = node.value.shape().to_vec();
                let (outer, _, inner) = lane_split(&out_shape, axis);
                let mut cursor = 0usize;
                let mut offsets = Vec::with_capacity(parts.len());
                for &p in &parts {
                    offsets.push(cursor);
                    cursor += before[p].value.shape()[axis];
                }
                let total = cursor;
                for (pi, &p) in parts.iter().enumerate() {
                    let lanes_p = before[p].value.shape()[axis];
                    let gp = before[p].grad.as_mut().unwrap();
                    for o in 0..outer {
                        let src_base = (o * total + offsets[pi]) * inner;
                        let dst_base = o * lanes_p * inner;
                        for idx in 0..lanes_p * inner {
                            gp[dst_base + idx] = gp[dst_base + idx] + g[src_base + idx];
                        }
                    }
                }
            }
            Op::Gather { a, map } => {
                let ga = before[*a].grad.as_mut().unwrap();
                for (&src, &gi) in map.iter().zip(g) {
                    ga[src] = ga[src] + gi;
                }
            }
            Op::Expand { a, axis } => {
                let in_shape = before[*a].value.shape().to_vec();
                let (outer, _, inner) = lane_split(&in_shape, *axis);
                let copies = node.value.shape()[*axis];
                let ga = before[*a].grad.as_mut().unwrap();
                for o in 0..outer {
                    for c in 0..copies {
                        let src_base = (o * copies + c) * inner;
                        for idx in 0..inner {
                            ga[o * inner + idx] = ga[o * inner + idx] + g[src_base + idx];
                        }
                    }
                }
            }
            Op::MeanAxis { a, axis } => {
                let in_shape = before[*a].value.shape().to_vec();
                let (outer, lanes, inner) = lane_split(&in_shape, *axis);
                let ln = T::from_f64(lanes as f64);
                let ga = before[*a].grad.as_mut().unwrap();
                for o in 0..outer {
                    for l in 0..lanes {
                        let base = (o * lanes + l) * inner;
                        for idx in 0..inner {
                            ga[base + idx] = ga[base + idx] + g[o * inner + idx] / ln;
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                let gi = g[0];
                let ga = before[*a].grad.as_mut().unwrap();
                for x in ga.iter_mut() {
                    *x = *x + gi;
                }
            }
        }
    }
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let d_inner = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * sech2 * d_inner
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Materialize an axis permutation of row-major data.
pub(crate) fn permute_data<T: Copy>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if rank == 0 || data.is_empty() {
        return (out_shape, data.to_vec());
    }
    let in_strides = strides_of(shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    loop {
        out.push(data[src]);
        // Odometer increment over the output multi-index.
        let mut d = rank;
        loop {
            if d == 0 {
                return (out_shape, out);
            }
            d -= 1;
            counter[d] += 1;
            src += mapped[d];
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
            src -= mapped[d] * out_shape[d];
        }
    }
}

/// (outer, axis length, inner) factorization around `axis`.
fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lanes = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lanes, inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            detail: format!("rank mismatch: {:?} vs {:?}", a, b),
        });
    }
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            if da == db || da == 1 || db == 1 {
                Ok(da.max(db))
            } else {
                Err(Error::Shape {
                    op,
                    detail: format!("incompatible shapes {:?} vs {:?}", a, b),
                })
            }
        })
        .collect()
}

fn broadcast_batch(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    full_a: &[usize],
    full_b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1usize; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    broadcast_shape(op, &pa, &pb).map_err(|_| Error::Shape {
        op,
        detail: format!("batch dimensions incompatible: {:?} x {:?}", full_a, full_b),
    })
}

/// Maps a flat index over the broadcast batch shape to the flat batch index
/// of an operand whose batch dims may be 1 (or missing).
struct BatchIndex {
    // Per broadcast-dim: operand stride, or 0 where the operand broadcasts.
    strides: Vec<usize>,
    shape: Vec<usize>,
    full: bool,
}

impl BatchIndex {
    fn new(batch: &[usize], operand: &[usize]) -> Self {
        let rank = batch.len();
        let mut padded = vec![1usize; rank - operand.len()];
        padded.extend_from_slice(operand);
        let op_strides = strides_of(&padded);
        let strides = (0..rank)
            .map(|d| if padded[d] == 1 { 0 } else { op_strides[d] })
            .collect();
        BatchIndex { strides, shape: batch.to_vec(), full: padded == batch }
    }

    fn is_full(&self) -> bool {
        self.full
    }

    fn offset(&self, flat: usize) -> usize {
        let mut rem = flat;
        let mut off = 0usize;
        for d in (0..self.shape.len()).rev() {
            let c = rem % self.shape[d];
            rem /= self.shape[d];
            off += c * self.strides[d];
        }
        off
    }
}

fn broadcast_zip<T: Scalar>(
    a: &[T],
    sa: &[usize],
    b: &[T],
    sb: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let rank = out_shape.len();
    let stra = strides_of(sa);
    let strb = strides_of(sb);
    let eff_a: Vec<usize> = (0..rank).map(|d| if sa[d] == 1 { 0 } else { stra[d] }).collect();
    let eff_b: Vec<usize> = (0..rank).map(|d| if sb[d] == 1 { 0 } else { strb[d] }).collect();
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(a[ia], b[ib]));
        let mut d = rank;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            counter[d] += 1;
            ia += eff_a[d];
            ib += eff_b[d];
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
            ia -= eff_a[d] * out_shape[d];
            ib -= eff_b[d] * out_shape[d];
        }
    }
    out
}

/// grad_parent += grad_out, summing over axes where the parent had size 1.
fn accumulate_broadcast<T: Scalar>(
    parent_grad: &mut [T],
    parent_shape: &[usize],
    g: &[T],
    out_shape: &[usize],
) {
    if parent_shape == out_shape {
        for (x, &gi) in parent_grad.iter_mut().zip(g) {
            *x = *x + gi;
        }
        return;
    }
    let rank = out_shape.len();
    let strp = strides_of(parent_shape);
    let eff: Vec<usize> =
        (0..rank).map(|d| if parent_shape[d] == 1 { 0 } else { strp[d] }).collect();
    let mut counter = vec![0usize; rank];
    let mut ip = 0usize;
    for &gi in g {
        parent_grad[ip] = parent_grad[ip] + gi;
        let mut d = rank;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            counter[d] += 1;
            ip += eff[d];
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
            ip -= eff[d] * out_shape[d];
        }
    }
}
