//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. [`Tape::backward`] walks the nodes in exact
//! reverse order, returns the gradients of all `requires_grad` leaves, and
//! clears the tape.

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::{check_shape, kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `a[..×k] · b[k×n]`, `a` flattened to rows.
    MatMul(Var, Var),
    /// `a[B×m×k] · b[B×k×n]`
    Bmm(Var, Var),
    /// Swap the last two axes.
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` matches the trailing axes of `a` and is repeated over the leading ones.
    AddBroadcast(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    Diagonal(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of the `requires_grad` leaves of a tape, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let s: T = c(0.797_884_560_802_865_4);
    let k: T = c(0.044_715);
    let half: T = c(0.5);
    let u = s * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = s * (T::one() + c::<T>(3.0) * k * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Copies the value of `v` out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let n = self.node(v);
        if !n.shape.is_empty() {
            return Err(Error::Contract(format!("expected scalar, got {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_need_grad(&op),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_need_grad(&self, op: &Op<T>) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Bmm(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b) => ng(a) || ng(b),
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Diagonal(x)
            | Op::L2Normalize { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. } => ng(x),
            Op::LayerNorm { x, gamma, beta, .. } => ng(x) || ng(gamma) || ng(beta),
            Op::Concat { inputs, .. } => inputs.iter().any(ng),
        }
    }

    /// Records a tensor as a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a gradient-free constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        Ok(self.constant(Tensor::zeros(shape)?))
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product `a[..×k] · b[k×n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.node(a).value.len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(&self.node(a).value, &self.node(b).value, &mut out, m, k, n);
        self.push("matmul", shape, out, Op::MatMul(a, b))
    }

    /// Batched matrix product `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        for i in 0..bs {
            kernels::matmul_acc(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push("bmm", vec![bs, m, n], out, Op::Bmm(a, b))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let r = s.len();
        let (m, n) = (s[r - 2], s[r - 1]);
        let batch = self.node(x).value.len() / (m * n);
        let src = &self.node(x).value;
        let mut out = Vec::with_capacity(src.len());
        for b in 0..batch {
            out.extend(kernels::transpose(&src[b * m * n..(b + 1) * m * n], m, n));
        }
        let mut shape = s;
        shape.swap(r - 2, r - 1);
        self.push("transpose", shape, out, Op::Transpose(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, shared queries).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let vb = &self.node(b).value;
        let n = vb.len();
        let out: Vec<T> = self
            .node(a)
            .value
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(vb).map(|(&x, &y)| x + y))
            .collect();
        self.push("add_broadcast", sa.to_vec(), out, Op::AddBroadcast(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.node(x).value.iter().map(|&v| v * factor).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, factor))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x).value.iter().map(|&v| gelu_parts(v).0).collect();
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap_or(&1);
        let mut out = self.node(x).value.clone();
        for row in out.chunks_exact_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push("softmax", s, out, Op::Softmax(x))
    }

    /// Log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap_or(&1);
        let mut out = self.node(x).value.clone();
        for row in out.chunks_exact_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push("log_softmax", s, out, Op::LogSoftmax(x))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", &s, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &s, self.shape(gamma)));
        }
        let (vx, g, b) = (
            &self.node(x).value,
            &self.node(gamma).value,
            &self.node(beta).value,
        );
        let rows = vx.len() / d;
        let dn: T = c(d as f64);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            s,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("l2_normalize", &s, &[]))?;
        let vx = &self.node(x).value;
        let mut norms = Vec::with_capacity(vx.len() / d);
        let mut out = Vec::with_capacity(vx.len());
        for (r, row) in vx.chunks_exact(d).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n.to_f64_lossy() < 1e-12 {
                return Err(Error::Degenerate {
                    row: r,
                    norm: n.to_f64_lossy(),
                });
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        self.push("l2_normalize", s, out, Op::L2Normalize { x, norms })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.node(x).value.iter().copied().sum();
        self.push("sum", vec![], vec![v], Op::Sum(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vals = &self.node(x).value;
        let v = vals.iter().copied().sum::<T>() / c(vals.len() as f64);
        self.push("mean", vec![], vec![v], Op::Mean(x))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("mean_axis", &s, &[axis]));
        }
        let (outer, n, inner) = axis_blocks(&s, axis);
        let vx = &self.node(x).value;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &vx[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let inv = T::one() / c(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s;
        shape.remove(axis);
        self.push("mean_axis", shape, out, Op::MeanAxis { x, axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel = check_shape(shape)?;
        if numel != self.node(x).value.len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.node(x).value.clone();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x))
    }

    /// Concatenation along `axis`; other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero inputs".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", &s0, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_blocks(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.node(v).value[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..start+len` along `axis`; rank is preserved.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_blocks(&s, axis);
        let vx = &self.node(x).value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&vx[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("slice", shape, out, Op::Slice { x, axis, start })
    }

    /// Selects rows of the leading axis (embedding-row gather).
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::shape("gather", &s, rows));
        }
        let inner: usize = s[1..].iter().product();
        let vx = &self.node(x).value;
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&vx[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        self.push(
            "gather",
            shape,
            out,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Leading diagonal of a matrix, length `min(m, n)`.
    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("diagonal", &s, &[]));
        }
        let k = s[0].min(s[1]);
        let vx = &self.node(x).value;
        let out = (0..k).map(|i| vx[i * s[1] + i]).collect();
        self.push("diagonal", vec![k], out, Op::Diagonal(x))
    }

    /// `[B×M×d] → [B·h × M × d/h]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (b, m, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let vx = &self.node(x).value;
        let mut out = vec![T::zero(); vx.len()];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..m {
                    let src = &vx[(bi * m + i) * d + h * dh..(bi * m + i) * d + (h + 1) * dh];
                    let dst = ((bi * heads + h) * m + i) * dh;
                    out[dst..dst + dh].copy_from_slice(src);
                }
            }
        }
        self.push("split_heads", vec![b * heads, m, dh], out, Op::SplitHeads { x, heads })
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        }
        let (bh, m, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dh * heads;
        let vx = &self.node(x).value;
        let mut out = vec![T::zero(); vx.len()];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..m {
                    let src = ((bi * heads + h) * m + i) * dh;
                    let dst = (bi * m + i) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&vx[src..src + dh]);
                }
            }
        }
        self.push("merge_heads", vec![b, m, d], out, Op::MergeHeads { x, heads })
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from the scalar `loss`, returns leaf gradients, and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if !self.shape(loss).is_empty() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..count).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.needs_grad) {
                (Op::Leaf, true) => Some(Tensor::from_parts(
                    n.shape.clone(),
                    g.unwrap_or_else(|| vec![T::zero(); n.value.len()]),
                )),
                _ => None,
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| -> &[T] { &self.nodes[v.0].value };
        let shp = |v: Var| -> &[usize] { &self.nodes[v.0].shape };
        let len = |v: Var| self.nodes[v.0].value.len();

        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = shp(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = len(*a) / k;
                if needs(*a) {
                    let bt = kernels::transpose(val(*b), k, n);
                    let ga = acc(grads, *a, m * k);
                    kernels::matmul_acc(gy, &bt, ga, m, n, k);
                }
                if needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    kernels::matmul_tn_acc(val(*a), gy, gb, m, k, n);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if needs(*a) {
                    let vb = val(*b);
                    let ga = acc(grads, *a, bs * m * k);
                    for t in 0..bs {
                        let bt = kernels::transpose(&vb[t * k * n..(t + 1) * k * n], k, n);
                        kernels::matmul_acc(
                            &gy[t * m * n..(t + 1) * m * n],
                            &bt,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if needs(*b) {
                    let va = val(*a);
                    let gb = acc(grads, *b, bs * k * n);
                    for t in 0..bs {
                        kernels::matmul_tn_acc(
                            &va[t * m * k..(t + 1) * m * k],
                            &gy[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                // gy has the transposed shape [.., n, m]
                let s = &node.shape;
                let r = s.len();
                let (n, m) = (s[r - 2], s[r - 1]);
                let batch = gy.len() / (m * n);
                let gx = acc(grads, *x, gy.len());
                for t in 0..batch {
                    let back = kernels::transpose(&gy[t * m * n..(t + 1) * m * n], n, m);
                    for (g, v) in gx[t * m * n..(t + 1) * m * n].iter_mut().zip(back) {
                        *g += v;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let g = acc(grads, v, gy.len());
                        g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    let g = acc(grads, *a, gy.len());
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                if needs(*b) {
                    let g = acc(grads, *b, gy.len());
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let vb = val(*b);
                    let g = acc(grads, *a, gy.len());
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(vb) {
                        *g += d * y;
                    }
                }
                if needs(*b) {
                    let va = val(*a);
                    let g = acc(grads, *b, gy.len());
                    for ((g, &d), &x) in g.iter_mut().zip(gy).zip(va) {
                        *g += d * x;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if needs(*a) {
                    let g = acc(grads, *a, gy.len());
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                if needs(*b) {
                    let n = len(*b);
                    let g = acc(grads, *b, n);
                    for chunk in gy.chunks_exact(n) {
                        g.iter_mut().zip(chunk).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Scale(x, f) => {
                let g = acc(grads, *x, gy.len());
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *f);
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                let g = acc(grads, *x, gy.len());
                for ((g, &d), &v) in g.iter_mut().zip(gy).zip(vx) {
                    *g += d * gelu_parts(v).1;
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                let g = acc(grads, *x, gy.len());
                for ((gr, dr), yr) in g
                    .chunks_exact_mut(n)
                    .zip(gy.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let dot: T = dr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                    for ((g, &d), &y) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += y * (d - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                let g = acc(grads, *x, gy.len());
                for ((gr, dr), yr) in g
                    .chunks_exact_mut(n)
                    .zip(gy.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let total: T = dr.iter().copied().sum();
                    for ((g, &d), &y) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += d - y.exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = val(*gamma);
                if needs(*gamma) {
                    let g = acc(grads, *gamma, d);
                    for (dr, hr) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                }
                if needs(*beta) {
                    let g = acc(grads, *beta, d);
                    for dr in gy.chunks_exact(d) {
                        g.iter_mut().zip(dr).for_each(|(g, &v)| *g += v);
                    }
                }
                if needs(*x) {
                    let dn: T = c(d as f64);
                    let g = acc(grads, *x, gy.len());
                    for (r, ((gr, dr), hr)) in g
                        .chunks_exact_mut(d)
                        .zip(gy.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = dr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = dr[j] * gv[j];
                            gr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                let g = acc(grads, *x, gy.len());
                for (r, ((gr, dr), yr)) in g
                    .chunks_exact_mut(d)
                    .zip(gy.chunks_exact(d))
                    .zip(y.chunks_exact(d))
                    .enumerate()
                {
                    let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((g, &dv), &yv) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += (dv - yv * dot) / norms[r];
                    }
                }
            }
            Op::Sum(x) => {
                let g = acc(grads, *x, len(*x));
                g.iter_mut().for_each(|g| *g += gy[0]);
            }
            Op::Mean(x) => {
                let n = len(*x);
                let d = gy[0] / c(n as f64);
                let g = acc(grads, *x, n);
                g.iter_mut().for_each(|g| *g += d);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = axis_blocks(shp(*x), *axis);
                let inv = T::one() / c(n as f64);
                let g = acc(grads, *x, outer * n * inner);
                for o in 0..outer {
                    let src = &gy[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        let dst = &mut g[(o * n + k) * inner..(o * n + k + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(g, &d)| *g += d * inv);
                    }
                }
            }
            Op::Reshape(x) => {
                let g = acc(grads, *x, gy.len());
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_blocks(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = shp(v)[*axis];
                    if needs(v) {
                        let g = acc(grads, v, outer * n * inner);
                        for o in 0..outer {
                            let src = &gy[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            g[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, &d)| *g += d);
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_blocks(shp(*x), *axis);
                let l = node.shape[*axis];
                let g = acc(grads, *x, outer * n * inner);
                for o in 0..outer {
                    let dst = &mut g[(o * n + start) * inner..(o * n + start + l) * inner];
                    dst.iter_mut()
                        .zip(&gy[o * l * inner..(o + 1) * l * inner])
                        .for_each(|(g, &d)| *g += d);
                }
            }
            Op::Gather { x, rows } => {
                let inner: usize = shp(*x)[1..].iter().product();
                let g = acc(grads, *x, len(*x));
                for (k, &r) in rows.iter().enumerate() {
                    g[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&gy[k * inner..(k + 1) * inner])
                        .for_each(|(g, &d)| *g += d);
                }
            }
            Op::Diagonal(x) => {
                let cols = shp(*x)[1];
                let g = acc(grads, *x, len(*x));
                for (i, &d) in gy.iter().enumerate() {
                    g[i * cols + i] += d;
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = shp(*x);
                let (b, m, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let g = acc(grads, *x, len(*x));
                for bi in 0..b {
                    for h in 0..*heads {
                        for i in 0..m {
                            let dst = (bi * m + i) * d + h * dh;
                            let src = ((bi * heads + h) * m + i) * dh;
                            g[dst..dst + dh]
                                .iter_mut()
                                .zip(&gy[src..src + dh])
                                .for_each(|(g, &v)| *g += v);
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = shp(*x);
                let (bh, m, dh) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let d = dh * heads;
                let g = acc(grads, *x, len(*x));
                for bi in 0..b {
                    for h in 0..*heads {
                        for i in 0..m {
                            let dst = ((bi * heads + h) * m + i) * dh;
                            let src = (bi * m + i) * d + h * dh;
                            g[dst..dst + dh]
                                .iter_mut()
                                .zip(&gy[src..src + dh])
                                .for_each(|(g, &v)| *g += v);
                        }
                    }
                }
            }
        }
    }
}
