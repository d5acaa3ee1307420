//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and enough
//! saved state to compute the vector-Jacobian product. [`Tape::backward`]
//! walks the nodes in reverse order exactly once.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Bcast};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Shift { a: Var },
    Neg { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Pow { a: Var, p: f64 },
    Relu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize { a: Var, norms: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, map: Vec<usize> },
    BroadcastTo { a: Var },
    Sum { a: Var },
    SumAxis { a: Var, axis: usize },
    IndexSelect { a: Var, axis: usize, indices: Vec<usize> },
    BatchGather { a: Var, indices: Vec<Vec<usize>> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Moves the gradient of `v` into `tensor.grad`.
    pub fn write_into(&mut self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.take(v) {
            Some(g) => tensor.set_grad(g),
            None => {
                tensor.clear_grad();
                Ok(())
            }
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (x, y) in d.iter_mut().zip(src) {
                *x += y;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => {
            for (x, y) in d.iter_mut().zip(&src) {
                *x += y;
            }
        }
        None => *dst = Some(src),
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies the value of `v` out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("node shape is consistent")
    }

    /// Records a leaf; it participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product over the last two axes.
    ///
    /// `b` may be rank 2 (shared across all leading axes of `a`) or carry
    /// the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && batch_a != &sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = batch_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let va = self.value(a);
            let vb = self.value(b);
            if shared_rhs {
                kernels::gemm_nn(batch * m, k, n, va, vb, &mut out);
            } else {
                for t in 0..batch {
                    kernels::gemm_nn(
                        m,
                        k,
                        n,
                        &va[t * m * k..(t + 1) * m * k],
                        &vb[t * k * n..(t + 1) * k * n],
                        &mut out[t * m * n..(t + 1) * m * n],
                    );
                }
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, shared_rhs }, ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(a).to_vec(),
                reason: "rank < 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: sa,
                reason: format!("bad axes {axes:?}"),
            });
        }
        let map = kernels::permute_map(&sa, axes);
        let va = self.value(a);
        let out: Vec<f64> = map.iter().map(|&j| va[j]).collect();
        let shape = axes.iter().map(|&x| sa[x]).collect();
        let ng = self.requires_grad(a);
        Ok(self.push(shape, out, Op::Permute { a, map }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Rc::clone(&self.nodes[a.0].value);
        let needs_grad = self.requires_grad(a);
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Reshape { a },
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match kernels::broadcast_shape(&sa, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: sa,
                    rhs: shape.to_vec(),
                })
            }
        }
        let plan = Bcast::plan(&sa, shape);
        let va = self.value(a);
        let out: Vec<f64> = (0..numel(shape)).map(|i| va[plan.index(i)]).collect();
        let ng = self.requires_grad(a);
        Ok(self.push(shape.to_vec(), out, Op::BroadcastTo { a }, ng))
    }

    // ---------------------------------------------------------------- elementwise binary

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = kernels::broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let n = numel(&shape);
        let va = self.value(a);
        let vb = self.value(b);
        let out = if sa == sb {
            va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let pa = Bcast::plan(&sa, &shape);
            let pb = Bcast::plan(&sb, &shape);
            (0..n).map(|i| f(va[pa.index(i)], vb[pb.index(i)])).collect()
        };
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    // ---------------------------------------------------------------- elementwise unary

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.requires_grad(a);
        self.push(shape, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Shift { a })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Pow { a, p })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.powf(a, 2.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu { a },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        // 1 / (1 + exp(-x))
        let n = self.neg(a);
        let e = self.exp(n);
        let d = self.add_scalar(e, 1.0);
        let one = self.constant(&[], vec![1.0])?;
        self.div(one, d)
    }

    // ---------------------------------------------------------------- normalizations

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let va = self.value(a);
        if va.iter().any(|x| x.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = kernels::lanes(&shape, axis);
        let mut out = vec![0.0; va.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(va[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (va[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        let ng = self.requires_grad(a);
        Ok(self.push(shape, out, Op::Softmax { a, axis }, ng))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let axis = self.shape(a).len().saturating_sub(1);
        self.softmax(a, axis)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::InvalidShape {
            op: "layer_norm",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let vx = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = vx.len() / d;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or(TensorError::InvalidShape {
            op: "l2_normalize",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        let va = self.value(a);
        let rows = if d == 0 { 0 } else { va.len() / d };
        let mut norms = vec![0.0; rows];
        let mut out = vec![0.0; va.len()];
        for r in 0..rows {
            let row = &va[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[r] = n;
            for j in 0..d {
                out[r * d + j] = row[j] / n;
            }
        }
        let ng = self.requires_grad(a);
        Ok(self.push(shape, out, Op::L2Normalize { a, norms }, ng))
    }

    // ---------------------------------------------------------------- structural

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::lanes(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(p)[o * block..(o + 1) * block]);
            }
        }
        let ng = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start > end || end > sa[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: sa,
                reason: format!("range {start}..{end} on axis {axis}"),
            });
        }
        let (outer, len, inner) = kernels::lanes(&sa, axis);
        let va = self.value(a);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&va[base + start * inner..base + end * inner]);
        }
        let mut shape = sa;
        shape[axis] = end - start;
        let ng = self.requires_grad(a);
        Ok(self.push(shape, out, Op::Slice { a, axis, start }, ng))
    }

    /// Selects `indices` along `axis`; indices may repeat.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(TensorError::InvalidShape {
                op: "index_select",
                shape: sa,
                reason: format!("axis {axis} out of range"),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= sa[axis]) {
            return Err(TensorError::IndexOutOfRange {
                op: "index_select",
                index: bad,
                len: sa[axis],
            });
        }
        let (outer, len, inner) = kernels::lanes(&sa, axis);
        let va = self.value(a);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = o * len * inner + i * inner;
                out.extend_from_slice(&va[s..s + inner]);
            }
        }
        let mut shape = sa;
        shape[axis] = indices.len();
        let ng = self.requires_grad(a);
        Ok(self.push(
            shape,
            out,
            Op::IndexSelect {
                a,
                axis,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Per-batch selection along axis 1: `out[b, j] = a[b, indices[b][j]]`.
    pub fn batch_gather(&mut self, a: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 || indices.len() != sa[0] {
            return Err(TensorError::InvalidShape {
                op: "batch_gather",
                shape: sa,
                reason: format!("{} index rows", indices.len()),
            });
        }
        let width = indices[0].len();
        if indices.iter().any(|r| r.len() != width) {
            return Err(TensorError::InvalidShape {
                op: "batch_gather",
                shape: sa,
                reason: "ragged index rows".into(),
            });
        }
        let t = sa[1];
        let inner: usize = sa[2..].iter().product();
        let va = self.value(a);
        let mut out = Vec::with_capacity(sa[0] * width * inner);
        for (b, row) in indices.iter().enumerate() {
            for &i in row {
                if i >= t {
                    return Err(TensorError::IndexOutOfRange {
                        op: "batch_gather",
                        index: i,
                        len: t,
                    });
                }
                let s = (b * t + i) * inner;
                out.extend_from_slice(&va[s..s + inner]);
            }
        }
        let mut shape = sa;
        shape[1] = width;
        let ng = self.requires_grad(a);
        Ok(self.push(
            shape,
            out,
            Op::BatchGather {
                a,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.requires_grad(a);
        self.push(Vec::new(), vec![s], Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(TensorError::InvalidShape {
                op: "sum_axis",
                shape: sa,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = kernels::lanes(&sa, axis);
        let va = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += va[base + i];
                }
            }
        }
        let mut shape = sa;
        shape[axis] = 1;
        let ng = self.requires_grad(a);
        Ok(self.push(shape, out, Op::SumAxis { a, axis }, ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).unwrap_or(&1) as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = &self.nodes[loss.0].shape;
        if numel(loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_rhs } => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                if self.ng(*a) {
                    let mut da = vec![0.0; va.len()];
                    if *shared_rhs {
                        kernels::gemm_nt(batch * m, n, k, g, vb, &mut da);
                    } else {
                        for t in 0..batch {
                            kernels::gemm_nt(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                &vb[t * k * n..(t + 1) * k * n],
                                &mut da[t * m * k..(t + 1) * m * k],
                            );
                        }
                    }
                    add_owned(&mut grads[a.0], da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; vb.len()];
                    if *shared_rhs {
                        kernels::gemm_tn(batch * m, k, n, va, g, &mut db);
                    } else {
                        for t in 0..batch {
                            kernels::gemm_tn(
                                m,
                                k,
                                n,
                                &va[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut db[t * k * n..(t + 1) * k * n],
                            );
                        }
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !self.ng(v) {
                        continue;
                    }
                    let sv = &self.nodes[v.0].shape;
                    let plan = Bcast::plan(sv, &node.shape);
                    let mut r = plan.reduce(g, numel(sv));
                    if s < 0.0 {
                        r.iter_mut().for_each(|x| *x = -*x);
                    }
                    add_owned(&mut grads[v.0], r);
                }
            }
            Op::Mul { a, b } | Op::Div { a, b } => {
                let is_div = matches!(node.op, Op::Div { .. });
                let na = &self.nodes[a.0];
                let nb = &self.nodes[b.0];
                let pa = Bcast::plan(&na.shape, &node.shape);
                let pb = Bcast::plan(&nb.shape, &node.shape);
                let n = g.len();
                if self.ng(*a) {
                    let full: Vec<f64> = (0..n)
                        .map(|i| {
                            let y = nb.value[pb.index(i)];
                            if is_div {
                                g[i] / y
                            } else {
                                g[i] * y
                            }
                        })
                        .collect();
                    add_owned(&mut grads[a.0], pa.reduce(&full, na.value.len()));
                }
                if self.ng(*b) {
                    let full: Vec<f64> = (0..n)
                        .map(|i| {
                            let x = na.value[pa.index(i)];
                            if is_div {
                                let y = nb.value[pb.index(i)];
                                -g[i] * x / (y * y)
                            } else {
                                g[i] * x
                            }
                        })
                        .collect();
                    add_owned(&mut grads[b.0], pb.reduce(&full, nb.value.len()));
                }
            }
            Op::Scale { a, c } => {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_owned(&mut grads[a.0], d);
            }
            Op::Shift { a } | Op::Reshape { a } => add_into(&mut grads[a.0], g),
            Op::Neg { a } => {
                let d: Vec<f64> = g.iter().map(|x| -x).collect();
                add_owned(&mut grads[a.0], d);
            }
            Op::Exp { a } => {
                let d: Vec<f64> = g.iter().zip(node.value.iter()).map(|(x, y)| x * y).collect();
                add_owned(&mut grads[a.0], d);
            }
            Op::Log { a } => {
                let va = &self.nodes[a.0].value;
                let d: Vec<f64> = g.iter().zip(va.iter()).map(|(x, y)| x / y).collect();
                add_owned(&mut grads[a.0], d);
            }
            Op::Pow { a, p } => {
                let va = &self.nodes[a.0].value;
                let d: Vec<f64> = g
                    .iter()
                    .zip(va.iter())
                    .map(|(x, y)| x * p * y.powf(p - 1.0))
                    .collect();
                add_owned(&mut grads[a.0], d);
            }
            Op::Relu { a } => {
                let va = &self.nodes[a.0].value;
                let d: Vec<f64> = g
                    .iter()
                    .zip(va.iter())
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                add_owned(&mut grads[a.0], d);
            }
            Op::Gelu { a } => {
                let va = &self.nodes[a.0].value;
                let d: Vec<f64> = g
                    .iter()
                    .zip(va.iter())
                    .map(|(gx, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gx * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                add_owned(&mut grads[a.0], d);
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = kernels::lanes(&node.shape, *axis);
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let k = base + j * inner;
                            d[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                add_owned(&mut grads[a.0], d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap_or(&1);
                let rows = xhat.len() / d;
                let gv = &self.nodes[gain.0].value;
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                            db[j] += g[r * d + j];
                        }
                    }
                    if self.ng(*gain) {
                        add_owned(&mut grads[gain.0], dg);
                    }
                    if self.ng(*bias) {
                        add_owned(&mut grads[bias.0], db);
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    let df = d as f64;
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            dx[r * d + j] = rstd[r] / df * (df * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    add_owned(&mut grads[x.0], dx);
                }
            }
            Op::L2Normalize { a, norms } => {
                let d = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                add_owned(&mut grads[a.0], dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = kernels::lanes(&node.shape, *axis);
                let total = node.shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis];
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&g[s..s + len * inner]);
                        }
                        add_owned(&mut grads[p.0], d);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = &self.nodes[a.0].shape;
                let (outer, len, inner) = kernels::lanes(sa, *axis);
                let w = node.shape[*axis];
                let mut d = vec![0.0; numel(sa)];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    d[dst..dst + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                add_owned(&mut grads[a.0], d);
            }
            Op::Permute { a, map } => {
                let mut d = vec![0.0; g.len()];
                for (gi, &j) in g.iter().zip(map) {
                    d[j] = *gi;
                }
                add_owned(&mut grads[a.0], d);
            }
            Op::BroadcastTo { a } => {
                let sa = &self.nodes[a.0].shape;
                let plan = Bcast::plan(sa, &node.shape);
                add_owned(&mut grads[a.0], plan.reduce(g, numel(sa)));
            }
            Op::Sum { a } => {
                let n = self.nodes[a.0].value.len();
                add_owned(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::SumAxis { a, axis } => {
                let sa = &self.nodes[a.0].shape;
                let (outer, len, inner) = kernels::lanes(sa, *axis);
                let mut d = vec![0.0; numel(sa)];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        d[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                add_owned(&mut grads[a.0], d);
            }
            Op::IndexSelect { a, axis, indices } => {
                let sa = &self.nodes[a.0].shape;
                let (outer, len, inner) = kernels::lanes(sa, *axis);
                let w = indices.len();
                let mut d = vec![0.0; numel(sa)];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = (o * w + j) * inner;
                        let dst = (o * len + i) * inner;
                        for t in 0..inner {
                            d[dst + t] += g[src + t];
                        }
                    }
                }
                add_owned(&mut grads[a.0], d);
            }
            Op::BatchGather { a, indices } => {
                let sa = &self.nodes[a.0].shape;
                let t = sa[1];
                let inner: usize = sa[2..].iter().product();
                let w = indices.first().map_or(0, Vec::len);
                let mut d = vec![0.0; numel(sa)];
                for (b, row) in indices.iter().enumerate() {
                    for (j, &i) in row.iter().enumerate() {
                        let src = (b * w + j) * inner;
                        let dst = (b * t + i) * inner;
                        for q in 0..inner {
                            d[dst + q] += g[src + q];
                        }
                    }
                }
                add_owned(&mut grads[a.0], d);
            }
        }
    }
}
