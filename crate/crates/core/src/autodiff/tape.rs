use std::cell::Cell;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Lower clamp distance from ±1 used when differentiating `arccos`.
pub const ARCCOS_CLAMP: f64 = 1e-7;
/// Guard on denominators in the backward rules of `div` and `sqrt`.
pub const BACKWARD_EPS: f64 = 1e-12;
/// Variance floor inside `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

thread_local! {
    static ARCCOS_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Makes the `arccos` backward rule on this thread return the wrong sign.
///
/// Only meant for demonstrating that the gradient checker catches a broken
/// backward rule.
#[doc(hidden)]
pub fn set_arccos_backward_fault(enabled: bool) {
    ARCCOS_FAULT.with(|f| f.set(enabled));
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Exp,
    Log,
    Sqrt,
    Arccos,
    Relu,
    Gelu,
}

impl UnKind {
    fn name(self) -> &'static str {
        match self {
            UnKind::Exp => "exp",
            UnKind::Log => "log",
            UnKind::Sqrt => "sqrt",
            UnKind::Arccos => "arccos",
            UnKind::Relu => "relu",
            UnKind::Gelu => "gelu",
        }
    }
}

/// How an operand is laid out against a larger output shape.
#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    /// Operand equals the trailing dimensions of the output.
    Suffix(usize),
    /// Output flat index -> operand flat index.
    Map(Vec<usize>),
}

impl Broadcast {
    fn plan(src: &[usize], dst: &[usize]) -> Option<Broadcast> {
        if src == dst {
            return Some(Broadcast::Same);
        }
        if src.len() > dst.len() {
            return None;
        }
        let offset = dst.len() - src.len();
        if src == &dst[offset..] {
            return Some(Broadcast::Suffix(src.iter().product()));
        }
        let mut strides = vec![0usize; dst.len()];
        let mut stride = 1;
        for (j, &d) in src.iter().enumerate().rev() {
            let out_dim = dst[j + offset];
            if d == out_dim {
                strides[j + offset] = stride;
            } else if d != 1 {
                return None;
            }
            stride *= d;
        }
        let total: usize = dst.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut counter = vec![0usize; dst.len()];
        let mut src_index = 0usize;
        for _ in 0..total {
            map.push(src_index);
            for axis in (0..dst.len()).rev() {
                counter[axis] += 1;
                src_index += strides[axis];
                if counter[axis] < dst[axis] {
                    break;
                }
                src_index -= strides[axis] * dst[axis];
                counter[axis] = 0;
            }
        }
        Some(Broadcast::Map(map))
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(len) => i % len,
            Broadcast::Map(map) => map[i],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    AddScalar {
        a: Var,
    },
    MulScalar {
        a: Var,
        factor: f64,
    },
    Unary {
        kind: UnKind,
        a: Var,
    },
    Sum {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mean {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Max {
        a: Var,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    LogSoftmax {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Gather {
        a: Var,
        indices: Vec<usize>,
        outer: usize,
        rows: usize,
        inner: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        source: Vec<usize>,
    },
    Broadcast {
        a: Var,
        plan: Broadcast,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitives in execution order so that [`Tape::backward`] can
/// replay them in reverse.
///
/// A tape belongs to one forward/backward pair. Parameters are placed on it
/// with [`Tape::var`]; the backing buffers are shared, not copied.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves recorded by [`Tape::var`].
///
/// Buffers of intermediate values are released during the reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when `v` does not influence the
    /// loss or was recorded as a constant.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[inline]
fn guard(x: f64) -> f64 {
    if x.abs() < BACKWARD_EPS {
        BACKWARD_EPS.copysign(x)
    } else {
        x
    }
}

/// `c (+)= op(a) * op(b)` for row-major operands; `a` is `m x k` and `b` is
/// `k x n` after the optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the m*k, k*n and m*n elements
    // addressed by these row/column strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is wanted.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product of `[m, k] x [k, n]`, or a batched product of
    /// `[B, m, k] x [B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.record(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, batch, m, k, n },
            &[a, b],
        )
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::plan(self.shape(b), self.shape(a)).ok_or_else(|| {
            Error::shape(name, format!("{:?} does not broadcast to {:?}", self.shape(b), self.shape(a)))
        })?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let f: fn(f64, f64) -> f64 = match kind {
            BinKind::Add => |x, y| x + y,
            BinKind::Sub => |x, y| x - y,
            BinKind::Mul => |x, y| x * y,
            BinKind::Div => |x, y| x / y,
        };
        let out: Vec<f64> = match &plan {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            _ => va.iter().enumerate().map(|(i, &x)| f(x, vb[plan.index(i)])).collect(),
        };
        let shape = self.shape(a).to_vec();
        self.record(name, Tensor::from_parts(shape, out), Op::Binary { kind, a, b, plan }, &[a, b])
    }

    /// `a + b`, with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, "div", a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.record("add_scalar", Tensor::from_parts(shape, out), Op::AddScalar { a }, &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.record("mul_scalar", Tensor::from_parts(shape, out), Op::MulScalar { a, factor }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            UnKind::Exp => f64::exp,
            UnKind::Log => f64::ln,
            UnKind::Sqrt => f64::sqrt,
            UnKind::Arccos => |x| x.clamp(-1.0, 1.0).acos(),
            UnKind::Relu => |x| x.max(0.0),
            UnKind::Gelu => gelu,
        };
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.record(kind.name(), Tensor::from_parts(shape, out), Op::Unary { kind, a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Sqrt, a)
    }

    /// `arccos` with inputs clipped to [-1, 1]. The derivative is taken at
    /// the input clamped to [-1 + 1e-7, 1 - 1e-7], where it stays finite.
    pub fn arccos(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Arccos, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Relu, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Gelu, a)
    }

    // ---- reductions -----------------------------------------------------

    fn reduced_shape(&self, a: Var, axis: usize, op: &'static str) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((out_shape, outer, len, inner))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduced_shape(a, axis, "sum")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..len {
                let row = &x[(o * len + r) * inner..(o * len + r + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        self.record("sum", Tensor::from_parts(shape, out), Op::Sum { a, outer, len, inner }, &[a])
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n])?;
        self.sum(flat, 0)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduced_shape(a, axis, "mean")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..len {
                let row = &x[(o * len + r) * inner..(o * len + r + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let scale = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        self.record("mean", Tensor::from_parts(shape, out), Op::Mean { a, outer, len, inner }, &[a])
    }

    /// Maximum over `axis`. Ties resolve to the lowest index, which is the
    /// only position that receives gradient.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduced_shape(a, axis, "max")?;
        let x = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for r in 0..len {
                let row = &x[(o * len + r) * inner..(o * len + r + 1) * inner];
                let best = &mut out[o * inner..(o + 1) * inner];
                let arg = &mut argmax[o * inner..(o + 1) * inner];
                for c in 0..inner {
                    if row[c] > best[c] {
                        best[c] = row[c];
                        arg[c] = r;
                    }
                }
            }
        }
        self.record(
            "max",
            Tensor::from_parts(shape, out),
            Op::Max { a, len, inner, argmax },
            &[a],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let cols = *self.shape(a).last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let shape = self.shape(a).to_vec();
        self.record("softmax", Tensor::from_parts(shape, out), Op::Softmax { a, cols }, &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let cols = *self.shape(a).last().ok_or_else(|| Error::shape("log_softmax", "scalar input"))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(a).to_vec();
        self.record("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax { a, cols }, &[a])
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// variance, then applies a per-feature gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let cols = *self.shape(x).last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [cols] || self.shape(offset) != [cols] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine params {:?}/{:?} for width {cols}", self.shape(gain), self.shape(offset)),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(offset).data();
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        self.record(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, offset, cols, xhat, inv_std },
            &[x, gain, offset],
        )
    }

    // ---- structure ------------------------------------------------------

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            out_shape[axis] += s[axis];
            chunks.push(s[axis..].iter().product::<usize>());
        }
        let row: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &chunk) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.record(
            "concat",
            Tensor::from_parts(out_shape, out),
            Op::Concat { parts: parts.to_vec(), outer, chunks },
            parts,
        )
    }

    /// Selects entries along `axis` by index (repeats allowed).
    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("gather", format!("axis {axis} out of range for {shape:?}")));
        }
        if indices.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        let (outer, rows, inner) = split_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather", format!("index {bad} out of range for axis length {rows}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * rows + i) * inner;
                out.extend_from_slice(&x[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.record(
            "gather",
            Tensor::from_parts(out_shape, out),
            Op::Gather { a, indices: indices.to_vec(), outer, rows, inner },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.record("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, axis0: usize, axis1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        if axis0 >= rank || axis1 >= rank {
            return Err(Error::shape("transpose", format!("axes ({axis0}, {axis1}) for {shape:?}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(axis0, axis1);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total: usize = shape.iter().product();
        let mut source = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut idx = 0usize;
        for _ in 0..total {
            source.push(idx);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                idx += strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                idx -= strides[ax] * out_shape[ax];
                counter[ax] = 0;
            }
        }
        let x = self.value(a).data();
        let out: Vec<f64> = source.iter().map(|&i| x[i]).collect();
        self.record("transpose", Tensor::from_parts(out_shape, out), Op::Permute { a, source }, &[a])
    }

    /// Repeats `a` along size-1 or missing leading axes to reach `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let plan = Broadcast::plan(self.shape(a), &shape).ok_or_else(|| {
            Error::shape("broadcast", format!("{:?} -> {shape:?}", self.shape(a)))
        })?;
        let x = self.value(a).data();
        let total: usize = shape.iter().product();
        let out: Vec<f64> = (0..total).map(|i| x[plan.index(i)]).collect();
        self.record("broadcast", Tensor::from_parts(shape, out), Op::Broadcast { a, plan }, &[a])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
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
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..*batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..*batch {
                        gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Binary { kind, a, b, plan } => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    match kind {
                        BinKind::Add | BinKind::Sub => ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi),
                        BinKind::Mul => {
                            for i in 0..g.len() {
                                ga[i] += g[i] * vb[plan.index(i)];
                            }
                        }
                        BinKind::Div => {
                            for i in 0..g.len() {
                                ga[i] += g[i] / guard(vb[plan.index(i)]);
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        let j = plan.index(i);
                        gb[j] += match kind {
                            BinKind::Add => g[i],
                            BinKind::Sub => -g[i],
                            BinKind::Mul => g[i] * va[i],
                            BinKind::Div => {
                                let d = guard(vb[j]);
                                -g[i] * va[i] / (d * d)
                            }
                        };
                    }
                }
            }
            Op::AddScalar { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                }
            }
            Op::MulScalar { a, factor } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * factor);
                }
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let faulty = matches!(kind, UnKind::Arccos) && ARCCOS_FAULT.with(Cell::get);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            UnKind::Exp => out[i],
                            UnKind::Log => 1.0 / guard(x[i]),
                            UnKind::Sqrt => 0.5 / (out[i] + BACKWARD_EPS),
                            UnKind::Arccos => {
                                let c = x[i].clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP);
                                let d = -1.0 / (1.0 - c * c).sqrt();
                                if faulty {
                                    -d
                                } else {
                                    d
                                }
                            }
                            UnKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Gelu => gelu_grad(x[i]),
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Sum { a, outer, len, inner } | Op::Mean { a, outer, len, inner } => {
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / *len as f64
                } else {
                    1.0
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..*outer {
                        let gsrc = &g[o * inner..(o + 1) * inner];
                        for r in 0..*len {
                            let dst = &mut ga[(o * len + r) * inner..(o * len + r + 1) * inner];
                            dst.iter_mut().zip(gsrc).for_each(|(x, gi)| *x += gi * scale);
                        }
                    }
                }
            }
            Op::Max { a, len, inner, argmax } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (j, (&r, gi)) in argmax.iter().zip(g).enumerate() {
                        let (o, c) = (j / inner, j % inner);
                        ga[(o * len + r) * inner + c] += gi;
                    }
                }
            }
            Op::Softmax { a, cols } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((y, gy), gx) in out.chunks(*cols).zip(g.chunks(*cols)).zip(ga.chunks_mut(*cols)) {
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for c in 0..*cols {
                            gx[c] += y[c] * (gy[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a, cols } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((y, gy), gx) in out.chunks(*cols).zip(g.chunks(*cols)).zip(ga.chunks_mut(*cols)) {
                        let total: f64 = gy.iter().sum();
                        for c in 0..*cols {
                            gx[c] += gy[c] - y[c].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, offset, cols, xhat, inv_std } => {
                let cols = *cols;
                let gv = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(go) = self.slot(grads, *offset) {
                    for gr in g.chunks(cols) {
                        go.iter_mut().zip(gr).for_each(|(o, gi)| *o += gi);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = cols as f64;
                    let mut dh = vec![0.0; cols];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            dh[c] = gr[c] * gv[c];
                            sum_dh += dh[c];
                            sum_dh_h += dh[c] * hr[c];
                        }
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] += inv / n * (n * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Concat { parts, outer, chunks } => {
                let row: usize = chunks.iter().sum();
                let mut start = 0;
                for (&p, &chunk) in parts.iter().zip(chunks) {
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * row + start..o * row + start + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, gi)| *x += gi);
                        }
                    }
                    start += chunk;
                }
            }
            Op::Gather { a, indices, outer, rows, inner } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let mut src = 0;
                    for o in 0..*outer {
                        for &i in indices {
                            let dst = (o * rows + i) * inner;
                            ga[dst..dst + inner]
                                .iter_mut()
                                .zip(&g[src..src + inner])
                                .for_each(|(x, gi)| *x += gi);
                            src += inner;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                }
            }
            Op::Permute { a, source } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (&s, gi) in source.iter().zip(g) {
                        ga[s] += gi;
                    }
                }
            }
            Op::Broadcast { a, plan } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[plan.index(i)] += gi;
                    }
                }
            }
        }
    }
}
