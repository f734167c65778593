//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena of nodes; creation order is a valid
//! topological order, so backward is a single reverse sweep. Graphs are
//! single-threaded by design — build one per training step (or per inference
//! call when running frozen weights from several threads).

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::Tensor;
use crate::{NumericsError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Relu,
    Sin,
    Cos,
    Clamp { lo: f64, hi: f64 },
    MatMul,
    Transpose,
    SoftmaxLast,
    LayerNormLast { eps: f64 },
    AddVecLast,
    MulVecLast,
    Concat { axis: usize },
    SliceAxis { axis: usize, start: usize, end: usize },
    Reshape,
    GatherRows { indices: Arc<Vec<usize>> },
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    Conv2d { stride: usize, pad: usize },
    AvgPool2,
    UpsampleNearest2,
    WarpBilinear,
    SmoothL1,
}

struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Computation graph with recorded edges for reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

fn err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

/// `C = A·B + beta·C` on row-major buffers, with optional logical transposes.
///
/// `a` holds an `m×k` matrix (stored `k×m` when `ta`), `b` a `k×n` matrix
/// (stored `n×k` when `tb`), `c` is `m×n`.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits a shape into (elements before `axis`, size of `axis`, elements after).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Lays input patches out as an `(oh*ow) × (kh*kw*cin)` matrix (zero padding).
fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let cols = kh * kw * cin;
    let mut out = vec![0.0; oh * ow * cols];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * cols;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * cin;
                    let dst = row + (ky * kw + kx) * cin;
                    out[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, parents: Vec<usize>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, parents: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        parents.iter().any(|&p| nodes[p].requires_grad)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, vec![], true)
    }

    /// Non-differentiable leaf (targets, coordinate grids, masks).
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, vec![], false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    // ---- elementwise binary ----

    fn binary(&self, op: Op, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        if va.shape() != vb.shape() {
            return Err(err(
                name,
                format!("lhs {:?} vs rhs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data: Vec<f64> = match op {
            Op::Add => va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect(),
            Op::Sub => va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect(),
            Op::Mul => va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
            Op::Div => va.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect(),
            Op::SmoothL1 => va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| {
                    let d = x - y;
                    if d.abs() < 1.0 {
                        0.5 * d * d
                    } else {
                        d.abs() - 0.5
                    }
                })
                .collect(),
            _ => unreachable!(),
        };
        let req = self.requires(&[a.0, b.0]);
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        Ok(self.push(value, op, vec![a.0, b.0], req))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, "div", a, b)
    }

    /// Elementwise smooth-L1 (transition point 1): `0.5d²` for `|d|<1`, else `|d|−0.5`.
    pub fn smooth_l1(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::SmoothL1, "smooth_l1", a, b)
    }

    // ---- unary ----

    fn unary(&self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let va = self.nodes.borrow()[a.0].value.clone();
        let req = self.requires(&[a.0]);
        self.push(va.map(f), op, vec![a.0], req)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(Op::AddScalar, a, |x| x + c)
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(Op::MulScalar(c), a, |x| x * c)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// `c − x`, elementwise.
    pub fn rsub_scalar(&self, c: f64, a: Var) -> Var {
        self.add_scalar(self.mul_scalar(a, -1.0), c)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Op::Sigmoid, a, sigmoid)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(Op::Sin, a, f64::sin)
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(Op::Cos, a, f64::cos)
    }

    /// Elementwise clamp; gradient is zero where the input is outside `(lo, hi)`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(err(
                "matmul",
                format!("lhs {:?} vs rhs {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, 0.0, &mut out);
        let req = self.requires(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).expect("matmul shape"),
            Op::MatMul,
            vec![a.0, b.0],
            req,
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.clone();
        if va.rank() != 2 {
            return Err(err("transpose", format!("expected rank 2, got {:?}", va.shape())));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let src = va.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let req = self.requires(&[a.0]);
        Ok(self.push(
            Tensor::new(vec![n, m], out).expect("transpose shape"),
            Op::Transpose,
            vec![a.0],
            req,
        ))
    }

    // ---- normalization ----

    /// Softmax over the last axis; the row max is subtracted before exponentiation.
    pub fn softmax_last(&self, a: Var) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.clone();
        if va.rank() == 0 {
            return Err(err("softmax", "rank-0 input".into()));
        }
        let d = *va.shape().last().unwrap();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let req = self.requires(&[a.0]);
        Ok(self.push(
            Tensor::new(va.shape().to_vec(), out).expect("softmax shape"),
            Op::SoftmaxLast,
            vec![a.0],
            req,
        ))
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm_last(&self, a: Var, eps: f64) -> Result<Var> {
        let va = self.nodes.borrow()[a.0].value.clone();
        if va.rank() == 0 {
            return Err(err("layer_norm", "rank-0 input".into()));
        }
        let d = *va.shape().last().unwrap();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let req = self.requires(&[a.0]);
        Ok(self.push(
            Tensor::new(va.shape().to_vec(), out).expect("layer_norm shape"),
            Op::LayerNormLast { eps },
            vec![a.0],
            req,
        ))
    }

    fn vec_last(&self, op: Op, name: &'static str, x: Var, v: Var) -> Result<Var> {
        let (vx, vv) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.clone(), nodes[v.0].value.clone())
        };
        let d = match vx.shape().last() {
            Some(&d) => d,
            None => return Err(err(name, "rank-0 input".into())),
        };
        if vv.rank() != 1 || vv.shape()[0] != d {
            return Err(err(
                name,
                format!("input {:?} vs vector {:?}", vx.shape(), vv.shape()),
            ));
        }
        let vec = vv.data();
        let data: Vec<f64> = match op {
            Op::AddVecLast => vx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + vec[i % d])
                .collect(),
            Op::MulVecLast => vx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x * vec[i % d])
                .collect(),
            _ => unreachable!(),
        };
        let req = self.requires(&[x.0, v.0]);
        Ok(self.push(
            Tensor::new(vx.shape().to_vec(), data).expect("vec_last shape"),
            op,
            vec![x.0, v.0],
            req,
        ))
    }

    /// Adds a `[C]` vector to every last-axis row of `x` (bias add).
    pub fn add_vec_last(&self, x: Var, v: Var) -> Result<Var> {
        self.vec_last(Op::AddVecLast, "add_vec_last", x, v)
    }

    /// Multiplies every last-axis row of `x` by a `[C]` vector (scale).
    pub fn mul_vec_last(&self, x: Var, v: Var) -> Result<Var> {
        self.vec_last(Op::MulVecLast, "mul_vec_last", x, v)
    }

    // ---- shape ops ----

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(err("concat", "no inputs".into()));
        }
        let values: Vec<Tensor> = {
            let nodes = self.nodes.borrow();
            parts.iter().map(|v| nodes[v.0].value.clone()).collect()
        };
        let rank = values[0].rank();
        if axis >= rank {
            return Err(err("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for v in &values {
            if v.rank() != rank {
                return Err(err("concat", format!("mixed ranks {:?} vs {:?}", values[0].shape(), v.shape())));
            }
            for a in 0..rank {
                if a != axis && v.shape()[a] != values[0].shape()[a] {
                    return Err(err(
                        "concat",
                        format!("incompatible shapes {:?} vs {:?} on axis {a}", values[0].shape(), v.shape()),
                    ));
                }
            }
        }
        let mut shape = values[0].shape().to_vec();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = axis_split(&shape, axis);
        let total_axis = shape[axis];
        let mut out = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for v in &values {
            let s = v.shape()[axis];
            let src = v.data();
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * s * inner;
                out[dst_base..dst_base + s * inner].copy_from_slice(&src[src_base..src_base + s * inner]);
            }
            offset += s;
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let req = self.requires(&ids);
        Ok(self.push(
            Tensor::new(shape, out).expect("concat shape"),
            Op::Concat { axis },
            ids,
            req,
        ))
    }

    /// Contiguous range `[start, end)` along one axis.
    pub fn slice_axis(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let vx = self.nodes.borrow()[x.0].value.clone();
        if axis >= vx.rank() || start >= end || end > vx.shape()[axis] {
            return Err(err(
                "slice_axis",
                format!("range {start}..{end} on axis {axis} of {:?}", vx.shape()),
            ));
        }
        let (outer, dim, inner) = axis_split(vx.shape(), axis);
        let span = end - start;
        let mut out = vec![0.0; outer * span * inner];
        let src = vx.data();
        for o in 0..outer {
            let src_base = (o * dim + start) * inner;
            let dst_base = o * span * inner;
            out[dst_base..dst_base + span * inner].copy_from_slice(&src[src_base..src_base + span * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = span;
        let req = self.requires(&[x.0]);
        Ok(self.push(
            Tensor::new(shape, out).expect("slice shape"),
            Op::SliceAxis { axis, start, end },
            vec![x.0],
            req,
        ))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let vx = self.nodes.borrow()[x.0].value.clone();
        let v = vx.reshaped(shape).map_err(|e| err("reshape", e.to_string()))?;
        let req = self.requires(&[x.0]);
        Ok(self.push(v, Op::Reshape, vec![x.0], req))
    }

    /// Selects rows of a `[M, C]` matrix; rows may repeat.
    pub fn gather_rows(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let vx = self.nodes.borrow()[x.0].value.clone();
        if vx.rank() != 2 {
            return Err(err("gather_rows", format!("expected rank 2, got {:?}", vx.shape())));
        }
        let (m, c) = (vx.shape()[0], vx.shape()[1]);
        if indices.is_empty() {
            return Err(err("gather_rows", "empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(err("gather_rows", format!("index {bad} out of range for {m} rows")));
        }
        let src = vx.data();
        let mut out = vec![0.0; indices.len() * c];
        for (i, &row) in indices.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&src[row * c..(row + 1) * c]);
        }
        let req = self.requires(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), c], out).expect("gather shape"),
            Op::GatherRows {
                indices: Arc::new(indices.to_vec()),
            },
            vec![x.0],
            req,
        ))
    }

    // ---- reductions ----

    pub fn sum_all(&self, x: Var) -> Var {
        let vx = self.nodes.borrow()[x.0].value.clone();
        let s: f64 = vx.data().iter().sum();
        let req = self.requires(&[x.0]);
        self.push(Tensor::scalar(s), Op::SumAll, vec![x.0], req)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let vx = self.nodes.borrow()[x.0].value.clone();
        let s: f64 = vx.data().iter().sum();
        let req = self.requires(&[x.0]);
        self.push(
            Tensor::scalar(s / vx.numel() as f64),
            Op::MeanAll,
            vec![x.0],
            req,
        )
    }

    fn reduce_axis(&self, op: Op, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let vx = self.nodes.borrow()[x.0].value.clone();
        if axis >= vx.rank() {
            return Err(err(name, format!("axis {axis} out of range for {:?}", vx.shape())));
        }
        let (outer, dim, inner) = axis_split(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..dim {
                let base = (o * dim + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            for v in out.iter_mut() {
                *v /= dim as f64;
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let req = self.requires(&[x.0]);
        Ok(self.push(
            Tensor::new(shape, out).expect("reduce shape"),
            op,
            vec![x.0],
            req,
        ))
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(Op::SumAxis { axis }, "sum_axis", x, axis, false)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(Op::MeanAxis { axis }, "mean_axis", x, axis, true)
    }

    // ---- spatial ops ----

    /// 2-D convolution: input `[H,W,Cin]`, kernel `[kh,kw,Cin,Cout]`, zero padding.
    pub fn conv2d(&self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vk) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.clone(), nodes[kernel.0].value.clone())
        };
        if vx.rank() != 3 || vk.rank() != 4 {
            return Err(err(
                "conv2d",
                format!("input {:?} (want rank 3), kernel {:?} (want rank 4)", vx.shape(), vk.shape()),
            ));
        }
        let (h, w, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (kh, kw, kcin, cout) = (vk.shape()[0], vk.shape()[1], vk.shape()[2], vk.shape()[3]);
        if kcin != cin {
            return Err(err(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(err(
                "conv2d",
                format!("kernel {kh}x{kw} too large for {h}x{w} input with pad {pad}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let col = im2col(vx.data(), h, w, cin, kh, kw, stride, pad, oh, ow);
        let mut out = vec![0.0; oh * ow * cout];
        gemm(oh * ow, kh * kw * cin, cout, &col, false, vk.data(), false, 0.0, &mut out);
        let req = self.requires(&[x.0, kernel.0]);
        Ok(self.push(
            Tensor::new(vec![oh, ow, cout], out).expect("conv shape"),
            Op::Conv2d { stride, pad },
            vec![x.0, kernel.0],
            req,
        ))
    }

    /// 2×2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let vx = self.nodes.borrow()[x.0].value.clone();
        if vx.rank() != 3 || vx.shape()[0] % 2 != 0 || vx.shape()[1] % 2 != 0 {
            return Err(err(
                "avg_pool2",
                format!("expected [H,W,C] with even H,W, got {:?}", vx.shape()),
            ));
        }
        let (h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let src = vx.data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += src[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                        }
                    }
                    out[(oy * ow + ox) * c + ch] = 0.25 * s;
                }
            }
        }
        let req = self.requires(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![oh, ow, c], out).expect("pool shape"),
            Op::AvgPool2,
            vec![x.0],
            req,
        ))
    }

    /// Nearest-neighbor 2× upsampling of an `[H,W,C]` map.
    pub fn upsample_nearest2(&self, x: Var) -> Result<Var> {
        let vx = self.nodes.borrow()[x.0].value.clone();
        if vx.rank() != 3 {
            return Err(err("upsample_nearest2", format!("expected [H,W,C], got {:?}", vx.shape())));
        }
        let (h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let src = vx.data();
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for x_ in 0..2 * w {
                let s = ((y / 2) * w + x_ / 2) * c;
                let d = (y * 2 * w + x_) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let req = self.requires(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![2 * h, 2 * w, c], out).expect("upsample shape"),
            Op::UpsampleNearest2,
            vec![x.0],
            req,
        ))
    }

    /// Samples `features` (`[H,W,C]`) at float positions `pos` (`[Ho,Wo,2]`,
    /// last axis is `(x, y)` in feature-cell units) with bilinear interpolation.
    /// Positions are clamped to the border; clamped coordinates get zero
    /// position-gradient.
    pub fn warp_bilinear(&self, features: Var, pos: Var) -> Result<Var> {
        let (vf, vp) = {
            let nodes = self.nodes.borrow();
            (nodes[features.0].value.clone(), nodes[pos.0].value.clone())
        };
        if vf.rank() != 3 || vp.rank() != 3 || vp.shape()[2] != 2 {
            return Err(err(
                "warp_bilinear",
                format!("features {:?} (want [H,W,C]), pos {:?} (want [Ho,Wo,2])", vf.shape(), vp.shape()),
            ));
        }
        let (h, w, c) = (vf.shape()[0], vf.shape()[1], vf.shape()[2]);
        let (oh, ow) = (vp.shape()[0], vp.shape()[1]);
        let f = vf.data();
        let p = vp.data();
        let mut out = vec![0.0; oh * ow * c];
        for i in 0..oh * ow {
            let x = p[i * 2].clamp(0.0, (w - 1) as f64);
            let y = p[i * 2 + 1].clamp(0.0, (h - 1) as f64);
            let x0 = (x.floor() as usize).min(w.saturating_sub(2));
            let y0 = (y.floor() as usize).min(h.saturating_sub(2));
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (x - x0 as f64, y - y0 as f64);
            for ch in 0..c {
                let f00 = f[(y0 * w + x0) * c + ch];
                let f01 = f[(y0 * w + x1) * c + ch];
                let f10 = f[(y1 * w + x0) * c + ch];
                let f11 = f[(y1 * w + x1) * c + ch];
                out[i * c + ch] = f00 * (1.0 - ax) * (1.0 - ay)
                    + f01 * ax * (1.0 - ay)
                    + f10 * (1.0 - ax) * ay
                    + f11 * ax * ay;
            }
        }
        let req = self.requires(&[features.0, pos.0]);
        Ok(self.push(
            Tensor::new(vec![oh, ow, c], out).expect("warp shape"),
            Op::WarpBilinear,
            vec![features.0, pos.0],
            req,
        ))
    }

    // ---- backward ----

    /// Clears all recorded gradients.
    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Gradient of the most recent `backward` root with respect to `v`.
    pub fn grad_of(&self, v: Var) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        match &node.grad {
            Some(g) => Ok(Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape")),
            None if node.requires_grad => Ok(Tensor::zeros(node.value.shape())),
            None => Err(NumericsError::NoGradient),
        }
    }

    /// Reverse sweep from a scalar root; accumulates gradients on every node
    /// that (transitively) requires them.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root_id = root.0;
        if nodes[root_id].value.numel() != 1 {
            return Err(NumericsError::NonScalarRoot {
                shape: nodes[root_id].value.shape().to_vec(),
            });
        }
        if !nodes[root_id].requires_grad {
            return Ok(()); // purely constant graph: all gradients are zero
        }
        nodes[root_id].grad = Some(vec![1.0]);
        for id in (0..=root_id).rev() {
            if nodes[id].grad.is_none() || !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let op = nodes[id].op.clone();
            let parents = nodes[id].parents.clone();
            let value = nodes[id].value.clone();
            let upstream = nodes[id].grad.take().expect("checked above");
            backprop(&mut nodes, &op, &parents, &value, &upstream);
            nodes[id].grad = Some(upstream);
        }
        Ok(())
    }
}

/// Adds `contrib` into the gradient buffer of node `p`.
fn accumulate(nodes: &mut [Node], p: usize, contrib: impl FnOnce(&mut [f64])) {
    if !nodes[p].requires_grad {
        return;
    }
    let numel = nodes[p].value.numel();
    let mut buf = nodes[p].grad.take().unwrap_or_else(|| vec![0.0; numel]);
    contrib(&mut buf);
    nodes[p].grad = Some(buf);
}

fn backprop(nodes: &mut [Node], op: &Op, parents: &[usize], value: &Tensor, up: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::Add => {
            for &p in &parents[..2] {
                accumulate(nodes, p, |g| {
                    for (gi, ui) in g.iter_mut().zip(up) {
                        *gi += ui;
                    }
                });
            }
        }
        Op::Sub => {
            accumulate(nodes, parents[0], |g| {
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += ui;
                }
            });
            accumulate(nodes, parents[1], |g| {
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi -= ui;
                }
            });
        }
        Op::Mul => {
            let a = nodes[parents[0]].value.clone();
            let b = nodes[parents[1]].value.clone();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    g[i] += up[i] * b.data()[i];
                }
            });
            accumulate(nodes, parents[1], |g| {
                for i in 0..up.len() {
                    g[i] += up[i] * a.data()[i];
                }
            });
        }
        Op::Div => {
            let a = nodes[parents[0]].value.clone();
            let b = nodes[parents[1]].value.clone();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    g[i] += up[i] / b.data()[i];
                }
            });
            accumulate(nodes, parents[1], |g| {
                for i in 0..up.len() {
                    let bi = b.data()[i];
                    g[i] -= up[i] * a.data()[i] / (bi * bi);
                }
            });
        }
        Op::SmoothL1 => {
            let a = nodes[parents[0]].value.clone();
            let b = nodes[parents[1]].value.clone();
            let deriv: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).clamp(-1.0, 1.0))
                .collect();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    g[i] += up[i] * deriv[i];
                }
            });
            accumulate(nodes, parents[1], |g| {
                for i in 0..up.len() {
                    g[i] -= up[i] * deriv[i];
                }
            });
        }
        Op::AddScalar => {
            accumulate(nodes, parents[0], |g| {
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += ui;
                }
            });
        }
        Op::MulScalar(c) => {
            let c = *c;
            accumulate(nodes, parents[0], |g| {
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += c * ui;
                }
            });
        }
        Op::Exp => {
            let y = value.clone();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    g[i] += up[i] * y.data()[i];
                }
            });
        }
        Op::Log => {
            let a = nodes[parents[0]].value.clone();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    g[i] += up[i] / a.data()[i];
                }
            });
        }
        Op::Sqrt => {
            let y = value.clone();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    g[i] += up[i] * 0.5 / y.data()[i];
                }
            });
        }
        Op::Sigmoid => {
            let y = value.clone();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    let s = y.data()[i];
                    g[i] += up[i] * s * (1.0 - s);
                }
            });
        }
        Op::Relu => {
            let a = nodes[parents[0]].value.clone();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    if a.data()[i] > 0.0 {
                        g[i] += up[i];
                    }
                }
            });
        }
        Op::Sin => {
            let a = nodes[parents[0]].value.clone();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    g[i] += up[i] * a.data()[i].cos();
                }
            });
        }
        Op::Cos => {
            let a = nodes[parents[0]].value.clone();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    g[i] -= up[i] * a.data()[i].sin();
                }
            });
        }
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            let a = nodes[parents[0]].value.clone();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    let x = a.data()[i];
                    if x > lo && x < hi {
                        g[i] += up[i];
                    }
                }
            });
        }
        Op::MatMul => {
            let a = nodes[parents[0]].value.clone();
            let b = nodes[parents[1]].value.clone();
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            // dA += dY · Bᵀ
            accumulate(nodes, parents[0], |g| {
                gemm(m, n, k, up, false, b.data(), true, 1.0, g);
            });
            // dB += Aᵀ · dY
            accumulate(nodes, parents[1], |g| {
                gemm(k, m, n, a.data(), true, up, false, 1.0, g);
            });
        }
        Op::Transpose => {
            let (n, m) = (value.shape()[0], value.shape()[1]);
            accumulate(nodes, parents[0], |g| {
                for i in 0..n {
                    for j in 0..m {
                        g[j * n + i] += up[i * m + j];
                    }
                }
            });
        }
        Op::SoftmaxLast => {
            let y = value.clone();
            let d = *y.shape().last().unwrap();
            accumulate(nodes, parents[0], |g| {
                for (row, (yrow, urow)) in y.data().chunks(d).zip(up.chunks(d)).enumerate() {
                    let dot: f64 = yrow.iter().zip(urow).map(|(a, b)| a * b).sum();
                    let base = row * d;
                    for i in 0..d {
                        g[base + i] += yrow[i] * (urow[i] - dot);
                    }
                }
            });
        }
        Op::LayerNormLast { eps } => {
            let eps = *eps;
            let x = nodes[parents[0]].value.clone();
            let y = value.clone();
            let d = *y.shape().last().unwrap();
            accumulate(nodes, parents[0], |g| {
                for row in 0..y.numel() / d {
                    let base = row * d;
                    let xr = &x.data()[base..base + d];
                    let yr = &y.data()[base..base + d];
                    let ur = &up[base..base + d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mean_u = ur.iter().sum::<f64>() / d as f64;
                    let mean_uy = ur.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        g[base + i] += inv * (ur[i] - mean_u - yr[i] * mean_uy);
                    }
                }
            });
        }
        Op::AddVecLast => {
            let d = *value.shape().last().unwrap();
            accumulate(nodes, parents[0], |g| {
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += ui;
                }
            });
            accumulate(nodes, parents[1], |g| {
                for (i, ui) in up.iter().enumerate() {
                    g[i % d] += ui;
                }
            });
        }
        Op::MulVecLast => {
            let x = nodes[parents[0]].value.clone();
            let v = nodes[parents[1]].value.clone();
            let d = *value.shape().last().unwrap();
            accumulate(nodes, parents[0], |g| {
                for i in 0..up.len() {
                    g[i] += up[i] * v.data()[i % d];
                }
            });
            accumulate(nodes, parents[1], |g| {
                for i in 0..up.len() {
                    g[i % d] += up[i] * x.data()[i];
                }
            });
        }
        Op::Concat { axis } => {
            let axis = *axis;
            let shape = value.shape().to_vec();
            let (outer, total, inner) = axis_split(&shape, axis);
            let mut offset = 0;
            for &p in parents {
                let s = nodes[p].value.shape()[axis];
                let off = offset;
                accumulate(nodes, p, |g| {
                    for o in 0..outer {
                        let src_base = (o * total + off) * inner;
                        let dst_base = o * s * inner;
                        for i in 0..s * inner {
                            g[dst_base + i] += up[src_base + i];
                        }
                    }
                });
                offset += s;
            }
        }
        Op::SliceAxis { axis, start, end } => {
            let (axis, start, end) = (*axis, *start, *end);
            let parent_shape = nodes[parents[0]].value.shape().to_vec();
            let (outer, dim, inner) = axis_split(&parent_shape, axis);
            let span = end - start;
            accumulate(nodes, parents[0], |g| {
                for o in 0..outer {
                    let dst_base = (o * dim + start) * inner;
                    let src_base = o * span * inner;
                    for i in 0..span * inner {
                        g[dst_base + i] += up[src_base + i];
                    }
                }
            });
        }
        Op::Reshape => {
            accumulate(nodes, parents[0], |g| {
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += ui;
                }
            });
        }
        Op::GatherRows { indices } => {
            let indices = Arc::clone(indices);
            let c = value.shape()[1];
            accumulate(nodes, parents[0], |g| {
                for (i, &row) in indices.iter().enumerate() {
                    for j in 0..c {
                        g[row * c + j] += up[i * c + j];
                    }
                }
            });
        }
        Op::SumAll => {
            accumulate(nodes, parents[0], |g| {
                for gi in g.iter_mut() {
                    *gi += up[0];
                }
            });
        }
        Op::MeanAll => {
            let n = nodes[parents[0]].value.numel() as f64;
            accumulate(nodes, parents[0], |g| {
                let v = up[0] / n;
                for gi in g.iter_mut() {
                    *gi += v;
                }
            });
        }
        Op::SumAxis { axis } | Op::MeanAxis { axis } => {
            let axis = *axis;
            let mean = matches!(op, Op::MeanAxis { .. });
            let parent_shape = nodes[parents[0]].value.shape().to_vec();
            let (outer, dim, inner) = axis_split(&parent_shape, axis);
            let scale = if mean { 1.0 / dim as f64 } else { 1.0 };
            accumulate(nodes, parents[0], |g| {
                for o in 0..outer {
                    for a in 0..dim {
                        let base = (o * dim + a) * inner;
                        for i in 0..inner {
                            g[base + i] += scale * up[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::Conv2d { stride, pad } => {
            let (stride, pad) = (*stride, *pad);
            let x = nodes[parents[0]].value.clone();
            let k = nodes[parents[1]].value.clone();
            let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
            let (oh, ow) = (value.shape()[0], value.shape()[1]);
            let kc = kh * kw * cin;
            let col = im2col(x.data(), h, w, cin, kh, kw, stride, pad, oh, ow);
            // dK += colᵀ · dY
            accumulate(nodes, parents[1], |g| {
                gemm(kc, oh * ow, cout, &col, true, up, false, 1.0, g);
            });
            // dCol = dY · Kᵀ, then scatter back through the patch layout
            let mut dcol = vec![0.0; oh * ow * kc];
            gemm(oh * ow, cout, kc, up, false, k.data(), true, 0.0, &mut dcol);
            accumulate(nodes, parents[0], |g| {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = (oy * ow + ox) * kc;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let dst = ((iy as usize) * w + ix as usize) * cin;
                                let src = row + (ky * kw + kx) * cin;
                                for c in 0..cin {
                                    g[dst + c] += dcol[src + c];
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::AvgPool2 => {
            let (oh, ow, c) = (value.shape()[0], value.shape()[1], value.shape()[2]);
            let w = 2 * ow;
            accumulate(nodes, parents[0], |g| {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let v = 0.25 * up[(oy * ow + ox) * c + ch];
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    g[((2 * oy + dy) * w + 2 * ox + dx) * c + ch] += v;
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::UpsampleNearest2 => {
            let (oh, ow, c) = (value.shape()[0], value.shape()[1], value.shape()[2]);
            let w = ow / 2;
            accumulate(nodes, parents[0], |g| {
                for y in 0..oh {
                    for x in 0..ow {
                        let src = (y * ow + x) * c;
                        let dst = ((y / 2) * w + x / 2) * c;
                        for ch in 0..c {
                            g[dst + ch] += up[src + ch];
                        }
                    }
                }
            });
        }
        Op::WarpBilinear => {
            let f = nodes[parents[0]].value.clone();
            let p = nodes[parents[1]].value.clone();
            let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
            let n = p.numel() / 2;
            // Precompute corner indices and weights once per sample point.
            let mut corners = Vec::with_capacity(n);
            for i in 0..n {
                let rawx = p.data()[i * 2];
                let rawy = p.data()[i * 2 + 1];
                let x = rawx.clamp(0.0, (w - 1) as f64);
                let y = rawy.clamp(0.0, (h - 1) as f64);
                let x0 = (x.floor() as usize).min(w.saturating_sub(2));
                let y0 = (y.floor() as usize).min(h.saturating_sub(2));
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (ax, ay) = (x - x0 as f64, y - y0 as f64);
                let in_x = rawx > 0.0 && rawx < (w - 1) as f64;
                let in_y = rawy > 0.0 && rawy < (h - 1) as f64;
                corners.push((x0, y0, x1, y1, ax, ay, in_x, in_y));
            }
            accumulate(nodes, parents[0], |g| {
                for (i, &(x0, y0, x1, y1, ax, ay, _, _)) in corners.iter().enumerate() {
                    for ch in 0..c {
                        let u = up[i * c + ch];
                        g[(y0 * w + x0) * c + ch] += u * (1.0 - ax) * (1.0 - ay);
                        g[(y0 * w + x1) * c + ch] += u * ax * (1.0 - ay);
                        g[(y1 * w + x0) * c + ch] += u * (1.0 - ax) * ay;
                        g[(y1 * w + x1) * c + ch] += u * ax * ay;
                    }
                }
            });
            accumulate(nodes, parents[1], |g| {
                for (i, &(x0, y0, x1, y1, ax, ay, in_x, in_y)) in corners.iter().enumerate() {
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    for ch in 0..c {
                        let u = up[i * c + ch];
                        let f00 = f.data()[(y0 * w + x0) * c + ch];
                        let f01 = f.data()[(y0 * w + x1) * c + ch];
                        let f10 = f.data()[(y1 * w + x0) * c + ch];
                        let f11 = f.data()[(y1 * w + x1) * c + ch];
                        dx += u * ((1.0 - ay) * (f01 - f00) + ay * (f11 - f10));
                        dy += u * ((1.0 - ax) * (f10 - f00) + ax * (f11 - f01));
                    }
                    if in_x {
                        g[i * 2] += dx;
                    }
                    if in_y {
                        g[i * 2 + 1] += dy;
                    }
                }
            });
        }
    }
}
