use std::rc::Rc;

use super::tensor::{broadcast_map, for_each_broadcast, gemm, numel, permute, Tensor};
use crate::error::{Error, Result};

/// Additive mask value for blocked attention entries.
pub const MASK_BLOCKED: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row-compressed matrix, used for fixed graph propagation.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out[i * self.cols + j] += v;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Abs,
    Sqrt,
    Square,
    Exp,
    /// Huber-style smooth L1 with transition `beta`.
    SmoothL1(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Expand {
        x: Var,
        eff: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Conv1dTime {
        x: Var,
        w: Var,
        bias: Option<Var>,
        kernel: usize,
    },
    FixedConv2d {
        x: Var,
        kernel: [f64; 9],
    },
    GraphPropagate {
        x: Var,
        adj: Rc<SparseMatrix>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Inputs of a node always precede it, so reverse insertion order is a valid
/// topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` is a parameter.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- elementwise

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xs = self.value(x);
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::Relu => |v, _| v.max(0.0),
            Unary::Gelu => |v, _| 0.5 * v * (1.0 + gelu_inner(v).tanh()),
            Unary::Sigmoid => |v, _| sigmoid(v),
            Unary::Tanh => |v, _| v.tanh(),
            Unary::Abs => |v, _| v.abs(),
            Unary::Sqrt => |v, _| v.sqrt(),
            Unary::Square => |v, _| v * v,
            Unary::Exp => |v, _| v.exp(),
            Unary::SmoothL1(_) => |v, beta| {
                let a = v.abs();
                if a < beta {
                    0.5 * v * v / beta
                } else {
                    a - 0.5 * beta
                }
            },
        };
        let param = if let Unary::SmoothL1(beta) = kind { beta } else { 0.0 };
        let data = xs.data().iter().map(|&v| f(v, param)).collect();
        let value = Tensor::new(xs.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        self.unary(Unary::SmoothL1(beta), x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (numel(&sa), numel(&sb));
        let out_shape = if sa == sb || nb == 1 {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else {
            return Err(Error::shape(binary_name(kind), &sa, &sb));
        };
        let n = numel(&out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data: Vec<f64> = (0..n)
            .map(|i| f(av[if na == 1 { 0 } else { i }], bv[if nb == 1 { 0 } else { i }]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Binary(kind, a, b), rg))
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xs = self.value(x);
        let data = xs.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xs.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xs = self.value(x);
        let data = xs.data().iter().map(|v| v + c).collect();
        let value = Tensor::new(xs.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product. Supports `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]` and `[b,m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, shared_b) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n, true),
            (&[bt, m, k], &[bt2, k2, n]) if k == k2 && bt == bt2 => (bt, m, k, n, false),
            (&[bt, m, k], &[k2, n]) if k == k2 => (bt, m, k, n, true),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let bo = if shared_b { 0 } else { i * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[bo..bo + k * n],
                    false,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, axis0: usize, axis1: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis0 >= rank || axis1 >= rank {
            return Err(Error::shape("transpose", self.shape(x), &[axis0, axis1]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(axis0, axis1);
        self.permute(x, &perm)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (data, out_shape) = permute(self.value(x).data(), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute { x, perm: perm.to_vec() },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Numpy-style broadcast of `x` to `shape` (size-one or missing leading axes).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let eff = broadcast_map(&src, shape).ok_or_else(|| Error::shape("expand", &src, shape))?;
        let mut data = vec![0.0; numel(shape)];
        {
            let xv = self.value(x).data();
            for_each_broadcast(shape, &eff, |flat, off| data[flat] = xv[off]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Expand { x, eff }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::Invalid("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let mut data = Vec::with_capacity(numel(&out_shape));
        {
            let xv = self.value(x).data();
            for o in 0..outer {
                let base = o * shape[axis] * inner;
                data.extend_from_slice(&xv[base + start * inner..base + end * inner]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Slice { x, axis, start }, rg))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut data = vec![0.0; outer * inner];
        {
            let xv = self.value(x).data();
            for o in 0..outer {
                for a in 0..len {
                    let src = &xv[(o * len + a) * inner..(o * len + a + 1) * inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n]).expect("same numel");
        self.sum_axis(flat, 0).expect("rank 1")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    // ---------------------------------------------------------------- normalisation

    /// Softmax over the last axis. `mask`, if given, is added to the logits and
    /// must match the trailing dimensions of `x`.
    pub fn softmax_lastaxis(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[]))?;
        let xv = self.value(x).data();
        let mask_data = match mask {
            Some(m) => {
                let ms = m.shape();
                if ms.len() > shape.len() || ms != &shape[shape.len() - ms.len()..] {
                    return Err(Error::shape("softmax mask", &shape, ms));
                }
                Some(m.data())
            }
            None => None,
        };
        let mut out = vec![0.0; xv.len()];
        for (r, (row, orow)) in xv.chunks(last).zip(out.chunks_mut(last)).enumerate() {
            let mrow = mask_data.map(|m| {
                let mr = m.len() / last;
                let i = r % mr;
                &m[i * last..(i + 1) * last]
            });
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                let z = v + mrow.map_or(0.0, |m| m[j]);
                orow[j] = z;
                max = max.max(z);
            }
            let mut sum = 0.0;
            for o in orow.iter_mut() {
                *o = (*o - max).exp();
                sum += *o;
            }
            let inv = 1.0 / sum;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x), rg))
    }

    /// Layer normalisation over the last axis, without affine parameters.
    pub fn layer_norm_lastaxis(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        let xv = self.value(x).data();
        let rows = xv.len() / last.max(1);
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for (row, orow) in xv.chunks(last).zip(out.chunks_mut(last)) {
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, rstd }, rg))
    }

    // ---------------------------------------------------------------- convolutions

    /// Valid convolution along time for node-major input `[nodes, time, c_in]`
    /// with weights `[kernel, c_in, c_out]` and optional bias `[c_out]`.
    /// Output is `[nodes, time - kernel + 1, c_out]`.
    pub fn conv1d_time(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (nodes, time, c_in) = match xs.as_slice() {
            &[n, t, c] => (n, t, c),
            _ => return Err(Error::shape("conv1d_time", &xs, &ws)),
        };
        let (kernel, c_out) = match ws.as_slice() {
            &[k, ci, co] if ci == c_in && k >= 1 => (k, co),
            _ => return Err(Error::shape("conv1d_time", &xs, &ws)),
        };
        if time < kernel {
            return Err(Error::shape("conv1d_time (time axis shorter than kernel)", &xs, &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv1d_time bias", self.shape(b), &[c_out]));
            }
        }
        let t_out = time - kernel + 1;
        let cols = im2col_time(self.value(x).data(), nodes, time, c_in, kernel);
        let rows = nodes * t_out;
        let mut out = vec![0.0; rows * c_out];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            rows,
            kernel * c_in,
            c_out,
            &cols,
            false,
            self.value(w).data(),
            false,
            beta,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&[nodes, t_out, c_out], out)?,
            Op::Conv1dTime { x, w, bias, kernel },
            rg,
        ))
    }

    /// Valid 3×3 cross-correlation over the last two axes with a constant kernel.
    /// Differentiates with respect to `x` only.
    pub fn fixed_kernel_conv2d(&mut self, x: Var, kernel: [f64; 9]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] < 3 || shape[shape.len() - 2] < 3 {
            return Err(Error::shape("fixed_kernel_conv2d", &shape, &[3, 3]));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = numel(&shape) / (h * w);
        let (ho, wo) = (h - 2, w - 2);
        let mut out = vec![0.0; planes * ho * wo];
        {
            let xv = self.value(x).data();
            for p in 0..planes {
                let src = &xv[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for di in 0..3 {
                            for dj in 0..3 {
                                acc += kernel[di * 3 + dj] * src[(i + di) * w + j + dj];
                            }
                        }
                        dst[i * wo + j] = acc;
                    }
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::FixedConv2d { x, kernel }, rg))
    }

    /// `y[i, :] = Σ_j adj[i, j] · x[j, :]` for `x` of shape `[nodes, features...]`.
    pub fn graph_propagate(&mut self, x: Var, adj: &Rc<SparseMatrix>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != adj.cols || adj.rows != adj.cols {
            return Err(Error::shape("graph_propagate", &shape, &[adj.rows, adj.cols]));
        }
        let feat = numel(&shape) / shape[0];
        let mut out = vec![0.0; adj.rows * feat];
        {
            let xv = self.value(x).data();
            for (i, orow) in out.chunks_mut(feat).enumerate() {
                for (j, a) in adj.row(i) {
                    for (o, v) in orow.iter_mut().zip(&xv[j * feat..(j + 1) * feat]) {
                        *o += a * v;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::GraphPropagate { x, adj: Rc::clone(adj) },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of every parameter with respect to the scalar `loss`.
    /// Parameters the loss does not depend on get all-zero gradients; fan-out
    /// contributions accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        if self.nodes[loss.0].requires_grad {
            let g = grads[loss.0].get_or_insert_with(|| vec![0.0]);
            g[0] += 1.0;
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                if !self.rg(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let acc = slot(grads, *x, xv.len());
                for k in 0..xv.len() {
                    let v = xv[k];
                    let d = match kind {
                        Unary::Relu => {
                            if v > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Gelu => {
                            let t = gelu_inner(v).tanh();
                            let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
                        }
                        Unary::Sigmoid => out[k] * (1.0 - out[k]),
                        Unary::Tanh => 1.0 - out[k] * out[k],
                        Unary::Abs => v.signum() * f64::from(v != 0.0),
                        Unary::Sqrt => 0.5 / out[k],
                        Unary::Square => 2.0 * v,
                        Unary::Exp => out[k],
                        Unary::SmoothL1(beta) => {
                            if v.abs() < *beta {
                                v / beta
                            } else {
                                v.signum()
                            }
                        }
                    };
                    acc[k] += g[k] * d;
                }
            }
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let (na, nb) = (av.len(), bv.len());
                let ai = |k: usize| if na == 1 { 0 } else { k };
                let bi = |k: usize| if nb == 1 { 0 } else { k };
                if self.rg(a) {
                    let acc = slot(grads, a, na);
                    for k in 0..g.len() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => 1.0,
                            Binary::Mul => bv[bi(k)],
                            Binary::Div => 1.0 / bv[bi(k)],
                        };
                        acc[ai(k)] += g[k] * d;
                    }
                }
                if self.rg(b) {
                    let acc = slot(grads, b, nb);
                    for k in 0..g.len() {
                        let d = match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => -1.0,
                            Binary::Mul => av[ai(k)],
                            Binary::Div => -out[k] / bv[bi(k)],
                        };
                        acc[bi(k)] += g[k] * d;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    let acc = slot(grads, *x, g.len());
                    for (a, gv) in acc.iter_mut().zip(g) {
                        *a += gv * c;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.rg(*x) {
                    let acc = slot(grads, *x, g.len());
                    for (a, gv) in acc.iter_mut().zip(g) {
                        *a += gv;
                    }
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.rg(a) {
                    let acc = slot(grads, a, av.len());
                    for t in 0..batch {
                        let bo = if shared_b { 0 } else { t * k * n };
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &bv[bo..bo + k * n],
                            true,
                            1.0,
                            &mut acc[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if self.rg(b) {
                    let acc = slot(grads, b, bv.len());
                    if shared_b {
                        // dB = Σ_t Aₜᵀ · dCₜ, folded into one product over stacked rows.
                        gemm(k, batch * m, n, av, true, g, false, 1.0, acc);
                    } else {
                        for t in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av[t * m * k..(t + 1) * m * k],
                                true,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                1.0,
                                &mut acc[t * k * n..(t + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if self.rg(*x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (back, _) = permute(g, node.value.shape(), &inverse);
                    let acc = slot(grads, *x, g.len());
                    for (a, v) in acc.iter_mut().zip(back) {
                        *a += v;
                    }
                }
            }
            Op::Expand { x, eff } => {
                if self.rg(*x) {
                    let len = self.value(*x).len();
                    let acc = slot(grads, *x, len);
                    for_each_broadcast(node.value.shape(), eff, |flat, off| acc[off] += g[flat]);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let acc = slot(grads, p, outer * len);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (a, v) in acc[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                if self.rg(x) {
                    let src_shape = self.shape(x).to_vec();
                    let outer: usize = src_shape[..axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let width = node.value.shape()[axis] * inner;
                    let acc = slot(grads, x, numel(&src_shape));
                    for o in 0..outer {
                        let base = o * src_shape[axis] * inner + start * inner;
                        for (a, v) in acc[base..base + width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                            *a += v;
                        }
                    }
                }
            }
            &Op::SumAxis { x, axis } => {
                if self.rg(x) {
                    let src_shape = self.shape(x).to_vec();
                    let outer: usize = src_shape[..axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let len = src_shape[axis];
                    let acc = slot(grads, x, numel(&src_shape));
                    for o in 0..outer {
                        let gs = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let dst = &mut acc[(o * len + a) * inner..(o * len + a + 1) * inner];
                            for (d, v) in dst.iter_mut().zip(gs) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let last = *node.value.shape().last().expect("rank >= 1");
                    let acc = slot(grads, *x, g.len());
                    for ((y, gy), a) in out.chunks(last).zip(g.chunks(last)).zip(acc.chunks_mut(last)) {
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for j in 0..last {
                            a[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if self.rg(*x) {
                    let last = *node.value.shape().last().expect("rank >= 1");
                    let acc = slot(grads, *x, g.len());
                    let inv_n = 1.0 / last as f64;
                    for (r, ((xh, gy), a)) in out
                        .chunks(last)
                        .zip(g.chunks(last))
                        .zip(acc.chunks_mut(last))
                        .enumerate()
                    {
                        let mean_g: f64 = gy.iter().sum::<f64>() * inv_n;
                        let mean_gx: f64 = gy.iter().zip(xh).map(|(p, q)| p * q).sum::<f64>() * inv_n;
                        for j in 0..last {
                            a[j] += rstd[r] * (gy[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
            }
            &Op::Conv1dTime { x, w, bias, kernel } => {
                let (nodes, time, c_in) = {
                    let s = self.shape(x);
                    (s[0], s[1], s[2])
                };
                let c_out = self.shape(w)[2];
                let t_out = time - kernel + 1;
                let rows = nodes * t_out;
                if let Some(b) = bias {
                    if self.rg(b) {
                        let acc = slot(grads, b, c_out);
                        for row in g.chunks(c_out) {
                            for (a, v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
                if self.rg(w) {
                    let cols = im2col_time(self.value(x).data(), nodes, time, c_in, kernel);
                    let acc = slot(grads, w, kernel * c_in * c_out);
                    gemm(kernel * c_in, rows, c_out, &cols, true, g, false, 1.0, acc);
                }
                if self.rg(x) {
                    let mut dcols = vec![0.0; rows * kernel * c_in];
                    gemm(
                        rows,
                        c_out,
                        kernel * c_in,
                        g,
                        false,
                        self.value(w).data(),
                        true,
                        0.0,
                        &mut dcols,
                    );
                    let acc = slot(grads, x, nodes * time * c_in);
                    let width = kernel * c_in;
                    for nd in 0..nodes {
                        for t in 0..t_out {
                            let src = &dcols[(nd * t_out + t) * width..(nd * t_out + t + 1) * width];
                            let dst = &mut acc[(nd * time + t) * c_in..(nd * time + t) * c_in + width];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::FixedConv2d { x, kernel } => {
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    let planes = numel(&shape) / (h * w);
                    let (ho, wo) = (h - 2, w - 2);
                    let acc = slot(grads, *x, numel(&shape));
                    for p in 0..planes {
                        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                        let dst = &mut acc[p * h * w..(p + 1) * h * w];
                        for i in 0..ho {
                            for j in 0..wo {
                                let gv = gp[i * wo + j];
                                for di in 0..3 {
                                    for dj in 0..3 {
                                        dst[(i + di) * w + j + dj] += kernel[di * 3 + dj] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GraphPropagate { x, adj } => {
                if self.rg(*x) {
                    let feat = g.len() / adj.rows;
                    let acc = slot(grads, *x, g.len());
                    for i in 0..adj.rows {
                        let gi = &g[i * feat..(i + 1) * feat];
                        for (j, a) in adj.row(i) {
                            for (d, v) in acc[j * feat..(j + 1) * feat].iter_mut().zip(gi) {
                                *d += a * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn im2col_time(x: &[f64], nodes: usize, time: usize, c_in: usize, kernel: usize) -> Vec<f64> {
    let t_out = time - kernel + 1;
    let width = kernel * c_in;
    let mut cols = Vec::with_capacity(nodes * t_out * width);
    for nd in 0..nodes {
        for t in 0..t_out {
            let start = (nd * time + t) * c_in;
            // Window rows t..t+kernel are contiguous in node-major layout.
            cols.extend_from_slice(&x[start..start + width]);
        }
    }
    cols
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(v: f64) -> f64 {
    GELU_C * (v + 0.044715 * v * v * v)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}
