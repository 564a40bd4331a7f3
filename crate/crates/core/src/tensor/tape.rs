use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, DwGeom};
use super::Tensor;
use crate::error::{invalid, mismatch, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Non-fatal events raised while recording.
#[derive(Clone, Debug, PartialEq)]
pub enum Diagnostic {
    /// `l2_normalize` met an all-zero row and returned zeros for it.
    ZeroNormRow { var: Var, row: usize },
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
    Abs,
    Relu,
    Gelu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug)]
enum MatMode {
    /// `[m,k] x [k,n]`, leading dims of the lhs folded into `m`.
    Folded { m: usize, k: usize, n: usize },
    /// `[b,m,k] x [b,k,n]`
    Batched { b: usize, m: usize, k: usize, n: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var },
    AddScalar(Var),
    MulScalar(Var, f64),
    Unary { kind: UnKind, x: Var },
    MatMul { a: Var, b: Var, mode: MatMode },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    Depthwise { x: Var, w: Var, geom: DwGeom },
    Upsample2 { x: Var },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax { x: Var },
    L2Normalize { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    ReduceAxis { x: Var, outer: usize, len: usize, inner: usize, scale: f64 },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, src: Vec<usize> },
    Slice { x: Var, outer: usize, len: usize, start: usize, width: usize },
    Gather0 { x: Var, rows: Vec<usize> },
    Assemble0 { parts: Vec<(Var, Vec<usize>)> },
    GradMask0 { x: Var, mask: Vec<f64> },
    RowMap { x: Var, map: Vec<f64>, rows: usize, k: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run gradient tape. Every op appends a node holding its output
/// and what its backward rule needs; node order is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
    diagnostics: Vec<Diagnostic>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// outer/inner decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
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

    /// Multiply-accumulate count of all recorded ops (elementwise ops count one per element).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` with no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var], flops: u64) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.flops += flops;
        self.nodes.push(Node {
            value: Tensor {
                shape: shape.to_vec(),
                data,
            },
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(name, &sa, &sb)?;
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let pa = pad_shape(&sa, out.len());
            let pb = pad_shape(&sb, out.len());
            let stra = kernels::broadcast_strides(&pa, &out);
            let strb = kernels::broadcast_strides(&pb, &out);
            let mut d = vec![0.0; shape_of(&out)];
            kernels::for_each_broadcast(&out, &stra, &strb, |o, i, j| d[o] = f(va[i], vb[j]));
            d
        };
        let n = data.len() as u64;
        Ok(self.push(&out, data, Op::Binary { kind, a, b }, &[a, b], n))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v + s).collect();
        let shape = self.shape(x).to_vec();
        let n = data.len() as u64;
        self.push(&shape, data, Op::AddScalar(x), &[x], n)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let n = data.len() as u64;
        self.push(&shape, data, Op::MulScalar(x, s), &[x], n)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Var {
        let f = |v: f64| match kind {
            UnKind::Abs => v.abs(),
            UnKind::Relu => v.max(0.0),
            UnKind::Gelu => gelu(v),
            UnKind::Sigmoid => sigmoid(v),
            UnKind::Exp => libm::exp(v),
            UnKind::Log => libm::log(v),
        };
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let n = data.len() as u64;
        self.push(&shape, data, Op::Unary { kind, x }, &[x], n)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnKind::Abs, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnKind::Relu, x)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnKind::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnKind::Log, x)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product. Accepts `[m,k]x[k,n]`, `[b,m,k]x[b,k,n]`, and
    /// `[..,k]x[k,n]` (leading dims of the lhs act as rows).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let fail = || mismatch("matmul", &sa, &sb);
        let (mode, out_shape) = match (sa.len(), sb.len()) {
            (ra, 2) if ra >= 1 => {
                let k = sa[ra - 1];
                if k != sb[0] {
                    return Err(fail());
                }
                let m = shape_of(&sa[..ra - 1]);
                let mut out = sa[..ra - 1].to_vec();
                out.push(sb[1]);
                (MatMode::Folded { m, k, n: sb[1] }, out)
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(fail());
                }
                let (bb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                (MatMode::Batched { b: bb, m, k, n }, vec![bb, m, n])
            }
            _ => return Err(fail()),
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; shape_of(&out_shape)];
        let flops = match mode {
            MatMode::Folded { m, k, n } => {
                kernels::matmul_acc(va, vb, &mut out, m, k, n);
                (m * k * n) as u64
            }
            MatMode::Batched { b: bb, m, k, n } => {
                for i in 0..bb {
                    kernels::matmul_acc(
                        &va[i * m * k..(i + 1) * m * k],
                        &vb[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                (bb * m * k * n) as u64
            }
        };
        Ok(self.push(&out_shape, out, Op::MatMul { a, b, mode }, &[a, b], flops))
    }

    /// NHWC convolution with a `[k, k, cin, cout]` kernel, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sx[3] != sw[2] || stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let k = sw[0];
        if sx[1] + 2 * pad < k || sx[2] + 2 * pad < k {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            cin: sx[3],
            cout: sw[3],
            k,
            stride,
            pad,
            ho: (sx[1] + 2 * pad - k) / stride + 1,
            wo: (sx[2] + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; geom.rows() * geom.cout];
        kernels::matmul_acc(&cols, self.value(w).data(), &mut out, geom.rows(), geom.patch(), geom.cout);
        let flops = (geom.rows() * geom.patch() * geom.cout) as u64;
        let shape = [geom.n, geom.ho, geom.wo, geom.cout];
        Ok(self.push(&shape, out, Op::Conv2d { x, w, geom, cols }, &[x, w], flops))
    }

    /// Stride-1 depthwise NHWC convolution with a `[k, k, c]` kernel.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 3 || sw[0] != sw[1] || sx[3] != sw[2] || 2 * pad + 1 != sw[0] {
            return Err(mismatch("depthwise_conv2d", &sx, &sw));
        }
        let geom = DwGeom {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            c: sx[3],
            k: sw[0],
            pad,
        };
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom);
        let flops = (out.len() * geom.k * geom.k) as u64;
        Ok(self.push(&sx, out, Op::Depthwise { x, w, geom }, &[x, w], flops))
    }

    /// Nearest-neighbour 2x upsampling of an NHWC map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid("upsample2x", format!("expected NHWC input, got {:?}", s)));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let o = ((b * 2 * h + y) * 2 * w + xx) * c;
                    let i = ((b * h + y / 2) * w + xx / 2) * c;
                    out[o..o + c].copy_from_slice(&src[i..i + c]);
                }
            }
        }
        let len = out.len() as u64;
        Ok(self.push(&[n, 2 * h, 2 * w, c], out, Op::Upsample2 { x }, &[x], len))
    }

    // ---- normalisation -----------------------------------------------------

    /// Layer normalisation over the last axis, no affine part.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(src.len() / d.max(1));
        for (row, dst) in src.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            for (o, v) in dst.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let n = (out.len() * 4) as u64;
        self.push(&shape, out, Op::LayerNorm { x, rstd }, &[x], n)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (row, dst) in src.chunks(d).zip(out.chunks_mut(d)) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for (o, v) in dst.iter_mut().zip(row) {
                *o = libm::exp(v - m);
                s += *o;
            }
            for o in dst.iter_mut() {
                *o /= s;
            }
        }
        let n = (out.len() * 3) as u64;
        self.push(&shape, out, Op::Softmax { x }, &[x], n)
    }

    /// Projects every last-axis row onto the unit sphere. All-zero rows map to
    /// zero and raise a [`Diagnostic::ZeroNormRow`].
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut norms = Vec::with_capacity(src.len() / d.max(1));
        let mut zero_rows = Vec::new();
        for (r, (row, dst)) in src.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let nrm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if nrm > 0.0 {
                for (o, v) in dst.iter_mut().zip(row) {
                    *o = v / nrm;
                }
            } else {
                zero_rows.push(r);
            }
            norms.push(nrm);
        }
        let n = (out.len() * 2) as u64;
        let v = self.push(&shape, out, Op::L2Normalize { x, norms }, &[x], n);
        for row in zero_rows {
            self.diagnostics.push(Diagnostic::ZeroNormRow { var: v, row });
        }
        v
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let n = self.value(x).numel() as u64;
        self.push(&[], vec![s], Op::Sum(x), &[x], n)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let n = v.numel() as u64;
        self.push(&[], vec![s], Op::Mean(x), &[x], n)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool, name: &'static str) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid(name, format!("axis {} out of range for {:?}", axis, shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let s = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += v;
                }
            }
            if mean {
                for d in dst.iter_mut() {
                    *d *= scale;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let n = src.len() as u64;
        Ok(self.push(
            &out_shape,
            out,
            Op::ReduceAxis {
                x,
                outer,
                len,
                inner,
                scale,
            },
            &[x],
            n,
        ))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false, "sum_axis")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true, "mean_axis")
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {} out of range for {:?}", axis, first)));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d]) {
                return Err(mismatch("concat", &first, s));
            }
            let (_, len, inner) = split_axis(s, axis);
            widths.push(len * inner);
            total += s[axis];
        }
        let (outer, _, _) = split_axis(&first, axis);
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let n = out.len() as u64;
        Ok(self.push(
            &shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            parts,
            n,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape_of(shape) != self.value(x).numel() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(shape, data, Op::Reshape(x), &[x], 0))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("bad permutation {:?} for {:?}", perm, shape)));
        }
        let src = kernels::permute_index(&shape, perm);
        let vals = self.value(x).data();
        let data: Vec<f64> = src.iter().map(|&i| vals[i]).collect();
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n = data.len() as u64;
        Ok(self.push(&out, data, Op::Permute { x, src }, &[x], n))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(invalid("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let n = out.len() as u64;
        Ok(self.push(
            &s,
            out,
            Op::Slice {
                x,
                outer,
                len: full * inner,
                start: start * inner,
                width: len * inner,
            },
            &[x],
            n,
        ))
    }

    /// Selects rows along axis 0.
    pub fn gather0(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(invalid("gather0", format!("rows {:?} out of range for {:?}", rows, shape)));
        }
        let w = self.value(x).numel() / shape[0];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let mut s = shape;
        s[0] = rows.len();
        let n = out.len() as u64;
        Ok(self.push(&s, out, Op::Gather0 { x, rows: rows.to_vec() }, &[x], n))
    }

    /// Inverse of several `gather0` calls: row `rows[i]` of the output comes
    /// from row `i` of the matching part. Every output row must be covered once.
    pub fn assemble0(&mut self, parts: &[(Var, Vec<usize>)], total: usize) -> Result<Var> {
        let first = parts
            .iter()
            .find(|(_, r)| !r.is_empty())
            .ok_or_else(|| invalid("assemble0", "no rows"))?;
        let mut shape = self.shape(first.0).to_vec();
        let w = self.value(first.0).numel() / shape[0];
        let mut covered = vec![false; total];
        let mut out = vec![0.0; total * w];
        for (v, rows) in parts {
            let s = self.shape(*v);
            if s[0] != rows.len() || s[1..] != shape[1..] {
                return Err(mismatch("assemble0", &shape, s));
            }
            let src = self.value(*v).data();
            for (i, &r) in rows.iter().enumerate() {
                if r >= total || core::mem::replace(&mut covered[r], true) {
                    return Err(invalid("assemble0", format!("row {} duplicated or out of range", r)));
                }
                out[r * w..(r + 1) * w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(invalid("assemble0", "some output rows not covered"));
        }
        shape[0] = total;
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let n = out.len() as u64;
        Ok(self.push(
            &shape,
            out,
            Op::Assemble0 {
                parts: parts.to_vec(),
            },
            &inputs,
            n,
        ))
    }

    /// Identity in the forward pass; the backward pass scales the incoming
    /// gradient of axis-0 row `i` by `mask[i]`.
    pub fn grad_mask0(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != mask.len() {
            return Err(mismatch("grad_mask0", &shape, &[mask.len()]));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(
            &shape,
            data,
            Op::GradMask0 {
                x,
                mask: mask.to_vec(),
            },
            &[x],
            0,
        ))
    }

    /// Applies a constant `[rows, k]` matrix along axis 1 of an `[n, k, c]` input.
    pub fn row_map(&mut self, x: Var, map: &Tensor) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ms = map.shape();
        if s.len() != 3 || ms.len() != 2 || ms[1] != s[1] {
            return Err(mismatch("row_map", &s, ms));
        }
        let (n, k, c, rows) = (s[0], s[1], s[2], ms[0]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * rows * c];
        for b in 0..n {
            kernels::matmul_acc(
                map.data(),
                &src[b * k * c..(b + 1) * k * c],
                &mut out[b * rows * c..(b + 1) * rows * c],
                rows,
                k,
                c,
            );
        }
        let flops = (n * rows * k * c) as u64;
        Ok(self.push(
            &[n, rows, c],
            out,
            Op::RowMap {
                x,
                map: map.data().to_vec(),
                rows,
                k,
            },
            &[x],
            flops,
        ))
    }

    /// Single-head scaled dot-product attention over `[b, n, d]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = *self.shape(q).last().unwrap_or(&1);
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.mul_scalar(scores, 1.0 / libm::sqrt(d as f64));
        let attn = self.softmax(scores);
        self.matmul(attn, v)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// gradient-requiring leaf (zeros when disconnected) and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(invalid("backward", "tape is empty"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaves: Vec<Option<Tensor>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                });
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaves[i].is_none() {
                leaves[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.nodes.clear();
        self.diagnostics.clear();
        self.flops = 0;
        Ok(Gradients { grads: leaves })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b, kind) = (*a, *b, *kind);
                let (va, vb) = (val(a), val(b));
                let sa = pad_shape(nodes[a.0].value.shape(), out.rank());
                let sb = pad_shape(nodes[b.0].value.shape(), out.rank());
                let stra = kernels::broadcast_strides(&sa, out.shape());
                let strb = kernels::broadcast_strides(&sb, out.shape());
                if let Some(ga) = slot(grads, nodes, a) {
                    kernels::for_each_broadcast(out.shape(), &stra, &strb, |o, ia, ib| {
                        ga[ia] += match kind {
                            BinKind::Add | BinKind::Sub => g[o],
                            BinKind::Mul => g[o] * vb[ib],
                            BinKind::Div => g[o] / vb[ib],
                        }
                    });
                }
                if let Some(gb) = slot(grads, nodes, b) {
                    kernels::for_each_broadcast(out.shape(), &stra, &strb, |o, ia, ib| {
                        gb[ib] += match kind {
                            BinKind::Add => g[o],
                            BinKind::Sub => -g[o],
                            BinKind::Mul => g[o] * va[ia],
                            BinKind::Div => -g[o] * va[ia] / (vb[ib] * vb[ib]),
                        }
                    });
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    add_into(gx, g);
                }
            }
            Op::MulScalar(x, s) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (d, gv) in gx.iter_mut().zip(g) {
                        *d += gv * s;
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = val(*x);
                let yv = out.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (j, d) in gx.iter_mut().enumerate() {
                        let (xi, yi) = (xv[j], yv[j]);
                        let local = match kind {
                            UnKind::Abs => {
                                if xi > 0.0 {
                                    1.0
                                } else if xi < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Gelu => gelu_grad(xi),
                            UnKind::Sigmoid => yi * (1.0 - yi),
                            UnKind::Exp => yi,
                            UnKind::Log => 1.0 / xi,
                        };
                        *d += g[j] * local;
                    }
                }
            }
            Op::MatMul { a, b, mode } => {
                let (va, vb) = (val(*a), val(*b));
                match *mode {
                    MatMode::Folded { m, k, n } => {
                        if let Some(ga) = slot(grads, nodes, *a) {
                            kernels::matmul_nt_acc(g, vb, ga, m, n, k);
                        }
                        if let Some(gb) = slot(grads, nodes, *b) {
                            kernels::matmul_tn_acc(va, g, gb, m, k, n);
                        }
                    }
                    MatMode::Batched { b: bb, m, k, n } => {
                        if let Some(ga) = slot(grads, nodes, *a) {
                            for t in 0..bb {
                                kernels::matmul_nt_acc(
                                    &g[t * m * n..(t + 1) * m * n],
                                    &vb[t * k * n..(t + 1) * k * n],
                                    &mut ga[t * m * k..(t + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        }
                        if let Some(gb) = slot(grads, nodes, *b) {
                            for t in 0..bb {
                                kernels::matmul_tn_acc(
                                    &va[t * m * k..(t + 1) * m * k],
                                    &g[t * m * n..(t + 1) * m * n],
                                    &mut gb[t * k * n..(t + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                if let Some(gw) = slot(grads, nodes, *w) {
                    kernels::matmul_tn_acc(cols, g, gw, geom.rows(), geom.patch(), geom.cout);
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    let mut dcols = vec![0.0; cols.len()];
                    kernels::matmul_nt_acc(g, val(*w), &mut dcols, geom.rows(), geom.cout, geom.patch());
                    kernels::col2im_acc(&dcols, geom, gx);
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                // Two separate slots: x and w are distinct nodes.
                let mut dw = slot(grads, nodes, *w).map(|s| core::mem::take(s));
                if let Some(gx) = slot(grads, nodes, *x) {
                    kernels::depthwise_backward(xv, wv, g, geom, Some(gx), dw.as_deref_mut());
                } else if dw.is_some() {
                    kernels::depthwise_backward(xv, wv, g, geom, None, dw.as_deref_mut());
                }
                if let Some(dw) = dw {
                    grads[w.0] = Some(dw);
                }
            }
            Op::Upsample2 { x } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    let s = nodes[x.0].value.shape();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    for b in 0..n {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let o = ((b * 2 * h + y) * 2 * w + xx) * c;
                                let t = ((b * h + y / 2) * w + xx / 2) * c;
                                add_into(&mut gx[t..t + c], &g[o..o + c]);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let d = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (gy, yy) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let mg = gy.iter().sum::<f64>() / d as f64;
                        let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (gy[j] - mg - yy[j] * mgy);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let d = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for r in 0..y.len() / d {
                        let (gy, yy) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let dot = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>();
                        for j in 0..d {
                            gx[r * d + j] += yy[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm <= 0.0 {
                            continue;
                        }
                        let (gy, yy) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let dot = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>();
                        for j in 0..d {
                            gx[r * d + j] += (gy[j] - yy[j] * dot) / nrm;
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let scale = if matches!(nodes[i].op, Op::Mean(_)) {
                    1.0 / nodes[x.0].value.numel() as f64
                } else {
                    1.0
                };
                if let Some(gx) = slot(grads, nodes, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0] * scale;
                    }
                }
            }
            Op::ReduceAxis {
                x,
                outer,
                len,
                inner,
                scale,
            } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s * scale;
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = slot(grads, nodes, p) {
                        for o in 0..*outer {
                            add_into(&mut gp[o * w..(o + 1) * w], &g[o * row + off..o * row + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    add_into(gx, g);
                }
            }
            Op::Permute { x, src } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (o, &s) in src.iter().enumerate() {
                        gx[s] += g[o];
                    }
                }
            }
            Op::Slice {
                x,
                outer,
                len,
                start,
                width,
            } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for o in 0..*outer {
                        let base = o * len + start;
                        add_into(&mut gx[base..base + width], &g[o * width..(o + 1) * width]);
                    }
                }
            }
            Op::Gather0 { x, rows } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    let w = g.len() / rows.len().max(1);
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * w..(r + 1) * w], &g[k * w..(k + 1) * w]);
                    }
                }
            }
            Op::Assemble0 { parts } => {
                let w = g.len() / out.shape()[0].max(1);
                for (v, rows) in parts {
                    if let Some(gp) = slot(grads, nodes, *v) {
                        for (k, &r) in rows.iter().enumerate() {
                            add_into(&mut gp[k * w..(k + 1) * w], &g[r * w..(r + 1) * w]);
                        }
                    }
                }
            }
            Op::GradMask0 { x, mask } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    let w = g.len() / mask.len().max(1);
                    for (r, &m) in mask.iter().enumerate() {
                        if m == 0.0 {
                            continue;
                        }
                        for j in r * w..(r + 1) * w {
                            gx[j] += g[j] * m;
                        }
                    }
                }
            }
            Op::RowMap { x, map, rows, k } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    let s = out.shape();
                    let (n, c) = (s[0], s[2]);
                    for b in 0..n {
                        kernels::matmul_tn_acc(
                            map,
                            &g[b * rows * c..(b + 1) * rows * c],
                            &mut gx[b * k * c..(b + 1) * k * c],
                            *rows,
                            *k,
                            c,
                        );
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut s = vec![1; rank - shape.len()];
    s.extend_from_slice(shape);
    s
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let (pa, pb) = (pad_shape(a, r), pad_shape(b, r));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch(op, a, b)),
        })
        .collect()
}
