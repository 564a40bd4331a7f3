//! Raw loops behind the tape ops. Everything here runs in a fixed order so
//! results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (kk, cv) in crow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            *cv += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += aik * gv;
            }
        }
    }
}

/// Geometry of an NHWC convolution with a `[kh, kw, cin, cout]` kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let r = (n * g.ho + oy) * g.wo + ox;
                let dst = &mut cols[r * patch..(r + 1) * patch];
                for dy in 0..g.k {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.k {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let o = (dy * g.k + dx) * g.cin;
                        dst[o..o + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_acc(cols: &[f64], g: &ConvGeom, dx_buf: &mut [f64]) {
    let patch = g.patch();
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let r = (n * g.ho + oy) * g.wo + ox;
                let src = &cols[r * patch..(r + 1) * patch];
                for dy in 0..g.k {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.k {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let o = (dy * g.k + dx) * g.cin;
                        for (d, s) in dx_buf[dst..dst + g.cin].iter_mut().zip(&src[o..o + g.cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 depthwise convolution, NHWC input, `[k, k, c]` kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DwGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub pad: usize,
}

impl DwGeom {
    fn taps(&self, y: usize, x: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (k, pad, h, w) = (self.k, self.pad, self.h as isize, self.w as isize);
        (0..k * k).filter_map(move |t| {
            let (dy, dx) = (t / k, t % k);
            let iy = (y + dy) as isize - pad as isize;
            let ix = (x + dx) as isize - pad as isize;
            (iy >= 0 && iy < h && ix >= 0 && ix < w).then_some((t, iy as usize, ix as usize))
        })
    }
}

pub(crate) fn depthwise_forward(x: &[f64], wt: &[f64], g: &DwGeom) -> Vec<f64> {
    let c = g.c;
    let mut out = vec![0.0; g.n * g.h * g.w * c];
    for n in 0..g.n {
        for y in 0..g.h {
            for xx in 0..g.w {
                let o = ((n * g.h + y) * g.w + xx) * c;
                for (t, iy, ix) in g.taps(y, xx) {
                    let i = ((n * g.h + iy) * g.w + ix) * c;
                    let wrow = &wt[t * c..(t + 1) * c];
                    let (dst, src) = (&mut out[o..o + c], &x[i..i + c]);
                    for ((d, s), wv) in dst.iter_mut().zip(src).zip(wrow) {
                        *d += s * wv;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    g: &DwGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let c = g.c;
    for n in 0..g.n {
        for y in 0..g.h {
            for xx in 0..g.w {
                let o = ((n * g.h + y) * g.w + xx) * c;
                let grow = &gout[o..o + c];
                for (t, iy, ix) in g.taps(y, xx) {
                    let i = ((n * g.h + iy) * g.w + ix) * c;
                    if let Some(dx) = dx.as_deref_mut() {
                        let wrow = &wt[t * c..(t + 1) * c];
                        for ((d, gv), wv) in dx[i..i + c].iter_mut().zip(grow).zip(wrow) {
                            *d += gv * wv;
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let src = &x[i..i + c];
                        for ((d, gv), s) in dw[t * c..(t + 1) * c].iter_mut().zip(grow).zip(src) {
                            *d += gv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Strides of `shape` aligned to `out` (rank already equal), zero on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for d in (0..out.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of a broadcast.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let outer: usize = out[..r - 1].iter().product();
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * inner;
        for k in 0..inner {
            f(base + k, oa + k * ia, ob + k * ib);
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Index map of a permutation: `out[i] = x[src[i]]`.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for d in (0..r.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0usize; r];
    let mut src = Vec::with_capacity(shape.iter().product());
    for_each_broadcast(&out_shape, &perm_strides, &zero, |_, a, _| src.push(a));
    src
}

/// Bilinear resampling matrix (half-pixel centres) from an `ih x iw` grid to
/// `oh x ow`, row-major `[oh*ow, ih*iw]`. Equal sizes give the identity.
pub fn bilinear_matrix(ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<f64> {
    let axis = |i_len: usize, o_len: usize| -> Vec<(usize, usize, f64)> {
        (0..o_len)
            .map(|o| {
                let src = (o as f64 + 0.5) * i_len as f64 / o_len as f64 - 0.5;
                let src = src.clamp(0.0, (i_len - 1) as f64);
                let lo = libm::floor(src) as usize;
                let hi = (lo + 1).min(i_len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(ih, oh);
    let xs = axis(iw, ow);
    let mut m = vec![0.0; oh * ow * ih * iw];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let row = &mut m[(oy * ow + ox) * ih * iw..(oy * ow + ox + 1) * ih * iw];
            row[y0 * iw + x0] += (1.0 - fy) * (1.0 - fx);
            row[y0 * iw + x1] += (1.0 - fy) * fx;
            row[y1 * iw + x0] += fy * (1.0 - fx);
            row[y1 * iw + x1] += fy * fx;
        }
    }
    m
}
