//! Raw forward/backward kernels on flat buffers.
//!
//! The graph in [`super::graph`] records which kernel produced a node and
//! calls the matching adjoint during the backward sweep. The kernels are also
//! used directly by inference paths that do not need gradients.

use super::Tensor;
use crate::error::{shape_err, Result};

/// `a [m×k] · b [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ [k×m]ᵀ · b [k×n]` without materialising the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("matmul_tn {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("matmul_nt {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Geometry of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv1dGeom {
    pub fn out_len(&self, len: usize, k: usize) -> Result<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return Err(shape_err!(
                "conv1d: kernel span {} exceeds padded length {}",
                span,
                padded
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output positions `l` for which tap `k` reads an in-bounds input sample.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (isize, usize, usize) {
        let off = (k * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = len as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
        (off, lo.max(0) as usize, hi.max(lo) as usize)
    }
}

fn conv1d_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (ci, len) = x.dims2()?;
    let (co, wci, k) = w.dims3()?;
    if wci != ci {
        return Err(shape_err!(
            "conv1d: kernel expects {} input channels, input has {} (input {:?}, kernel {:?})",
            wci,
            ci,
            x.shape(),
            w.shape()
        ));
    }
    Ok((ci, len, co, k))
}

/// `x [C_in×L]`, `w [C_out×C_in×K]` → `[C_out×L_out]`.
pub fn conv1d(x: &Tensor, w: &Tensor, g: Conv1dGeom) -> Result<Tensor> {
    let (ci, len, co, k) = conv1d_dims(x, w)?;
    let lout = g.out_len(len, k)?;
    let mut out = vec![0.0; co * lout];
    let (xd, wd) = (x.data(), w.data());
    for kk in 0..k {
        let (off, lo, hi) = g.valid(kk, len, lout);
        if lo >= hi {
            continue;
        }
        for o in 0..co {
            let orow = &mut out[o * lout..(o + 1) * lout];
            for i in 0..ci {
                let wv = wd[(o * ci + i) * k + kk];
                if wv == 0.0 {
                    continue;
                }
                let xrow = &xd[i * len..(i + 1) * len];
                if g.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    let src = &xrow[start..start + (hi - lo)];
                    for (dst, &xv) in orow[lo..hi].iter_mut().zip(src) {
                        *dst += wv * xv;
                    }
                } else {
                    for l in lo..hi {
                        orow[l] += wv * xrow[(l as isize * g.stride as isize + off) as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, lout], out)
}

/// Gradients of [`conv1d`] with respect to its input and kernel.
pub fn conv1d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, g: Conv1dGeom) -> (Tensor, Tensor) {
    let (ci, len, co, k) = conv1d_dims(x, w).expect("checked in forward");
    let lout = dy.shape()[1];
    let mut dx = vec![0.0; ci * len];
    let mut dw = vec![0.0; co * ci * k];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    for kk in 0..k {
        let (off, lo, hi) = g.valid(kk, len, lout);
        if lo >= hi {
            continue;
        }
        for o in 0..co {
            let gy = &dyd[o * lout..(o + 1) * lout];
            for i in 0..ci {
                let widx = (o * ci + i) * k + kk;
                let wv = wd[widx];
                let xrow = &xd[i * len..(i + 1) * len];
                let dxrow = &mut dx[i * len..(i + 1) * len];
                let mut acc = 0.0;
                if g.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    let n = hi - lo;
                    for ((&gv, &xv), dxv) in gy[lo..hi]
                        .iter()
                        .zip(&xrow[start..start + n])
                        .zip(&mut dxrow[start..start + n])
                    {
                        acc += gv * xv;
                        *dxv += wv * gv;
                    }
                } else {
                    for l in lo..hi {
                        let p = (l as isize * g.stride as isize + off) as usize;
                        acc += gy[l] * xrow[p];
                        dxrow[p] += wv * gy[l];
                    }
                }
                dw[widx] += acc;
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
    )
}

/// Geometry of a 2-D transposed convolution whose output is exactly
/// `stride ×` the input along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TConv2dGeom {
    pub stride_f: usize,
    pub stride_t: usize,
    pub pad_f: usize,
    pub pad_t: usize,
}

impl TConv2dGeom {
    /// Crop so that output extents equal input extents times the strides.
    pub fn exact(kf: usize, kt: usize, stride_f: usize, stride_t: usize) -> Result<Self> {
        if stride_f == 0 || stride_t == 0 {
            return Err(shape_err!("transposed conv: strides must be positive"));
        }
        if kf < stride_f || kt < stride_t {
            return Err(shape_err!(
                "transposed conv: kernel {}x{} smaller than stride {}x{}",
                kf,
                kt,
                stride_f,
                stride_t
            ));
        }
        Ok(Self { stride_f, stride_t, pad_f: (kf - stride_f) / 2, pad_t: (kt - stride_t) / 2 })
    }
}

fn tconv_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (ci, f, t) = x.dims3()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[0] != ci {
        return Err(shape_err!(
            "transposed conv: kernel {:?} incompatible with input {:?}",
            ws,
            x.shape()
        ));
    }
    Ok((ci, f, t, ws[1], ws[2], ws[3]))
}

/// `x [C_in×F×T]`, `w [C_in×C_out×K_f×K_t]` → `[C_out×F·s_f×T·s_t]`.
pub fn transposed_conv2d(x: &Tensor, w: &Tensor, g: TConv2dGeom) -> Result<Tensor> {
    let (ci, f, t, co, kf, kt) = tconv_dims(x, w)?;
    let (fo, to) = (f * g.stride_f, t * g.stride_t);
    let mut out = vec![0.0; co * fo * to];
    let (xd, wd) = (x.data(), w.data());
    for i in 0..ci {
        for o in 0..co {
            for a in 0..kf {
                for b in 0..kt {
                    let wv = wd[((i * co + o) * kf + a) * kt + b];
                    if wv == 0.0 {
                        continue;
                    }
                    for fi in 0..f {
                        let ff = (fi * g.stride_f + a) as isize - g.pad_f as isize;
                        if ff < 0 || ff as usize >= fo {
                            continue;
                        }
                        let orow = &mut out[(o * fo + ff as usize) * to..(o * fo + ff as usize + 1) * to];
                        let xrow = &xd[(i * f + fi) * t..(i * f + fi + 1) * t];
                        for (ti, &xv) in xrow.iter().enumerate() {
                            let tt = (ti * g.stride_t + b) as isize - g.pad_t as isize;
                            if tt >= 0 && (tt as usize) < to {
                                orow[tt as usize] += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, fo, to], out)
}

/// Strided 2-D convolution `[C_out×F·s_f×T·s_t]` → `[C_in×F×T]`; the exact
/// adjoint of [`transposed_conv2d`] for the same kernel and geometry.
pub fn strided_conv2d(y: &Tensor, w: &Tensor, g: TConv2dGeom, in_f: usize, in_t: usize) -> Result<Tensor> {
    let ws = w.shape();
    if ws.len() != 4 {
        return Err(shape_err!("strided conv: kernel must be rank 4, got {:?}", ws));
    }
    let (ci, co, kf, kt) = (ws[0], ws[1], ws[2], ws[3]);
    let (yc, fo, to) = y.dims3()?;
    if yc != co || fo != in_f * g.stride_f || to != in_t * g.stride_t {
        return Err(shape_err!("strided conv: input {:?} incompatible with kernel {:?}", y.shape(), ws));
    }
    let mut out = vec![0.0; ci * in_f * in_t];
    let (yd, wd) = (y.data(), w.data());
    for i in 0..ci {
        for o in 0..co {
            for a in 0..kf {
                for b in 0..kt {
                    let wv = wd[((i * co + o) * kf + a) * kt + b];
                    if wv == 0.0 {
                        continue;
                    }
                    for fi in 0..in_f {
                        let ff = (fi * g.stride_f + a) as isize - g.pad_f as isize;
                        if ff < 0 || ff as usize >= fo {
                            continue;
                        }
                        let yrow = &yd[(o * fo + ff as usize) * to..(o * fo + ff as usize + 1) * to];
                        let orow = &mut out[(i * in_f + fi) * in_t..(i * in_f + fi + 1) * in_t];
                        for (ti, ov) in orow.iter_mut().enumerate() {
                            let tt = (ti * g.stride_t + b) as isize - g.pad_t as isize;
                            if tt >= 0 && (tt as usize) < to {
                                *ov += wv * yrow[tt as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ci, in_f, in_t], out)
}

/// Kernel gradient of [`transposed_conv2d`].
pub fn transposed_conv2d_weight_grad(x: &Tensor, w: &Tensor, dy: &Tensor, g: TConv2dGeom) -> Tensor {
    let (ci, f, t, co, kf, kt) = tconv_dims(x, w).expect("checked in forward");
    let (fo, to) = (f * g.stride_f, t * g.stride_t);
    let mut dw = vec![0.0; w.len()];
    let (xd, yd) = (x.data(), dy.data());
    for i in 0..ci {
        for o in 0..co {
            for a in 0..kf {
                for b in 0..kt {
                    let mut acc = 0.0;
                    for fi in 0..f {
                        let ff = (fi * g.stride_f + a) as isize - g.pad_f as isize;
                        if ff < 0 || ff as usize >= fo {
                            continue;
                        }
                        let yrow = &yd[(o * fo + ff as usize) * to..(o * fo + ff as usize + 1) * to];
                        let xrow = &xd[(i * f + fi) * t..(i * f + fi + 1) * t];
                        for (ti, &xv) in xrow.iter().enumerate() {
                            let tt = (ti * g.stride_t + b) as isize - g.pad_t as isize;
                            if tt >= 0 && (tt as usize) < to {
                                acc += xv * yrow[tt as usize];
                            }
                        }
                    }
                    dw[((i * co + o) * kf + a) * kt + b] = acc;
                }
            }
        }
    }
    Tensor::new(w.shape().to_vec(), dw).unwrap()
}

/// Row-wise softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
