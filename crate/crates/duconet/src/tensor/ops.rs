//! Forward and backward kernels for the tape ops.
//!
//! Convolutions lower to GEMM via im2col. The GEMM inner loops are written
//! axpy-style (scale a row of B into a row of C) so LLVM can vectorize them
//! without reassociating reductions.

use crate::{Error, Result};

use super::Tensor;

/// C[m,n] += A[m,k] * B[k,n], all row-major.
pub(crate) fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// C[m,n] += A^T[m,k] * B[k,n] where A is stored as [k,m] row-major.
pub(crate) fn gemm_at_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Resolved geometry for a 2d convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.oh, self.ow]
    }
}

fn out_extent(op: &'static str, inp: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = inp + 2 * padding;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!(
                "input extent {} with kernel {}, stride {}, padding {} leaves no integral output",
                inp, k, stride, padding
            ),
        });
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn conv2d_dims(
    op: &'static str,
    input: &Tensor,
    kernel_shape: &[usize],
    kernel_batched: bool,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let (n, c, h, w) = input.dims4(op)?;
    let want_rank = if kernel_batched { 5 } else { 4 };
    if kernel_shape.len() != want_rank {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected rank-{} kernel, got shape {:?}", want_rank, kernel_shape),
        });
    }
    let ks = if kernel_batched { &kernel_shape[1..] } else { kernel_shape };
    let (o, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kernel_batched && kernel_shape[0] != n {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("kernel batch {} does not match input batch {}", kernel_shape[0], n),
        });
    }
    if kc != c {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("kernel input channels {} do not match input channels {}", kc, c),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("kernel must be square with odd size, got {}x{}", kh, kw),
        });
    }
    if stride == 0 {
        return Err(Error::ShapeMismatch { op, detail: "stride must be positive".into() });
    }
    let oh = out_extent(op, h, kh, stride, padding)?;
    let ow = out_extent(op, w, kw, stride, padding)?;
    Ok(ConvDims { n, c, h, w, o, k: kh, stride, padding, oh, ow })
}

/// Fills cols[CKK, OH*OW] with input patches for one sample (zero padding).
fn im2col(input_n: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let ohw = d.oh * d.ow;
    let mut r = 0;
    for c in 0..d.c {
        let chan = &input_n[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = &mut cols[r * ohw..(r + 1) * ohw];
                r += 1;
                for oh in 0..d.oh {
                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                    let dst = &mut row[oh * d.ow..(oh + 1) * d.ow];
                    if ih < 0 || ih >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &chan[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for (ow, v) in dst.iter_mut().enumerate() {
                        let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                        *v = if iw < 0 || iw >= d.w as isize { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Fills cols_t[OH*OW, CKK], the transpose of [`im2col`], for one sample.
fn im2row(input_n: &[f64], d: &ConvDims, cols_t: &mut [f64]) {
    let ckk = d.ckk();
    for oh in 0..d.oh {
        for ow in 0..d.ow {
            let dst = &mut cols_t[(oh * d.ow + ow) * ckk..(oh * d.ow + ow + 1) * ckk];
            let mut r = 0;
            for c in 0..d.c {
                let chan = &input_n[c * d.h * d.w..(c + 1) * d.h * d.w];
                for ki in 0..d.k {
                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                    for kj in 0..d.k {
                        let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                        dst[r] = if ih < 0 || ih >= d.h as isize || iw < 0 || iw >= d.w as isize {
                            0.0
                        } else {
                            chan[ih as usize * d.w + iw as usize]
                        };
                        r += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-adds column gradients back onto one sample's input gradient.
fn col2im_acc(gcols: &[f64], d: &ConvDims, gin_n: &mut [f64]) {
    let ohw = d.oh * d.ow;
    let mut r = 0;
    for c in 0..d.c {
        let base = c * d.h * d.w;
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = &gcols[r * ohw..(r + 1) * ohw];
                r += 1;
                for oh in 0..d.oh {
                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let row_base = base + ih as usize * d.w;
                    for ow in 0..d.ow {
                        let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                        if iw >= 0 && iw < d.w as isize {
                            gin_n[row_base + iw as usize] += row[oh * d.ow + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, d: &ConvDims) -> Tensor {
    let ohw = d.oh * d.ow;
    let ckk = d.ckk();
    let mut out = Tensor::zeros(&d.out_shape());
    let mut cols = vec![0.0; ckk * ohw];
    for n in 0..d.n {
        im2col(&input.data()[n * d.c * d.h * d.w..], d, &mut cols);
        let out_n = &mut out.data_mut()[n * d.o * ohw..(n + 1) * d.o * ohw];
        let ker = if kernel.shape().len() == 5 {
            &kernel.data()[n * d.o * ckk..(n + 1) * d.o * ckk]
        } else {
            kernel.data()
        };
        gemm_acc(out_n, ker, &cols, d.o, ckk, ohw);
    }
    out
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    d: &ConvDims,
    gout: &[f64],
    mut gin: Option<&mut [f64]>,
    mut gker: Option<&mut [f64]>,
) {
    let ohw = d.oh * d.ow;
    let ckk = d.ckk();
    let per_sample_kernel = kernel.shape().len() == 5;
    let mut cols_t = if gker.is_some() { vec![0.0; ohw * ckk] } else { Vec::new() };
    let mut gcols = if gin.is_some() { vec![0.0; ckk * ohw] } else { Vec::new() };
    for n in 0..d.n {
        let gout_n = &gout[n * d.o * ohw..(n + 1) * d.o * ohw];
        let koff = if per_sample_kernel { n * d.o * ckk } else { 0 };
        if let Some(gker) = gker.as_deref_mut() {
            im2row(&input.data()[n * d.c * d.h * d.w..], d, &mut cols_t);
            gemm_acc(&mut gker[koff..koff + d.o * ckk], gout_n, &cols_t, d.o, ohw, ckk);
        }
        if let Some(gin) = gin.as_deref_mut() {
            gcols.fill(0.0);
            let ker = &kernel.data()[koff..koff + d.o * ckk];
            gemm_at_acc(&mut gcols, ker, gout_n, ckk, d.o, ohw);
            col2im_acc(&gcols, d, &mut gin[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w]);
        }
    }
}

pub(crate) fn avg_pool_global_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("avg_pool_global")?;
    let hw = (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n * c {
        let s: f64 = x.data()[i * h * w..(i + 1) * h * w].iter().sum();
        out.data_mut()[i] = s / hw;
    }
    Ok(out)
}

pub(crate) fn avg_pool_global_backward(x_shape: &[usize], gout: &[f64], gin: &mut [f64]) {
    let (h, w) = (x_shape[2], x_shape[3]);
    let inv = 1.0 / (h * w) as f64;
    for (i, g) in gout.iter().enumerate() {
        let gv = g * inv;
        for v in &mut gin[i * h * w..(i + 1) * h * w] {
            *v += gv;
        }
    }
}

pub(crate) fn avg_pool2_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "avg_pool2",
            detail: format!("spatial extent {}x{} is not divisible by 2", h, w),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for i in 0..n * c {
        let plane = &x.data()[i * h * w..(i + 1) * h * w];
        let oplane = &mut out.data_mut()[i * oh * ow..(i + 1) * oh * ow];
        for y in 0..oh {
            for x_ in 0..ow {
                let t = 2 * y * w + 2 * x_;
                oplane[y * ow + x_] =
                    0.25 * (plane[t] + plane[t + 1] + plane[t + w] + plane[t + w + 1]);
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool2_backward(x_shape: &[usize], gout: &[f64], gin: &mut [f64]) {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    for i in 0..n * c {
        let gplane = &mut gin[i * h * w..(i + 1) * h * w];
        let goplane = &gout[i * oh * ow..(i + 1) * oh * ow];
        for y in 0..oh {
            for x_ in 0..ow {
                let g = 0.25 * goplane[y * ow + x_];
                let t = 2 * y * w + 2 * x_;
                gplane[t] += g;
                gplane[t + 1] += g;
                gplane[t + w] += g;
                gplane[t + w + 1] += g;
            }
        }
    }
}

pub(crate) fn fully_connected_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
    if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || bs[0] != ws[0] {
        return Err(Error::ShapeMismatch {
            op: "fully_connected",
            detail: format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
        });
    }
    let (n, din, dout) = (xs[0], xs[1], ws[0]);
    let mut out = Tensor::zeros(&[n, dout]);
    for i in 0..n {
        let xrow = &x.data()[i * din..(i + 1) * din];
        let orow = &mut out.data_mut()[i * dout..(i + 1) * dout];
        orow.copy_from_slice(b.data());
        for (o, ov) in orow.iter_mut().enumerate() {
            let wrow = &w.data()[o * din..(o + 1) * din];
            let mut acc = 0.0;
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            *ov += acc;
        }
    }
    Ok(out)
}

pub(crate) fn fully_connected_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    for i in 0..n {
        let grow = &gout[i * dout..(i + 1) * dout];
        let xrow = &x.data()[i * din..(i + 1) * din];
        if let Some(gx) = gx.as_deref_mut() {
            let gxrow = &mut gx[i * din..(i + 1) * din];
            for (o, gv) in grow.iter().enumerate() {
                let wrow = &w.data()[o * din..(o + 1) * din];
                for (gxv, wv) in gxrow.iter_mut().zip(wrow) {
                    *gxv += gv * wv;
                }
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            for (o, gv) in grow.iter().enumerate() {
                let gwrow = &mut gw[o * din..(o + 1) * din];
                for (gwv, xv) in gwrow.iter_mut().zip(xrow) {
                    *gwv += gv * xv;
                }
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..n {
            for (gbv, gv) in gb.iter_mut().zip(&gout[i * dout..(i + 1) * dout]) {
                *gbv += gv;
            }
        }
    }
}

pub(crate) fn softmax_channels_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("softmax_over_channels")?;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        for p in 0..hw {
            let base = i * c * hw + p;
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(x.data()[base + ch * hw]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (x.data()[base + ch * hw] - mx).exp();
                out.data_mut()[base + ch * hw] = e;
                sum += e;
            }
            for ch in 0..c {
                out.data_mut()[base + ch * hw] /= sum;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_channels_backward(y: &Tensor, gout: &[f64], gin: &mut [f64]) {
    let (n, c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let hw = h * w;
    for i in 0..n {
        for p in 0..hw {
            let base = i * c * hw + p;
            let mut dot = 0.0;
            for ch in 0..c {
                dot += gout[base + ch * hw] * y.data()[base + ch * hw];
            }
            for ch in 0..c {
                let idx = base + ch * hw;
                gin[idx] += y.data()[idx] * (gout[idx] - dot);
            }
        }
    }
}

pub(crate) fn upsample_nearest_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("upsample_nearest")?;
    if factor == 0 {
        return Err(Error::ShapeMismatch { op: "upsample_nearest", detail: "factor must be positive".into() });
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for ch in 0..n * c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out.data_mut()[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / factor) * w..(y / factor + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (x_, dv) in drow.iter_mut().enumerate() {
                *dv = srow[x_ / factor];
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample_nearest_backward(x_shape: &[usize], factor: usize, gout: &[f64], gin: &mut [f64]) {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    for ch in 0..n * c {
        let gdst = &mut gin[ch * h * w..(ch + 1) * h * w];
        let gsrc = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            let grow = &gsrc[y * ow..(y + 1) * ow];
            let drow = &mut gdst[(y / factor) * w..(y / factor + 1) * w];
            for (x_, gv) in grow.iter().enumerate() {
                drow[x_ / factor] += gv;
            }
        }
    }
}

/// out[n,o,i,s] = base[o,i,s] * scales[n,i]; base is [O,I,k,k], scales [N,I].
pub(crate) fn kernel_modulate_forward(base: &Tensor, scales: &Tensor) -> Result<Tensor> {
    let bs = base.shape();
    let ss = scales.shape();
    if bs.len() != 4 || ss.len() != 2 || ss[1] != bs[1] {
        return Err(Error::ShapeMismatch {
            op: "modulate_kernel",
            detail: format!("base {:?}, scales {:?}", bs, ss),
        });
    }
    let (o, i, kk) = (bs[0], bs[1], bs[2] * bs[3]);
    let n = ss[0];
    let mut out = Tensor::zeros(&[n, o, i, bs[2], bs[3]]);
    for nn in 0..n {
        let srow = &scales.data()[nn * i..(nn + 1) * i];
        let orow = &mut out.data_mut()[nn * o * i * kk..(nn + 1) * o * i * kk];
        for oo in 0..o {
            for ii in 0..i {
                let u = srow[ii];
                let boff = (oo * i + ii) * kk;
                for s in 0..kk {
                    orow[boff + s] = base.data()[boff + s] * u;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn kernel_modulate_backward(
    base: &Tensor,
    scales: &Tensor,
    gout: &[f64],
    mut gbase: Option<&mut [f64]>,
    mut gscales: Option<&mut [f64]>,
) {
    let bs = base.shape();
    let (o, i, kk) = (bs[0], bs[1], bs[2] * bs[3]);
    let n = scales.shape()[0];
    for nn in 0..n {
        let srow = &scales.data()[nn * i..(nn + 1) * i];
        let grow = &gout[nn * o * i * kk..(nn + 1) * o * i * kk];
        for oo in 0..o {
            for ii in 0..i {
                let boff = (oo * i + ii) * kk;
                if let Some(gb) = gbase.as_deref_mut() {
                    let u = srow[ii];
                    for s in 0..kk {
                        gb[boff + s] += grow[boff + s] * u;
                    }
                }
                if let Some(gs) = gscales.as_deref_mut() {
                    let mut acc = 0.0;
                    for s in 0..kk {
                        acc += grow[boff + s] * base.data()[boff + s];
                    }
                    gs[nn * i + ii] += acc;
                }
            }
        }
    }
}

/// Per (sample, output channel): out = k / sqrt(sum(k^2) + eps).
pub(crate) fn kernel_demodulate_forward(kernels: &Tensor, eps: f64) -> Result<Tensor> {
    let ks = kernels.shape();
    if ks.len() != 5 {
        return Err(Error::ShapeMismatch {
            op: "demodulate_kernel",
            detail: format!("expected [N,O,I,k,k], got {:?}", ks),
        });
    }
    let group = ks[2] * ks[3] * ks[4];
    let mut out = Tensor::zeros(ks);
    for g in 0..ks[0] * ks[1] {
        let src = &kernels.data()[g * group..(g + 1) * group];
        let s: f64 = src.iter().map(|v| v * v).sum();
        let d = 1.0 / (s + eps).sqrt();
        for (ov, kv) in out.data_mut()[g * group..(g + 1) * group].iter_mut().zip(src) {
            *ov = kv * d;
        }
    }
    Ok(out)
}

pub(crate) fn kernel_demodulate_backward(kernels: &Tensor, eps: f64, gout: &[f64], gin: &mut [f64]) {
    let ks = kernels.shape();
    let group = ks[2] * ks[3] * ks[4];
    for g in 0..ks[0] * ks[1] {
        let src = &kernels.data()[g * group..(g + 1) * group];
        let grow = &gout[g * group..(g + 1) * group];
        let s: f64 = src.iter().map(|v| v * v).sum();
        let d = 1.0 / (s + eps).sqrt();
        let d3 = d * d * d;
        let mut dot = 0.0;
        for (gv, kv) in grow.iter().zip(src) {
            dot += gv * kv;
        }
        let gin_row = &mut gin[g * group..(g + 1) * group];
        for ((gi, gv), kv) in gin_row.iter_mut().zip(grow).zip(src) {
            *gi += gv * d - kv * d3 * dot;
        }
    }
}
