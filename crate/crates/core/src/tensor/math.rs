//! Pure forward/backward kernels shared by the graph engine.
//!
//! Every kernel accumulates each output element in a fixed order, so results
//! are bitwise identical whether or not the outer loops run on the rayon
//! pool.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Work threshold below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

/// Numpy-style broadcast of two shapes, aligned from the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `shape` padded/expanded to `out_rank`, with broadcast axes
/// (extent 1) given stride 0.
fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let base = strides_for(shape);
    let mut s = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { base[i] };
    }
    s
}

/// Elementwise binary op with broadcasting.
pub(crate) fn binary_broadcast<R: Real>(
    a: &Tensor<R>,
    b: &Tensor<R>,
    out_shape: &[usize],
    f: impl Fn(R, R) -> R,
) -> Tensor<R> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor {
            shape: out_shape.to_vec(),
            data,
        };
    }
    let rank = out_shape.len();
    let sa = broadcast_strides(a.shape(), rank);
    let sb = broadcast_strides(b.shape(), rank);
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        data.push(f(a.data()[ia], b.data()[ib]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor {
        shape: out_shape.to_vec(),
        data,
    }
}

/// Sum `grad` (of shape `from`) down to `to`, undoing broadcasting.
pub(crate) fn reduce_to_shape<R: Real>(grad: &Tensor<R>, to: &[usize]) -> Tensor<R> {
    if grad.shape() == to {
        return grad.clone();
    }
    let rank = grad.rank();
    let st = broadcast_strides(to, rank);
    let to_numel: usize = to.iter().product();
    let mut out = vec![R::zero(); to_numel];
    let mut idx = vec![0usize; rank];
    for &g in grad.data() {
        let mut it = 0;
        for d in 0..rank {
            it += idx[d] * st[d];
        }
        out[it] = out[it] + g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < grad.shape()[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor {
        shape: to.to_vec(),
        data: out,
    }
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

/// C = A·B with A: m×k, B: k×n.
pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (kb, n) = dims2(b, "matmul rhs")?;
    if k != kb {
        return Err(Error::InvalidArgument(format!(
            "matmul: lhs is {m}x{k}, rhs is {kb}x{n}"
        )));
    }
    let mut out = vec![R::zero(); m * n];
    let body = |i: usize, row: &mut [R]| {
        for p in 0..k {
            let aip = a.data()[i * k + p];
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// C = A·Bᵀ with A: m×n, B: k×n → m×k.
pub(crate) fn matmul_abt<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (m, n) = dims2(a, "matmul_abt lhs")?;
    let (k, nb) = dims2(b, "matmul_abt rhs")?;
    if n != nb {
        return Err(Error::InvalidArgument(format!(
            "matmul_abt: lhs is {m}x{n}, rhs is {k}x{nb}"
        )));
    }
    let mut out = vec![R::zero(); m * k];
    let body = |i: usize, row: &mut [R]| {
        let arow = &a.data()[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let brow = &b.data()[p * n..(p + 1) * n];
            let mut acc = R::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *o = acc;
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(k).enumerate() {
            body(i, row);
        }
    }
    Tensor::new(vec![m, k], out)
}

/// C = Aᵀ·B with A: m×k, B: m×n → k×n.
pub(crate) fn matmul_atb<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (m, k) = dims2(a, "matmul_atb lhs")?;
    let (mb, n) = dims2(b, "matmul_atb rhs")?;
    if m != mb {
        return Err(Error::InvalidArgument(format!(
            "matmul_atb: lhs is {m}x{k}, rhs is {mb}x{n}"
        )));
    }
    let mut out = vec![R::zero(); k * n];
    let body = |p: usize, row: &mut [R]| {
        for i in 0..m {
            let aip = a.data()[i * k + p];
            let brow = &b.data()[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(p, row)| body(p, row));
    } else {
        for (p, row) in out.chunks_mut(n).enumerate() {
            body(p, row);
        }
    }
    Tensor::new(vec![k, n], out)
}

fn dims2<R: Real>(t: &Tensor<R>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::InvalidArgument(format!(
            "{what}: expected 2-D tensor, got shape {s:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadSpec {
    Valid,
    Same,
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub pt: usize,
    pub pl: usize,
}

pub(crate) fn conv_dims(
    input: &[usize],
    kh: usize,
    kw: usize,
    pad: PadSpec,
) -> Result<ConvDims> {
    let (n, ci, h, w) = match input {
        &[n, c, h, w] => (n, c, h, w),
        s => {
            return Err(Error::InvalidArgument(format!(
                "convolution expects 4-D input (n,c,h,w), got {s:?}"
            )))
        }
    };
    let (oh, ow, pt, pl) = match pad {
        PadSpec::Valid => {
            if h < kh || w < kw {
                return Err(Error::InvalidArgument(format!(
                    "valid convolution: kernel {kh}x{kw} larger than input {h}x{w}"
                )));
            }
            (h - kh + 1, w - kw + 1, 0, 0)
        }
        PadSpec::Same => (h, w, (kh - 1) / 2, (kw - 1) / 2),
    };
    Ok(ConvDims {
        n,
        ci,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        pt,
        pl,
    })
}

/// Accumulate `out[lo..hi] += k * in[lo+off..hi+off]` (off may be negative).
#[inline]
fn axpy_shift<R: Real>(out: &mut [R], inp: &[R], k: R, lo: usize, hi: usize, off: isize) {
    let src = &inp[(lo as isize + off) as usize..(hi as isize + off) as usize];
    for (o, &x) in out[lo..hi].iter_mut().zip(src) {
        *o = *o + k * x;
    }
}

/// Standard 2-D convolution: input n×ci×h×w, kernel co×ci×kh×kw.
pub(crate) fn conv2d_forward<R: Real>(
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    pad: PadSpec,
) -> Result<Tensor<R>> {
    let &[co, kci, kh, kw] = match kernel.shape() {
        s @ &[_, _, _, _] => <&[usize; 4]>::try_from(s).unwrap(),
        s => {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel must be 4-D (co,ci,kh,kw), got {s:?}"
            )))
        }
    };
    let d = conv_dims(input.shape(), kh, kw, pad)?;
    if kci != d.ci {
        return Err(Error::InvalidArgument(format!(
            "conv2d: kernel expects {kci} input channels, input has {}",
            d.ci
        )));
    }
    let mut out = vec![R::zero(); d.n * co * d.oh * d.ow];
    let plane = d.oh * d.ow;
    let body = |bf: usize, dst: &mut [R]| {
        let b = bf / co;
        let f = bf % co;
        for ic in 0..d.ci {
            for dy in 0..d.kh {
                for oy in 0..d.oh {
                    let iy = oy as isize + dy as isize - d.pt as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let in_row =
                        &input.data()[((b * d.ci + ic) * d.h + iy as usize) * d.w..][..d.w];
                    let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    for dx in 0..d.kw {
                        let k = kernel.data()[((f * d.ci + ic) * d.kh + dy) * d.kw + dx];
                        let off = dx as isize - d.pl as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = (d.w as isize - off).min(d.ow as isize).max(0) as usize;
                        if lo < hi {
                            axpy_shift(out_row, in_row, k, lo, hi, off);
                        }
                    }
                }
            }
        }
    };
    let work = d.n * co * plane * d.ci * d.kh * d.kw;
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(|(bf, dst)| body(bf, dst));
    } else {
        for (bf, dst) in out.chunks_mut(plane).enumerate() {
            body(bf, dst);
        }
    }
    Tensor::new(vec![d.n, co, d.oh, d.ow], out)
}

/// Gradients of conv2d w.r.t. input and kernel.
pub(crate) fn conv2d_backward<R: Real>(
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    grad_out: &Tensor<R>,
    pad: PadSpec,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let co = kernel.shape()[0];
    let kh = kernel.shape()[2];
    let kw = kernel.shape()[3];
    let d = conv_dims(input.shape(), kh, kw, pad)?;

    // d input
    let mut din = vec![R::zero(); input.numel()];
    let in_plane = d.h * d.w;
    let din_body = |bc: usize, dst: &mut [R]| {
        let b = bc / d.ci;
        let ic = bc % d.ci;
        for f in 0..co {
            for dy in 0..d.kh {
                for iy in 0..d.h {
                    let oy = iy as isize - dy as isize + d.pt as isize;
                    if oy < 0 || oy >= d.oh as isize {
                        continue;
                    }
                    let gout_row =
                        &grad_out.data()[((b * co + f) * d.oh + oy as usize) * d.ow..][..d.ow];
                    let din_row = &mut dst[iy * d.w..(iy + 1) * d.w];
                    for dx in 0..d.kw {
                        let k = kernel.data()[((f * d.ci + ic) * d.kh + dy) * d.kw + dx];
                        let off = d.pl as isize - dx as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = (d.ow as isize - off).min(d.w as isize).max(0) as usize;
                        if lo < hi {
                            axpy_shift(din_row, gout_row, k, lo, hi, off);
                        }
                    }
                }
            }
        }
    };
    let work = input.numel() * co * kh * kw;
    if work >= PAR_THRESHOLD {
        din.par_chunks_mut(in_plane).enumerate().for_each(|(bc, dst)| din_body(bc, dst));
    } else {
        for (bc, dst) in din.chunks_mut(in_plane).enumerate() {
            din_body(bc, dst);
        }
    }

    // d kernel
    let mut dker = vec![R::zero(); kernel.numel()];
    let ker_stride = d.ci * d.kh * d.kw;
    let dker_body = |f: usize, dst: &mut [R]| {
        for ic in 0..d.ci {
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let off = dx as isize - d.pl as isize;
                    let lo = (-off).max(0) as usize;
                    let hi = (d.w as isize - off).min(d.ow as isize).max(0) as usize;
                    let mut acc = R::zero();
                    if lo < hi {
                        for b in 0..d.n {
                            for oy in 0..d.oh {
                                let iy = oy as isize + dy as isize - d.pt as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let g_row = &grad_out.data()
                                    [((b * co + f) * d.oh + oy) * d.ow..][..d.ow];
                                let in_row = &input.data()
                                    [((b * d.ci + ic) * d.h + iy as usize) * d.w..][..d.w];
                                let src = &in_row
                                    [(lo as isize + off) as usize..(hi as isize + off) as usize];
                                for (&g, &x) in g_row[lo..hi].iter().zip(src) {
                                    acc = acc + g * x;
                                }
                            }
                        }
                    }
                    dst[(ic * d.kh + dy) * d.kw + dx] = acc;
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dker.par_chunks_mut(ker_stride).enumerate().for_each(|(f, dst)| dker_body(f, dst));
    } else {
        for (f, dst) in dker.chunks_mut(ker_stride).enumerate() {
            dker_body(f, dst);
        }
    }

    Ok((
        Tensor::new(input.shape().to_vec(), din)?,
        Tensor::new(kernel.shape().to_vec(), dker)?,
    ))
}

/// Depthwise 2-D convolution: input n×c×h×w, kernel c×m×kh×kw,
/// output channel `ic*m + j`.
pub(crate) fn depthwise_forward<R: Real>(
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    pad: PadSpec,
) -> Result<Tensor<R>> {
    let &[kc, m, kh, kw] = match kernel.shape() {
        s @ &[_, _, _, _] => <&[usize; 4]>::try_from(s).unwrap(),
        s => {
            return Err(Error::InvalidArgument(format!(
                "depthwise kernel must be 4-D (c,m,kh,kw), got {s:?}"
            )))
        }
    };
    let d = conv_dims(input.shape(), kh, kw, pad)?;
    if kc != d.ci {
        return Err(Error::InvalidArgument(format!(
            "depthwise conv: kernel has {kc} channels, input has {}",
            d.ci
        )));
    }
    let co = d.ci * m;
    let plane = d.oh * d.ow;
    let mut out = vec![R::zero(); d.n * co * plane];
    let body = |bq: usize, dst: &mut [R]| {
        let b = bq / co;
        let q = bq % co;
        let ic = q / m;
        let j = q % m;
        for dy in 0..d.kh {
            for oy in 0..d.oh {
                let iy = oy as isize + dy as isize - d.pt as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let in_row = &input.data()[((b * d.ci + ic) * d.h + iy as usize) * d.w..][..d.w];
                let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                for dx in 0..d.kw {
                    let k = kernel.data()[((ic * m + j) * d.kh + dy) * d.kw + dx];
                    let off = dx as isize - d.pl as isize;
                    let lo = (-off).max(0) as usize;
                    let hi = (d.w as isize - off).min(d.ow as isize).max(0) as usize;
                    if lo < hi {
                        axpy_shift(out_row, in_row, k, lo, hi, off);
                    }
                }
            }
        }
    };
    let work = d.n * co * plane * kh * kw;
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(|(bq, dst)| body(bq, dst));
    } else {
        for (bq, dst) in out.chunks_mut(plane).enumerate() {
            body(bq, dst);
        }
    }
    Tensor::new(vec![d.n, co, d.oh, d.ow], out)
}

pub(crate) fn depthwise_backward<R: Real>(
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    grad_out: &Tensor<R>,
    pad: PadSpec,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let m = kernel.shape()[1];
    let kh = kernel.shape()[2];
    let kw = kernel.shape()[3];
    let d = conv_dims(input.shape(), kh, kw, pad)?;
    let co = d.ci * m;

    let mut din = vec![R::zero(); input.numel()];
    let in_plane = d.h * d.w;
    let din_body = |bc: usize, dst: &mut [R]| {
        let b = bc / d.ci;
        let ic = bc % d.ci;
        for j in 0..m {
            let q = ic * m + j;
            for dy in 0..d.kh {
                for iy in 0..d.h {
                    let oy = iy as isize - dy as isize + d.pt as isize;
                    if oy < 0 || oy >= d.oh as isize {
                        continue;
                    }
                    let gout_row =
                        &grad_out.data()[((b * co + q) * d.oh + oy as usize) * d.ow..][..d.ow];
                    let din_row = &mut dst[iy * d.w..(iy + 1) * d.w];
                    for dx in 0..d.kw {
                        let k = kernel.data()[((ic * m + j) * d.kh + dy) * d.kw + dx];
                        let off = d.pl as isize - dx as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = (d.ow as isize - off).min(d.w as isize).max(0) as usize;
                        if lo < hi {
                            axpy_shift(din_row, gout_row, k, lo, hi, off);
                        }
                    }
                }
            }
        }
    };
    let work = input.numel() * m * kh * kw;
    if work >= PAR_THRESHOLD {
        din.par_chunks_mut(in_plane).enumerate().for_each(|(bc, dst)| din_body(bc, dst));
    } else {
        for (bc, dst) in din.chunks_mut(in_plane).enumerate() {
            din_body(bc, dst);
        }
    }

    let mut dker = vec![R::zero(); kernel.numel()];
    let ker_stride = m * kh * kw;
    let dker_body = |ic: usize, dst: &mut [R]| {
        for j in 0..m {
            let q = ic * m + j;
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let off = dx as isize - d.pl as isize;
                    let lo = (-off).max(0) as usize;
                    let hi = (d.w as isize - off).min(d.ow as isize).max(0) as usize;
                    let mut acc = R::zero();
                    if lo < hi {
                        for b in 0..d.n {
                            for oy in 0..d.oh {
                                let iy = oy as isize + dy as isize - d.pt as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let g_row = &grad_out.data()
                                    [((b * co + q) * d.oh + oy) * d.ow..][..d.ow];
                                let in_row = &input.data()
                                    [((b * d.ci + ic) * d.h + iy as usize) * d.w..][..d.w];
                                let src = &in_row
                                    [(lo as isize + off) as usize..(hi as isize + off) as usize];
                                for (&g, &x) in g_row[lo..hi].iter().zip(src) {
                                    acc = acc + g * x;
                                }
                            }
                        }
                    }
                    dst[(j * d.kh + dy) * d.kw + dx] = acc;
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dker.par_chunks_mut(ker_stride).enumerate().for_each(|(ic, dst)| dker_body(ic, dst));
    } else {
        for (ic, dst) in dker.chunks_mut(ker_stride).enumerate() {
            dker_body(ic, dst);
        }
    }

    Ok((
        Tensor::new(input.shape().to_vec(), din)?,
        Tensor::new(kernel.shape().to_vec(), dker)?,
    ))
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

pub(crate) fn avg_pool_out_shape(input: &[usize], ph: usize, pw: usize) -> Result<Vec<usize>> {
    let (n, c, h, w) = match input {
        &[n, c, h, w] => (n, c, h, w),
        s => {
            return Err(Error::InvalidArgument(format!(
                "avg_pool expects 4-D input, got {s:?}"
            )))
        }
    };
    if h < ph || w < pw {
        return Err(Error::InvalidArgument(format!(
            "avg_pool window {ph}x{pw} larger than input {h}x{w}"
        )));
    }
    Ok(vec![n, c, h / ph, w / pw])
}

pub(crate) fn avg_pool_forward<R: Real>(x: &Tensor<R>, ph: usize, pw: usize) -> Result<Tensor<R>> {
    let os = avg_pool_out_shape(x.shape(), ph, pw)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (os[2], os[3]);
    let inv = R::of_f64(1.0 / (ph * pw) as f64);
    let mut out = vec![R::zero(); n * c * oh * ow];
    for bc in 0..n * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = R::zero();
                for dy in 0..ph {
                    let row = &src[(oy * ph + dy) * w + ox * pw..][..pw];
                    for &v in row {
                        acc = acc + v;
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(os, out)
}

pub(crate) fn avg_pool_backward<R: Real>(
    x_shape: &[usize],
    grad_out: &Tensor<R>,
    ph: usize,
    pw: usize,
) -> Result<Tensor<R>> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let inv = R::of_f64(1.0 / (ph * pw) as f64);
    let mut din = vec![R::zero(); n * c * h * w];
    for bc in 0..n * c {
        let g = &grad_out.data()[bc * oh * ow..(bc + 1) * oh * ow];
        let dst = &mut din[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[oy * ow + ox] * inv;
                for dy in 0..ph {
                    let row = &mut dst[(oy * ph + dy) * w + ox * pw..][..pw];
                    for o in row {
                        *o = *o + gv;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), din)
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax over the last axis.
pub(crate) fn softmax_forward<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let cols = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut s = R::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

pub(crate) fn softmax_backward<R: Real>(y: &Tensor<R>, dy: &Tensor<R>) -> Tensor<R> {
    let cols = *y.shape().last().unwrap_or(&1);
    let mut dx = vec![R::zero(); y.numel()];
    for ((drow, yrow), gyrow) in dx
        .chunks_mut(cols)
        .zip(y.data().chunks(cols))
        .zip(dy.data().chunks(cols))
    {
        let mut dot = R::zero();
        for (&g, &yv) in gyrow.iter().zip(yrow) {
            dot = dot + g * yv;
        }
        for ((d, &g), &yv) in drow.iter_mut().zip(gyrow).zip(yrow) {
            *d = yv * (g - dot);
        }
    }
    Tensor {
        shape: y.shape().to_vec(),
        data: dx,
    }
}

// ---------------------------------------------------------------------------
// batch normalization (channel axis 1 of 4-D input)
// ---------------------------------------------------------------------------

pub(crate) struct BnForward<R> {
    pub y: Tensor<R>,
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h * w)),
        s => Err(Error::InvalidArgument(format!(
            "batch_norm expects 4-D input (n,c,h,w), got {s:?}"
        ))),
    }
}

pub(crate) fn bn_forward_train<R: Real>(
    x: &Tensor<R>,
    gamma: &[R],
    beta: &[R],
    eps: f64,
) -> Result<BnForward<R>> {
    let (n, c, hw) = bn_dims(x.shape())?;
    let count = R::of_f64((n * hw) as f64);
    let mut mean = vec![R::zero(); c];
    let mut var = vec![R::zero(); c];
    for ch in 0..c {
        let mut s = R::zero();
        for b in 0..n {
            let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for &v in plane {
                s = s + v;
            }
        }
        let mu = s / count;
        let mut sv = R::zero();
        for b in 0..n {
            let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for &v in plane {
                let d = v - mu;
                sv = sv + d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sv / count;
    }
    let epsr = R::of_f64(eps);
    let mut y = vec![R::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] / (var[ch] + epsr).sqrt();
            let shift = beta[ch];
            let mu = mean[ch];
            let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let dst = &mut y[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mu) * scale + shift;
            }
        }
    }
    Ok(BnForward {
        y: Tensor {
            shape: x.shape().to_vec(),
            data: y,
        },
        mean,
        var,
    })
}

pub(crate) fn bn_backward_train<R: Real>(
    x: &Tensor<R>,
    gamma: &[R],
    mean: &[R],
    var: &[R],
    eps: f64,
    dy: &Tensor<R>,
) -> Result<(Tensor<R>, Vec<R>, Vec<R>)> {
    let (n, c, hw) = bn_dims(x.shape())?;
    let count = R::of_f64((n * hw) as f64);
    let epsr = R::of_f64(eps);
    let mut dx = vec![R::zero(); x.numel()];
    let mut dgamma = vec![R::zero(); c];
    let mut dbeta = vec![R::zero(); c];
    for ch in 0..c {
        let istd = R::one() / (var[ch] + epsr).sqrt();
        let mu = mean[ch];
        let mut sum_dy = R::zero();
        let mut sum_dy_xhat = R::zero();
        for b in 0..n {
            let xs = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let gs = &dy.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (&xv, &g) in xs.iter().zip(gs) {
                sum_dy = sum_dy + g;
                sum_dy_xhat = sum_dy_xhat + g * (xv - mu) * istd;
            }
        }
        dbeta[ch] = sum_dy;
        dgamma[ch] = sum_dy_xhat;
        let mean_dy = sum_dy / count;
        let mean_dy_xhat = sum_dy_xhat / count;
        let gs_scale = gamma[ch] * istd;
        for b in 0..n {
            let xs = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let gs = &dy.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let ds = &mut dx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for ((d, &xv), &g) in ds.iter_mut().zip(xs).zip(gs) {
                let xhat = (xv - mu) * istd;
                *d = gs_scale * (g - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    Ok((
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
        },
        dgamma,
        dbeta,
    ))
}

pub(crate) fn bn_forward_eval<R: Real>(
    x: &Tensor<R>,
    gamma: &[R],
    beta: &[R],
    running_mean: &[R],
    running_var: &[R],
    eps: f64,
) -> Result<Tensor<R>> {
    let (n, c, hw) = bn_dims(x.shape())?;
    let epsr = R::of_f64(eps);
    let mut y = vec![R::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] / (running_var[ch] + epsr).sqrt();
            let mu = running_mean[ch];
            let shift = beta[ch];
            let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let dst = &mut y[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mu) * scale + shift;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape().to_vec(),
        data: y,
    })
}

pub(crate) fn bn_backward_eval<R: Real>(
    x: &Tensor<R>,
    gamma: &[R],
    running_mean: &[R],
    running_var: &[R],
    eps: f64,
    dy: &Tensor<R>,
) -> Result<(Tensor<R>, Vec<R>, Vec<R>)> {
    let (n, c, hw) = bn_dims(x.shape())?;
    let epsr = R::of_f64(eps);
    let mut dx = vec![R::zero(); x.numel()];
    let mut dgamma = vec![R::zero(); c];
    let mut dbeta = vec![R::zero(); c];
    for ch in 0..c {
        let istd = R::one() / (running_var[ch] + epsr).sqrt();
        let mu = running_mean[ch];
        let scale = gamma[ch] * istd;
        let mut sg = R::zero();
        let mut sb = R::zero();
        for b in 0..n {
            let xs = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let gs = &dy.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let ds = &mut dx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for ((d, &xv), &g) in ds.iter_mut().zip(xs).zip(gs) {
                *d = g * scale;
                sg = sg + g * (xv - mu) * istd;
                sb = sb + g;
            }
        }
        dgamma[ch] = sg;
        dbeta[ch] = sb;
    }
    Ok((
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
        },
        dgamma,
        dbeta,
    ))
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub(crate) fn sum_all<R: Real>(x: &Tensor<R>) -> R {
    let mut acc = R::zero();
    for &v in x.data() {
        acc = acc + v;
    }
    acc
}

/// (outer, axis, inner) decomposition for a reduction along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

pub(crate) fn sum_axis_forward<R: Real>(x: &Tensor<R>, axis: usize, keepdim: bool) -> Tensor<R> {
    let (outer, mid, inner) = axis_split(x.shape(), axis);
    let mut out = vec![R::zero(); outer * inner];
    for o in 0..outer {
        for m in 0..mid {
            let src = &x.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = *d + v;
            }
        }
    }
    let mut shape: Vec<usize> = x.shape().to_vec();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Tensor { shape, data: out }
}

pub(crate) fn sum_axis_backward<R: Real>(
    x_shape: &[usize],
    axis: usize,
    grad_out: &Tensor<R>,
) -> Tensor<R> {
    let (outer, mid, inner) = axis_split(x_shape, axis);
    let mut dx = vec![R::zero(); outer * mid * inner];
    for o in 0..outer {
        let g = &grad_out.data()[o * inner..(o + 1) * inner];
        for m in 0..mid {
            let dst = &mut dx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
            dst.copy_from_slice(g);
        }
    }
    Tensor {
        shape: x_shape.to_vec(),
        data: dx,
    }
}

// ---------------------------------------------------------------------------
// misc elementwise
// ---------------------------------------------------------------------------

pub(crate) fn elu_forward<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| if v > R::zero() { v } else { v.exp() - R::one() })
}

pub(crate) fn elu_backward<R: Real>(x: &Tensor<R>, dy: &Tensor<R>) -> Tensor<R> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > R::zero() { g } else { g * v.exp() })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub(crate) fn transpose2d<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (r, c) = dims2(x, "transpose")?;
    let mut out = vec![R::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        let bt = transpose2d(&b).unwrap();
        let at = transpose2d(&a).unwrap();
        assert_eq!(matmul_abt(&a, &bt).unwrap(), c);
        assert_eq!(matmul_atb(&at, &b).unwrap(), c);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 1], &[1, 3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r.data(), &[6.0, 15.0]);
        let r2 = reduce_to_shape(&g, &[1, 3]);
        assert_eq!(r2.data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv2d_valid_hand_case() {
        // 1x1x2x3 input, 1x1x2x2 kernel -> 1x1x1x2
        let x = t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d_forward(&x, &k, PadSpec::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[1.0 + 5.0, 2.0 + 6.0]);
    }

    #[test]
    fn conv2d_same_keeps_width() {
        let x = t(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 3], &[1.0, 1.0, 1.0]);
        let y = conv2d_forward(&x, &k, PadSpec::Same).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4]);
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn depthwise_channel_layout() {
        // 2 channels, multiplier 2: output channel q = ic*m + j
        let x = t(&[1, 2, 1, 2], &[1.0, 2.0, 10.0, 20.0]);
        let k = t(&[2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let y = depthwise_forward(&x, &k, PadSpec::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 2.0, 4.0, 30.0, 60.0, 40.0, 80.0]);
    }

    #[test]
    fn avg_pool_means() {
        let x = t(&[1, 1, 1, 4], &[1.0, 3.0, 5.0, 7.0]);
        let y = avg_pool_forward(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0]);
    }

    #[test]
    fn softmax_uniform() {
        let x = t(&[3], &[0.0, 0.0, 0.0]);
        let y = softmax_forward(&x);
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bn_train_normalizes() {
        let x = t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = bn_forward_train(&x, &[1.0], &[0.0], 0.0).unwrap();
        assert!((out.mean[0] - 2.5).abs() < 1e-12);
        assert!((out.var[0] - 1.25).abs() < 1e-12);
        let m: f64 = out.y.data().iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
    }
}
