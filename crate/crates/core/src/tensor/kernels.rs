//! Forward and backward numeric kernels on plain tensors.
//!
//! These functions carry no autodiff bookkeeping; the tape in `tape.rs`
//! pairs each forward kernel with its backward counterpart.

use super::linalg::{gemm, MatMut, MatRef};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper bound on the im2col scratch buffer, in elements.
const IM2COL_BUDGET: usize = 1 << 23;

// ---------------------------------------------------------------- matmul

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::rows(a.data(), m, k),
        MatRef::rows(b.data(), k, n),
        T::zero(),
        MatMut::rows(&mut out, m, n),
    );
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::dim(format!("matmul of {a:?} by {b:?}")));
    }
    Ok((a[0], a[1], b[1]))
}

/// Gradients of `a * b` given the output gradient `g`.
pub(crate) fn matmul_backward<T: Scalar>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    need: [bool; 2],
) -> [Option<Tensor<T>>; 2] {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ga = need[0].then(|| {
        let mut da = vec![T::zero(); m * k];
        gemm(
            T::one(),
            MatRef::rows(g.data(), m, n),
            MatRef::rows(b.data(), k, n).t(),
            T::zero(),
            MatMut::rows(&mut da, m, k),
        );
        Tensor::new(&[m, k], da).unwrap()
    });
    let gb = need[1].then(|| {
        let mut db = vec![T::zero(); k * n];
        gemm(
            T::one(),
            MatRef::rows(a.data(), m, k).t(),
            MatRef::rows(g.data(), m, n),
            T::zero(),
            MatMut::rows(&mut db, k, n),
        );
        Tensor::new(&[k, n], db).unwrap()
    });
    [ga, gb]
}

// ------------------------------------------------------------ convolution

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dGeometry {
            stride,
            padding,
            dilation,
        }
    }
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Conv2dGeometry::new(1, 0, 1)
    }
}

/// Output extent `floor((n + 2p - d(k-1) - 1) / s) + 1`.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return Err(Error::config(format!(
            "kernel {kernel}, stride {stride} and dilation {dilation} must be >= 1"
        )));
    }
    let padded = input + 2 * padding;
    let span = dilation * (kernel - 1) + 1;
    if padded < span {
        return Err(Error::config(format!(
            "padded extent {padded} is smaller than dilated kernel extent {span}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self, g: Conv2dGeometry) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.padding == 0
    }
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: Conv2dGeometry) -> Result<ConvDims> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
        return Err(Error::dim(format!(
            "conv2d input {xs:?} incompatible with weight {ws:?}"
        )));
    }
    let ho = conv_output_extent(xs[1], ws[2], g.stride, g.padding, g.dilation)?;
    let wo = conv_output_extent(xs[2], ws[3], g.stride, g.padding, g.dilation)?;
    Ok(ConvDims {
        cin: xs[0],
        h: xs[1],
        w: xs[2],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        ho,
        wo,
    })
}

fn rows_per_chunk(d: &ConvDims) -> usize {
    (IM2COL_BUDGET / (d.k() * d.wo).max(1)).clamp(1, d.ho)
}

/// Fill `cols` ([K x rows*wo]) for output rows `r0..r0+rows`.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, g: Conv2dGeometry, r0: usize, rows: usize, cols: &mut [T]) {
    let n = rows * d.wo;
    let pad = g.padding as isize;
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..rows {
                    let iy = ((r0 + oy) * g.stride + ky * g.dilation) as isize - pad;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Accumulate `cols` back into the input-gradient buffer.
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, g: Conv2dGeometry, r0: usize, rows: usize, dx: &mut [T]) {
    let n = rows * d.wo;
    let pad = g.padding as isize;
    for ci in 0..d.cin {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..rows {
                    let iy = ((r0 + oy) * g.stride + ky * g.dilation) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, &v) in src[oy * d.wo..(oy + 1) * d.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded, dilated 2-D convolution of a `[C_in, H, W]` map with a
/// `[C_out, C_in, kh, kw]` weight.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, w, g)?;
    if let Some(b) = bias {
        if b.numel() != d.cout {
            return Err(Error::dim(format!(
                "conv2d bias {:?} for {} output channels",
                b.shape(),
                d.cout
            )));
        }
    }
    let plane = d.ho * d.wo;
    let mut out = vec![T::zero(); d.cout * plane];
    let k = d.k();
    let wmat = MatRef::rows(w.data(), d.cout, k);
    if d.is_pointwise(g) {
        gemm(
            T::one(),
            wmat,
            MatRef::rows(x.data(), d.cin, plane),
            T::zero(),
            MatMut::rows(&mut out, d.cout, plane),
        );
    } else {
        let chunk = rows_per_chunk(&d);
        let mut cols = vec![T::zero(); k * chunk * d.wo];
        let mut r0 = 0;
        while r0 < d.ho {
            let rows = chunk.min(d.ho - r0);
            let n = rows * d.wo;
            im2col(x.data(), &d, g, r0, rows, &mut cols);
            gemm(
                T::one(),
                wmat,
                MatRef::rows(&cols[..k * n], k, n),
                T::zero(),
                MatMut {
                    data: &mut out,
                    offset: r0 * d.wo,
                    rows: d.cout,
                    cols: n,
                    rs: plane,
                    cs: 1,
                },
            );
            r0 += rows;
        }
    }
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(&[d.cout, d.ho, d.wo], out)
}

/// Returns `(dx, dw, db)` for [`conv2d`].
pub(crate) fn conv2d_backward<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: Conv2dGeometry,
    need: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let d = conv_dims(x, w, g).expect("validated in forward");
    let plane = d.ho * d.wo;
    let k = d.k();
    let gd = grad.data();
    let mut dx = need[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.numel()]);
    let wmat = MatRef::rows(w.data(), d.cout, k);

    if d.is_pointwise(g) {
        let gmat = MatRef::rows(gd, d.cout, plane);
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), wmat.t(), gmat, T::zero(), MatMut::rows(dx, d.cin, plane));
        }
        if let Some(dw) = dw.as_mut() {
            gemm(
                T::one(),
                gmat,
                MatRef::rows(x.data(), d.cin, plane).t(),
                T::zero(),
                MatMut::rows(dw, d.cout, k),
            );
        }
    } else if dx.is_some() || dw.is_some() {
        let chunk = rows_per_chunk(&d);
        let mut cols = vec![T::zero(); k * chunk * d.wo];
        let mut r0 = 0;
        while r0 < d.ho {
            let rows = chunk.min(d.ho - r0);
            let n = rows * d.wo;
            let gmat = MatRef {
                data: gd,
                offset: r0 * d.wo,
                rows: d.cout,
                cols: n,
                rs: plane,
                cs: 1,
            };
            if let Some(dw) = dw.as_mut() {
                im2col(x.data(), &d, g, r0, rows, &mut cols);
                gemm(
                    T::one(),
                    gmat,
                    MatRef::rows(&cols[..k * n], k, n).t(),
                    T::one(),
                    MatMut::rows(dw, d.cout, k),
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    T::one(),
                    wmat.t(),
                    gmat,
                    T::zero(),
                    MatMut::rows(&mut cols[..k * n], k, n),
                );
                col2im(&cols, &d, g, r0, rows, dx);
            }
            r0 += rows;
        }
    }
    let db = need[2].then(|| {
        let sums: Vec<T> = gd.chunks(plane).map(|c| c.iter().copied().sum()).collect();
        Tensor::new(&[d.cout], sums).unwrap()
    });
    [
        dx.map(|v| Tensor::new(x.shape(), v).unwrap()),
        dw.map(|v| Tensor::new(w.shape(), v).unwrap()),
        db,
    ]
}

/// Per-channel convolution: weight `[C, 1, kh, kw]`, bias `[C]`.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[1] != 1 {
        return Err(Error::dim(format!(
            "depthwise conv input {xs:?} incompatible with weight {ws:?}"
        )));
    }
    let (c, h, wd, kh, kw) = (xs[0], xs[1], xs[2], ws[2], ws[3]);
    let ho = conv_output_extent(h, kh, g.stride, g.padding, g.dilation)?;
    let wo = conv_output_extent(wd, kw, g.stride, g.padding, g.dilation)?;
    let mut out = vec![T::zero(); c * ho * wo];
    let pad = g.padding as isize;
    for ch in 0..c {
        let src = &x.data()[ch * h * wd..(ch + 1) * h * wd];
        let ker = &w.data()[ch * kh * kw..(ch + 1) * kh * kw];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        let b = bias.map_or(T::zero(), |b| b.data()[ch]);
        dst.fill(b);
        for ky in 0..kh {
            for kx in 0..kw {
                let kv = ker[ky * kw + kx];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &src[iy as usize * wd..(iy as usize + 1) * wd];
                    let orow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                        if ix >= 0 && ix < wd as isize {
                            *o += kv * row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

pub(crate) fn depthwise_conv2d_backward<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: Conv2dGeometry,
    need: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let (xs, ws) = (x.shape(), w.shape());
    let (c, h, wd, kh, kw) = (xs[0], xs[1], xs[2], ws[2], ws[3]);
    let (ho, wo) = (grad.shape()[1], grad.shape()[2]);
    let pad = g.padding as isize;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    for ch in 0..c {
        let src = &x.data()[ch * h * wd..(ch + 1) * h * wd];
        let gsrc = &grad.data()[ch * ho * wo..(ch + 1) * ho * wo];
        let ker = &w.data()[ch * kh * kw..(ch + 1) * kh * kw];
        for ky in 0..kh {
            for kx in 0..kw {
                let kv = ker[ky * kw + kx];
                let mut acc = T::zero();
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * wd + iy as usize * wd;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                        if ix >= 0 && ix < wd as isize {
                            let gv = gsrc[oy * wo + ox];
                            acc += gv * src[iy as usize * wd + ix as usize];
                            dx[base + ix as usize] += gv * kv;
                        }
                    }
                }
                dw[ch * kh * kw + ky * kw + kx] = acc;
            }
        }
    }
    let db = need[2].then(|| {
        let sums: Vec<T> = grad
            .data()
            .chunks(ho * wo)
            .map(|c| c.iter().copied().sum())
            .collect();
        Tensor::new(&[c], sums).unwrap()
    });
    [
        need[0].then(|| Tensor::new(xs, dx).unwrap()),
        need[1].then(|| Tensor::new(ws, dw).unwrap()),
        db,
    ]
}

// ---------------------------------------------------------------- softmax

/// Row-wise `softmax(x / scale)` over the last axis of a 2-D tensor.
pub fn softmax_scaled<T: Scalar>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("softmax expects 2-D input, got {:?}", x.shape())));
    }
    if !(scale > T::zero()) {
        return Err(Error::Domain(format!("softmax scale must be positive, got {scale}")));
    }
    let m = x.shape()[1];
    let inv = T::one() / scale;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) * inv).exp();
            total += *v;
        }
        let norm = T::one() / total;
        row.iter_mut().for_each(|v| *v *= norm);
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_backward<T: Scalar>(grad: &Tensor<T>, out: &Tensor<T>, scale: T) -> Tensor<T> {
    let m = out.shape()[1];
    let inv = T::one() / scale;
    let mut dx = vec![T::zero(); out.numel()];
    for ((d, y), g) in dx
        .chunks_mut(m)
        .zip(out.data().chunks(m))
        .zip(grad.data().chunks(m))
    {
        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((dv, &yv), &gv) in d.iter_mut().zip(y).zip(g) {
            *dv = yv * (gv - dot) * inv;
        }
    }
    Tensor::new(out.shape(), dx).unwrap()
}

// --------------------------------------------------------------- bilinear

struct Lerp<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

/// Align-corners-false sampling table: `src = (i + 0.5) * n / m - 0.5`,
/// clamped to the valid range.
fn lerp_table<T: Scalar>(n: usize, m: usize) -> Vec<Lerp<T>> {
    let ratio = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            Lerp {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

/// Bilinear resize of a `[C, H, W]` map.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("bilinear resize expects [C, H, W], got {s:?}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::config("bilinear resize target must be at least 1x1"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let ys = lerp_table::<T>(h, height);
    let xs = lerp_table::<T>(w, width);
    let mut out = vec![T::zero(); c * height * width];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * height * width..(ch + 1) * height * width];
        for (oy, ly) in ys.iter().enumerate() {
            let r0 = &src[ly.lo * w..(ly.lo + 1) * w];
            let r1 = &src[ly.hi * w..(ly.hi + 1) * w];
            let fy = ly.frac;
            for (ox, lx) in xs.iter().enumerate() {
                let top = r0[lx.lo] + (r0[lx.hi] - r0[lx.lo]) * lx.frac;
                let bot = r1[lx.lo] + (r1[lx.hi] - r1[lx.lo]) * lx.frac;
                dst[oy * width + ox] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::new(&[c, height, width], out)
}

pub(crate) fn bilinear_backward<T: Scalar>(grad: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (height, width) = (grad.shape()[1], grad.shape()[2]);
    if (h, w) == (height, width) {
        return grad.clone();
    }
    let ys = lerp_table::<T>(h, height);
    let xs = lerp_table::<T>(w, width);
    let mut dx = vec![T::zero(); c * h * w];
    let one = T::one();
    for ch in 0..c {
        let gsrc = &grad.data()[ch * height * width..(ch + 1) * height * width];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, ly) in ys.iter().enumerate() {
            for (ox, lx) in xs.iter().enumerate() {
                let g = gsrc[oy * width + ox];
                let gt = g * (one - ly.frac);
                let gb = g * ly.frac;
                dst[ly.lo * w + lx.lo] += gt * (one - lx.frac);
                dst[ly.lo * w + lx.hi] += gt * lx.frac;
                dst[ly.hi * w + lx.lo] += gb * (one - lx.frac);
                dst[ly.hi * w + lx.hi] += gb * lx.frac;
            }
        }
    }
    Tensor::new(in_shape, dx).unwrap()
}

// ------------------------------------------------------------- layer norm

pub(crate) struct LayerNormSaved<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Row-wise normalization of an `[N, C]` tensor followed by `gain`/`bias`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_saved(x, gain, bias, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_saved<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormSaved<T>)> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("layer norm expects [N, C], got {:?}", x.shape())));
    }
    let c = x.shape()[1];
    if gain.numel() != c || bias.numel() != c {
        return Err(Error::dim(format!(
            "layer norm over {c} channels with gain {:?} and bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let n_rows = x.shape()[0];
    let cf = T::lit(c as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(n_rows);
    for ((row, xh), o) in x
        .data()
        .chunks(c)
        .zip(xhat.chunks_mut(c))
        .zip(out.chunks_mut(c))
    {
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let r = T::one() / (var + eps).sqrt();
        for i in 0..c {
            xh[i] = (row[i] - mean) * r;
            o[i] = xh[i] * gain.data()[i] + bias.data()[i];
        }
        rstd.push(r);
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        LayerNormSaved {
            xhat: Tensor::new(x.shape(), xhat)?,
            rstd,
        },
    ))
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    grad: &Tensor<T>,
    saved: &LayerNormSaved<T>,
    gain: &Tensor<T>,
    need: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let c = gain.numel();
    let cf = T::lit(c as f64);
    let mut dx = vec![T::zero(); grad.numel()];
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    for (((g, xh), d), &r) in grad
        .data()
        .chunks(c)
        .zip(saved.xhat.data().chunks(c))
        .zip(dx.chunks_mut(c))
        .zip(&saved.rstd)
    {
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for i in 0..c {
            dgain[i] += g[i] * xh[i];
            dbias[i] += g[i];
            let dxh = g[i] * gain.data()[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
        }
        mean_dxh /= cf;
        mean_dxh_xh /= cf;
        for i in 0..c {
            let dxh = g[i] * gain.data()[i];
            d[i] = r * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    [
        need[0].then(|| Tensor::new(grad.shape(), dx).unwrap()),
        need[1].then(|| Tensor::new(gain.shape(), dgain).unwrap()),
        need[2].then(|| Tensor::new(gain.shape(), dbias).unwrap()),
    ]
}

// ---------------------------------------------------- structural remaps

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Concatenate along `axis`; every other extent must agree.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::usage("concat of an empty list"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim(format!("concat axis {axis} on rank {rank}")));
    }
    for t in xs {
        let same_off_axis = t.rank() == rank
            && (0..rank).all(|i| i == axis || t.shape()[i] == first.shape()[i]);
        if !same_off_axis {
            return Err(Error::dim(format!(
                "concat along axis {axis}: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = xs.iter().map(|t| t.shape()[axis]).sum();
    let (outer, _, inner) = split_at_axis(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in xs {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(&shape, out)
}

/// Slice `len` entries starting at `start` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::dim(format!(
            "narrow [{start}, {}) on axis {axis} of {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, extent, inner) = split_at_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

/// Inverse of [`narrow`]: embed `grad` into zeros of `full_shape`.
pub(crate) fn narrow_backward<T: Scalar>(
    grad: &Tensor<T>,
    full_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<T> {
    let (outer, extent, inner) = split_at_axis(full_shape, axis);
    let len = grad.shape()[axis];
    let mut out = vec![T::zero(); full_shape.iter().product()];
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out[base..base + len * inner]
            .copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(full_shape, out).unwrap()
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim(format!("invalid permutation {perm:?} for {:?}", x.shape())));
    }
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    if rank == 2 && perm == [1, 0] {
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        const B: usize = 32;
        for i0 in (0..r).step_by(B) {
            for j0 in (0..c).step_by(B) {
                for i in i0..(i0 + B).min(r) {
                    for j in j0..(j0 + B).min(c) {
                        out[j * r + i] = x.data()[i * c + j];
                    }
                }
            }
        }
        return Tensor::new(&shape, out);
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = x.numel();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        out.push(x.data()[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            offset -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---------------------------------------------------------------- pooling

/// 2x2 max pooling with stride 2 on `[C, H, W]`; returns the output and
/// the flat input index each output was taken from.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(Error::dim(format!("2x2 max pooling needs [C, even H, even W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, ho, wo], out)?, arg))
}

// ------------------------------------------------------------- pointwise

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

// ------------------------------------------------------------------ losses

/// Mean binary cross-entropy evaluated from logits in log-space.
pub fn bce_with_logits<T: Scalar>(logits: &[T], targets: &[T]) -> T {
    let total: T = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    total / T::lit(logits.len() as f64)
}

pub(crate) fn bce_with_logits_grad<T: Scalar>(logits: &[T], targets: &[T]) -> Vec<T> {
    let inv_q = T::one() / T::lit(logits.len() as f64);
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| (sigmoid(z) - y) * inv_q)
        .collect()
}

/// Per-pixel focal term `-a_t (1 - p_t)^g log p_t` from a logit.
#[inline]
fn focal_term<T: Scalar>(z: T, y: T, alpha: T, gamma: T) -> T {
    let p = sigmoid(z);
    if y > T::lit(0.5) {
        alpha * (T::one() - p).powf(gamma) * softplus(-z)
    } else {
        (T::one() - alpha) * p.powf(gamma) * softplus(z)
    }
}

/// Derivative of [`focal_term`] with respect to the logit.
#[inline]
pub(crate) fn focal_term_grad<T: Scalar>(z: T, y: T, alpha: T, gamma: T) -> T {
    let p = sigmoid(z);
    let q = T::one() - p;
    if y > T::lit(0.5) {
        // log p = -softplus(-z)
        let log_p = -softplus(-z);
        alpha * q.powf(gamma) * (gamma * p * log_p - q)
    } else {
        let log_q = -softplus(z);
        (T::one() - alpha) * p.powf(gamma) * (p - gamma * q * log_q)
    }
}

/// Mean focal loss evaluated from logits.
pub fn focal_with_logits<T: Scalar>(logits: &[T], targets: &[T], alpha: T, gamma: T) -> T {
    let total: T = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| focal_term(z, y, alpha, gamma))
        .sum();
    total / T::lit(logits.len() as f64)
}

pub(crate) fn focal_with_logits_grad<T: Scalar>(logits: &[T], targets: &[T], alpha: T, gamma: T) -> Vec<T> {
    let inv_q = T::one() / T::lit(logits.len() as f64);
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| focal_term_grad(z, y, alpha, gamma) * inv_q)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &id).unwrap(), a);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
        let s = matmul(&t(&[1, 1], &[2.0]), &t(&[1, 1], &[3.0])).unwrap();
        assert_eq!(s.data(), &[6.0]);
        let err = matmul(&a, &t(&[3, 1], &[1.0, 1.0, 1.0])).unwrap_err();
        assert!(err.to_string().contains("[2, 2]") && err.to_string().contains("[3, 1]"));
    }

    #[test]
    fn conv_output_extent_formula() {
        assert_eq!(conv_output_extent(128, 3, 1, 2, 2).unwrap(), 128);
        assert_eq!(conv_output_extent(512, 7, 4, 3, 1).unwrap(), 128);
        assert_eq!(conv_output_extent(128, 3, 2, 1, 1).unwrap(), 64);
        assert!(conv_output_extent(2, 5, 1, 0, 1).is_err());
        assert!(conv_output_extent(8, 3, 0, 0, 1).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &w, None, Conv2dGeometry::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_window_sum() {
        let x = Tensor::<f64>::ones(&[1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, Conv2dGeometry::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::<f64>::from_fn(&[2, 7, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let w = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |i| ((i * 17) % 7) as f64 - 3.0);
        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let g = Conv2dGeometry::new(2, 2, 2);
        let y = conv2d(&x, &w, Some(&b), g).unwrap();
        let (ho, wo) = (y.shape()[1], y.shape()[2]);
        for co in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky * 2) as isize - 2;
                                let ix = (ox * 2 + kx * 2) as isize - 2;
                                if (0..7).contains(&iy) && (0..6).contains(&ix) {
                                    acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 7 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(co * ho + oy) * wo + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_scaled(&t(&[1, 3], &[0.0, 0.0, 0.0]), 1.0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_scaled(&t(&[1, 2], &[2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let a = softmax_scaled(&t(&[1, 3], &[0.3, -1.0, 2.0]), 1.7).unwrap();
        let b = softmax_scaled(&t(&[1, 3], &[10.3, 9.0, 12.0]), 1.7).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(softmax_scaled(&t(&[1, 2], &[0.0, 0.0]), 0.0).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let x = t(&[1, 1, 2], &[0.0, 2.0]);
        let y = bilinear_resize(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.5, 2.0]);
        let c = Tensor::<f64>::full(&[2, 3, 5], 0.7);
        let y = bilinear_resize(&c, 11, 4).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        assert_eq!(bilinear_resize(&x, 1, 2).unwrap(), x);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = t(&[3], &[1.0; 3]);
        let zeros = t(&[3], &[0.0; 3]);
        let y = layer_norm(&t(&[1, 3], &[5.0, 5.0, 5.0]), &ones, &zeros, 1e-6).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
        let y = layer_norm(&t(&[1, 2], &[1.0, -1.0]), &t(&[2], &[1.0, 1.0]), &t(&[2], &[0.0, 0.0]), 1e-6)
            .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
        let y = layer_norm(&t(&[1, 3], &[1.0, 4.0, -2.0]), &zeros, &t(&[3], &[0.3; 3]), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn concat_and_narrow() {
        let a = Tensor::<f64>::from_fn(&[2, 2, 3], |i| i as f64);
        assert_eq!(concat(&[&a], 1).unwrap(), a);
        let maps: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::zeros(&[128, 2, 2])).collect();
        let refs: Vec<&Tensor<f64>> = maps.iter().collect();
        assert_eq!(concat(&refs, 0).unwrap().shape(), &[512, 2, 2]);
        let b = Tensor::<f64>::from_fn(&[2, 1, 3], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(narrow(&c, 1, 2, 1).unwrap(), b);
        assert_eq!(narrow(&c, 1, 0, 2).unwrap(), a);
        assert!(concat(&[&a, &Tensor::zeros(&[3, 1, 3])], 1).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], x.data()[4]);
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        let m = Tensor::<f64>::from_fn(&[37, 45], |i| i as f64);
        let tt = permute(&permute(&m, &[1, 0]).unwrap(), &[1, 0]).unwrap();
        assert_eq!(tt, m);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn pointwise_anchors() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(1000.0f64).is_finite() && softplus(-1000.0f64) >= 0.0);
    }

    #[test]
    fn focal_gradient_matches_finite_difference() {
        for &(z, y) in &[(0.3f64, 1.0f64), (-1.2, 1.0), (2.0, 0.0), (-0.4, 0.0)] {
            let h = 1e-6;
            let fd = (focal_term(z + h, y, 0.25, 2.0) - focal_term(z - h, y, 0.25, 2.0)) / (2.0 * h);
            let an = focal_term_grad(z, y, 0.25, 2.0);
            assert!((fd - an).abs() < 1e-8, "z={z} y={y}: {fd} vs {an}");
        }
    }
}
