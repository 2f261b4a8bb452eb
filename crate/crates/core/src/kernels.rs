//! Forward and backward kernels on dense NCHW tensors.
//!
//! Convolutions lower to GEMM through an im2col buffer that is filled in
//! chunks of output positions, so peak scratch memory stays bounded no
//! matter how large the spatial extent is.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::{MatMut, MatRef, Real};
use crate::tensor::Tensor;

/// Upper bound on im2col scratch elements per chunk.
const COL_BUDGET: usize = 1 << 22;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_dim(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            None
        } else {
            Some((padded - self.kernel) / self.stride + 1)
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Spatial layout shared by im2col and col2im: an image of `c x h x w`
/// scanned by `geom` into `oh x ow` output positions.
#[derive(Clone, Copy)]
struct Lowering {
    c: usize,
    h: usize,
    w: usize,
    ow: usize,
    geom: ConvGeom,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.c * self.geom.kernel * self.geom.kernel
    }

    fn chunk(&self, positions: usize) -> usize {
        (COL_BUDGET / self.rows().max(1)).clamp(1, positions.max(1))
    }

    /// Visit every (row, column, image index) triple of the lowered matrix
    /// for output positions `p0..p1`; padding cells yield `None`.
    #[inline(always)]
    fn for_each(&self, p0: usize, p1: usize, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let k = self.geom.kernel;
        let s = self.geom.stride;
        let pad = self.geom.pad as isize;
        let cols = p1 - p0;
        for ci in 0..self.c {
            let plane = ci * self.h * self.w;
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let mut oy = p0 / self.ow;
                    let mut ox = p0 % self.ow;
                    for j in 0..cols {
                        let iy = (oy * s + ky) as isize - pad;
                        let ix = (ox * s + kx) as isize - pad;
                        let src = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                            Some(plane + iy as usize * self.w + ix as usize)
                        } else {
                            None
                        };
                        f(row, j, src);
                        ox += 1;
                        if ox == self.ow {
                            ox = 0;
                            oy += 1;
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, img: &[T], p0: usize, p1: usize, buf: &mut [T]) {
        let cols = p1 - p0;
        self.for_each(p0, p1, |row, j, src| {
            buf[row * cols + j] = match src {
                Some(i) => img[i],
                None => T::zero(),
            };
        });
    }

    fn col2im_add<T: Real>(&self, buf: &[T], p0: usize, p1: usize, img: &mut [T]) {
        let cols = p1 - p0;
        self.for_each(p0, p1, |row, j, src| {
            if let Some(i) = src {
                img[i] += buf[row * cols + j];
            }
        });
    }
}

fn check_weight4<T: Real>(op: &'static str, w: &Tensor<T>, kernel: usize) -> Result<(usize, usize)> {
    let (a, b, kh, kw) = w.dims4()?;
    if kh != kernel || kw != kernel {
        return Err(shape_err(op, format!("weight kernel {kh}x{kw} but geometry says {kernel}")));
    }
    Ok((a, b))
}

fn check_bias<T: Real>(op: &'static str, b: Option<&Tensor<T>>, n: usize) -> Result<()> {
    if let Some(b) = b {
        if b.numel() != n {
            return Err(shape_err(op, format!("bias has {} elements, expected {n}", b.numel())));
        }
    }
    Ok(())
}

fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T], channels: usize, plane: usize) {
    for (chunk_idx, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[chunk_idx % channels];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<T: Real>(gy: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for (chunk_idx, chunk) in gy.chunks(plane).enumerate() {
        let s: f64 = chunk.iter().map(|v| v.as_f64()).sum();
        out[chunk_idx % channels] += T::of(s);
    }
    out
}

/// 2-D cross-correlation. `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: ConvGeom) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc) = check_weight4("conv2d", w, g.kernel)?;
    if wc != c {
        return Err(shape_err("conv2d", format!("input has {c} channels, weight expects {wc}")));
    }
    check_bias("conv2d", b, o)?;
    let (oh, ow) = match (g.out_dim(h), g.out_dim(wd)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => return Err(shape_err("conv2d", format!("kernel {} does not fit {h}x{wd}", g.kernel))),
    };
    let positions = oh * ow;
    let low = Lowering { c, h, w: wd, ow, geom: g };
    let rows = low.rows();
    let mut y = vec![T::zero(); n * o * positions];
    let wm = MatRef::dense(w.data(), o, rows);
    let chunk = low.chunk(positions);
    let mut buf = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * chunk] };
    for ni in 0..n {
        let xin = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
        let yout = &mut y[ni * o * positions..(ni + 1) * o * positions];
        if g.is_pointwise() {
            T::gemm(T::one(), wm, MatRef::dense(xin, c, positions), T::zero(), MatMut::dense(yout, o, positions));
            continue;
        }
        let mut p0 = 0;
        while p0 < positions {
            let p1 = (p0 + chunk).min(positions);
            let cols = p1 - p0;
            low.im2col(xin, p0, p1, &mut buf[..rows * cols]);
            let dst = MatMut { data: &mut yout[p0..], rows: o, cols, row_stride: positions, col_stride: 1 };
            T::gemm(T::one(), wm, MatRef::dense(&buf[..rows * cols], rows, cols), T::zero(), dst);
            p0 = p1;
        }
    }
    if let Some(b) = b {
        add_channel_bias(&mut y, b.data(), o, positions);
    }
    Tensor::from_vec(&[n, o, oh, ow], y)
}

/// Gradients of a convolution-like op.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads<T>> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, _) = check_weight4("conv2d_backward", w, g.kernel)?;
    let (_, _, oh, ow) = gy.dims4()?;
    let positions = oh * ow;
    let low = Lowering { c, h, w: wd, ow, geom: g };
    let rows = low.rows();
    let chunk = low.chunk(positions);
    let wm = MatRef::dense(w.data(), o, rows);
    let mut gx = if need_input { vec![T::zero(); x.numel()] } else { Vec::new() };
    let mut gw = if need_weight { vec![T::zero(); w.numel()] } else { Vec::new() };
    let mut buf = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * chunk }];
    for ni in 0..n {
        let xin = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
        let gyn = &gy.data()[ni * o * positions..(ni + 1) * o * positions];
        if g.is_pointwise() {
            if need_weight {
                T::gemm(
                    T::one(),
                    MatRef::dense(gyn, o, positions),
                    MatRef::dense(xin, c, positions).t(),
                    T::one(),
                    MatMut::dense(&mut gw, o, c),
                );
            }
            if need_input {
                let gxn = &mut gx[ni * c * h * wd..(ni + 1) * c * h * wd];
                T::gemm(T::one(), wm.t(), MatRef::dense(gyn, o, positions), T::one(), MatMut::dense(gxn, c, positions));
            }
            continue;
        }
        let mut p0 = 0;
        while p0 < positions {
            let p1 = (p0 + chunk).min(positions);
            let cols = p1 - p0;
            let gy_chunk = MatRef { data: &gyn[p0..], rows: o, cols, row_stride: positions, col_stride: 1 };
            if need_weight {
                low.im2col(xin, p0, p1, &mut buf[..rows * cols]);
                T::gemm(
                    T::one(),
                    gy_chunk,
                    MatRef::dense(&buf[..rows * cols], rows, cols).t(),
                    T::one(),
                    MatMut::dense(&mut gw, o, rows),
                );
            }
            if need_input {
                T::gemm(T::one(), wm.t(), gy_chunk, T::zero(), MatMut::dense(&mut buf[..rows * cols], rows, cols));
                let gxn = &mut gx[ni * c * h * wd..(ni + 1) * c * h * wd];
                low.col2im_add(&buf[..rows * cols], p0, p1, gxn);
            }
            p0 = p1;
        }
    }
    Ok(ConvGrads {
        input: if need_input { Some(Tensor::from_vec(x.shape(), gx)?) } else { None },
        weight: if need_weight { Some(Tensor::from_vec(w.shape(), gw)?) } else { None },
        bias: Tensor::from_vec(&[o], channel_sums(gy.data(), o, positions))?,
    })
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out_dim(n: usize, g: ConvGeom, output_padding: usize) -> Option<usize> {
    if n == 0 {
        return None;
    }
    ((n - 1) * g.stride + g.kernel + output_padding).checked_sub(2 * g.pad)
}

/// Transposed convolution (the adjoint of [`conv2d`]).
/// `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`, `b: [Cout]`.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeom,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = x.dims4()?;
    let (wcin, cout) = check_weight4("conv_transpose2d", w, g.kernel)?;
    if wcin != cin {
        return Err(shape_err("conv_transpose2d", format!("input has {cin} channels, weight expects {wcin}")));
    }
    check_bias("conv_transpose2d", b, cout)?;
    if output_padding >= g.stride.max(1) && output_padding > 0 {
        return Err(shape_err("conv_transpose2d", "output padding must be smaller than stride"));
    }
    let (oh, ow) = match (conv_transpose_out_dim(h, g, output_padding), conv_transpose_out_dim(wd, g, output_padding)) {
        (Some(a), Some(b)) if g.out_dim(a) == Some(h) && g.out_dim(b) == Some(wd) => (a, b),
        _ => return Err(shape_err("conv_transpose2d", format!("invalid geometry for {h}x{wd}"))),
    };
    let positions = h * wd;
    let low = Lowering { c: cout, h: oh, w: ow, ow: wd, geom: g };
    let rows = low.rows();
    let chunk = low.chunk(positions);
    let wm = MatRef::dense(w.data(), cin, rows);
    let mut y = vec![T::zero(); n * cout * oh * ow];
    let mut buf = vec![T::zero(); rows * chunk];
    for ni in 0..n {
        let xin = &x.data()[ni * cin * positions..(ni + 1) * cin * positions];
        let yout = &mut y[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
        let mut p0 = 0;
        while p0 < positions {
            let p1 = (p0 + chunk).min(positions);
            let cols = p1 - p0;
            let x_chunk = MatRef { data: &xin[p0..], rows: cin, cols, row_stride: positions, col_stride: 1 };
            T::gemm(T::one(), wm.t(), x_chunk, T::zero(), MatMut::dense(&mut buf[..rows * cols], rows, cols));
            low.col2im_add(&buf[..rows * cols], p0, p1, yout);
            p0 = p1;
        }
    }
    if let Some(b) = b {
        add_channel_bias(&mut y, b.data(), cout, oh * ow);
    }
    Tensor::from_vec(&[n, cout, oh, ow], y)
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads<T>> {
    let (n, cin, h, wd) = x.dims4()?;
    let (_, cout) = check_weight4("conv_transpose2d_backward", w, g.kernel)?;
    let (_, _, oh, ow) = gy.dims4()?;
    let positions = h * wd;
    let low = Lowering { c: cout, h: oh, w: ow, ow: wd, geom: g };
    let rows = low.rows();
    let chunk = low.chunk(positions);
    let wm = MatRef::dense(w.data(), cin, rows);
    let mut gx = if need_input { vec![T::zero(); x.numel()] } else { Vec::new() };
    let mut gw = if need_weight { vec![T::zero(); w.numel()] } else { Vec::new() };
    let mut buf = vec![T::zero(); rows * chunk];
    for ni in 0..n {
        let xin = &x.data()[ni * cin * positions..(ni + 1) * cin * positions];
        let gyn = &gy.data()[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
        let mut p0 = 0;
        while p0 < positions {
            let p1 = (p0 + chunk).min(positions);
            let cols = p1 - p0;
            low.im2col(gyn, p0, p1, &mut buf[..rows * cols]);
            let col = MatRef::dense(&buf[..rows * cols], rows, cols);
            if need_input {
                let gxn = &mut gx[ni * cin * positions..(ni + 1) * cin * positions];
                let dst = MatMut { data: &mut gxn[p0..], rows: cin, cols, row_stride: positions, col_stride: 1 };
                T::gemm(T::one(), wm, col, T::zero(), dst);
            }
            if need_weight {
                let x_chunk = MatRef { data: &xin[p0..], rows: cin, cols, row_stride: positions, col_stride: 1 };
                T::gemm(T::one(), x_chunk, col.t(), T::one(), MatMut::dense(&mut gw, cin, rows));
            }
            p0 = p1;
        }
    }
    Ok(ConvGrads {
        input: if need_input { Some(Tensor::from_vec(x.shape(), gx)?) } else { None },
        weight: if need_weight { Some(Tensor::from_vec(w.shape(), gw)?) } else { None },
        bias: Tensor::from_vec(&[cout], channel_sums(gy.data(), cout, oh * ow))?,
    })
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Reflection padding on both spatial axes; `pad` must be smaller than each extent.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if pad >= h || pad >= w {
        return Err(shape_err("reflect_pad", format!("pad {pad} too large for {h}x{w}")));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut y = Vec::with_capacity(n * c * ph * pw);
    for plane in x.data().chunks(h * w) {
        for yy in 0..ph {
            let sy = reflect(yy as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - pad as isize, w);
                y.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::from_vec(&[n, c, ph, pw], y)
}

pub fn reflect_pad_backward<T: Real>(input_shape: &[usize], gy: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut gx = Tensor::zeros(input_shape);
    for (dst, src) in gx.data_mut().chunks_mut(h * w).zip(gy.data().chunks(ph * pw)) {
        for yy in 0..ph {
            let sy = reflect(yy as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - pad as isize, w);
                dst[sy * w + sx] += src[yy * pw + xx];
            }
        }
    }
    Ok(gx)
}

/// Instance normalisation without affine parameters. Returns the normalised
/// tensor and the per-(sample, channel) inverse standard deviations.
pub fn instance_norm<T: Real>(x: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, _, h, w) = x.dims4()?;
    let plane = h * w;
    let mut y = x.data().to_vec();
    let mut inv = Vec::with_capacity(x.numel() / plane.max(1));
    for chunk in y.chunks_mut(plane) {
        let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        let var = chunk.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / plane as f64;
        let is = 1.0 / (var + eps).sqrt();
        for v in chunk.iter_mut() {
            *v = T::of((v.as_f64() - mean) * is);
        }
        inv.push(T::of(is));
    }
    Ok((Tensor::from_vec(x.shape(), y)?, inv))
}

/// Backward of [`instance_norm`] given its output `xhat`.
pub fn instance_norm_backward<T: Real>(xhat: &Tensor<T>, inv_std: &[T], gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = xhat.dims4()?;
    let plane = h * w;
    let m = plane as f64;
    let mut gx = vec![T::zero(); xhat.numel()];
    for (i, ((dst, xh), g)) in
        gx.chunks_mut(plane).zip(xhat.data().chunks(plane)).zip(gy.data().chunks(plane)).enumerate()
    {
        let sum_g: f64 = g.iter().map(|v| v.as_f64()).sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let is = inv_std[i].as_f64();
        for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xh) {
            *d = T::of(is / m * (m * gv.as_f64() - sum_g - xv.as_f64() * sum_gx));
        }
    }
    Tensor::from_vec(xhat.shape(), gx)
}

/// Max pooling without padding. Returns output and flat argmax indices.
pub fn max_pool2d<T: Real>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    let g = ConvGeom::new(kernel, stride, 0);
    let (oh, ow) = match (g.out_dim(h), g.out_dim(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err("max_pool2d", format!("kernel {kernel} larger than {h}x{w}"))),
    };
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for (pi, plane) in x.data().chunks(h * w).enumerate() {
        let base = pi * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = (oy * stride + ky) * w + ox * stride + kx;
                        let v = plane[i];
                        // first maximum wins; NaN propagates
                        if v > best || v.is_nan() && !best.is_nan() {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                y.push(best);
                arg.push((base + best_i) as u32);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], y)?, arg))
}

pub fn max_pool2d_backward<T: Real>(input_shape: &[usize], argmax: &[u32], gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(gy.data()) {
        d[i as usize] += g;
    }
    gx
}

fn bmm_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<(usize, usize, usize, usize)> {
    let (ba, a0, a1) = a.dims3()?;
    let (bb, b0, b1) = b.dims3()?;
    let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
    let (k2, n) = if tb { (b1, b0) } else { (b0, b1) };
    if ba != bb || k != k2 {
        return Err(shape_err(
            "bmm",
            format!("{:?}{} x {:?}{}", a.shape(), if ta { "^T" } else { "" }, b.shape(), if tb { "^T" } else { "" }),
        ));
    }
    Ok((ba, m, k, n))
}

fn view<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatRef<'_, T> {
    if transposed {
        MatRef::dense(data, cols, rows).t()
    } else {
        MatRef::dense(data, rows, cols)
    }
}

/// Batched matrix product `op(a) @ op(b)` where `op` optionally transposes
/// the last two axes.
pub fn bmm<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let (batch, m, k, n) = bmm_dims(a, b, ta, tb)?;
    let mut c = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let av = view(&a.data()[i * m * k..(i + 1) * m * k], m, k, ta);
        let bv = view(&b.data()[i * k * n..(i + 1) * k * n], k, n, tb);
        T::gemm(T::one(), av, bv, T::zero(), MatMut::dense(&mut c[i * m * n..(i + 1) * m * n], m, n));
    }
    Tensor::from_vec(&[batch, m, n], c)
}

pub fn bmm_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    gc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, m, k, n) = bmm_dims(a, b, ta, tb)?;
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for i in 0..batch {
        let av = view(&a.data()[i * m * k..(i + 1) * m * k], m, k, ta);
        let bv = view(&b.data()[i * k * n..(i + 1) * k * n], k, n, tb);
        let g = MatRef::dense(&gc.data()[i * m * n..(i + 1) * m * n], m, n);
        // d op(a) = g op(b)^T (m x k); stored transposed when `ta`.
        let ga_slice = &mut ga[i * m * k..(i + 1) * m * k];
        if ta {
            T::gemm(T::one(), bv, g.t(), T::zero(), MatMut::dense(ga_slice, k, m));
        } else {
            T::gemm(T::one(), g, bv.t(), T::zero(), MatMut::dense(ga_slice, m, k));
        }
        // d op(b) = op(a)^T g (k x n)
        let gb_slice = &mut gb[i * k * n..(i + 1) * k * n];
        if tb {
            T::gemm(T::one(), g.t(), av, T::zero(), MatMut::dense(gb_slice, n, k));
        } else {
            T::gemm(T::one(), av.t(), g, T::zero(), MatMut::dense(gb_slice, k, n));
        }
    }
    Ok((Tensor::from_vec(a.shape(), ga)?, Tensor::from_vec(b.shape(), gb)?))
}

fn last_dim<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(shape_err(op, format!("needs a non-empty last axis, got {:?}", x.shape()))),
    }
}

/// Softmax over the last axis.
pub fn softmax_last<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = last_dim("softmax", x)?;
    let mut y = x.data().to_vec();
    for row in y.chunks_mut(d) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += v.as_f64();
        }
        let inv = T::of(1.0 / sum);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_vec(x.shape(), y)
}

pub fn softmax_last_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let d = last_dim("softmax", y)?;
    let mut gx = vec![T::zero(); y.numel()];
    for ((dst, yr), gr) in gx.chunks_mut(d).zip(y.data().chunks(d)).zip(gy.data().chunks(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        for ((o, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *o = T::of(yv.as_f64() * (gv.as_f64() - dot));
        }
    }
    Tensor::from_vec(y.shape(), gx)
}

/// Pick feature vectors at flat spatial locations: `[N, C, H, W] -> [N, S, C]`.
pub fn gather_locations<T: Real>(x: &Tensor<T>, locations: &[usize]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    if let Some(&bad) = locations.iter().find(|&&l| l >= plane) {
        return Err(shape_err("gather_locations", format!("location {bad} outside {h}x{w}")));
    }
    let s = locations.len();
    let mut y = Vec::with_capacity(n * s * c);
    for ni in 0..n {
        let base = ni * c * plane;
        for &l in locations {
            for ci in 0..c {
                y.push(x.data()[base + ci * plane + l]);
            }
        }
    }
    Tensor::from_vec(&[n, s, c], y)
}

pub fn gather_locations_backward<T: Real>(input_shape: &[usize], locations: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, plane) = (input_shape[0], input_shape[1], input_shape[2] * input_shape[3]);
    let s = locations.len();
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for ni in 0..n {
        for (si, &l) in locations.iter().enumerate() {
            for ci in 0..c {
                d[ni * c * plane + ci * plane + l] += gy.data()[(ni * s + si) * c + ci];
            }
        }
    }
    gx
}

/// Affine map on the last axis: `y = x w^T + b`, `w: [Out, In]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let din = last_dim("linear", x)?;
    let (dout, win) = match w.shape() {
        &[o, i] => (o, i),
        s => return Err(shape_err("linear", format!("weight must be rank 2, got {s:?}"))),
    };
    if win != din {
        return Err(shape_err("linear", format!("input width {din}, weight expects {win}")));
    }
    check_bias("linear", b, dout)?;
    let rows = x.numel() / din;
    let mut y = vec![T::zero(); rows * dout];
    T::gemm(
        T::one(),
        MatRef::dense(x.data(), rows, din),
        MatRef::dense(w.data(), dout, din).t(),
        T::zero(),
        MatMut::dense(&mut y, rows, dout),
    );
    if let Some(b) = b {
        for row in y.chunks_mut(dout) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::from_vec(&shape, y)
}

pub fn linear_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, gy: &Tensor<T>) -> Result<ConvGrads<T>> {
    let din = last_dim("linear", x)?;
    let dout = w.shape()[0];
    let rows = x.numel() / din;
    let g = MatRef::dense(gy.data(), rows, dout);
    let mut gx = vec![T::zero(); x.numel()];
    T::gemm(T::one(), g, MatRef::dense(w.data(), dout, din), T::zero(), MatMut::dense(&mut gx, rows, din));
    let mut gw = vec![T::zero(); w.numel()];
    T::gemm(T::one(), g.t(), MatRef::dense(x.data(), rows, din), T::zero(), MatMut::dense(&mut gw, dout, din));
    let mut gb = vec![T::zero(); dout];
    for row in gy.data().chunks(dout) {
        for (a, &v) in gb.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok(ConvGrads {
        input: Some(Tensor::from_vec(x.shape(), gx)?),
        weight: Some(Tensor::from_vec(w.shape(), gw)?),
        bias: Tensor::from_vec(&[dout], gb)?,
    })
}

/// Lower bound on the norm in [`l2_normalize_last`].
pub const NORM_EPS: f64 = 1e-12;

/// Scale every vector along the last axis to unit Euclidean norm.
/// Returns the normalised tensor and the (clamped) norms.
pub fn l2_normalize_last<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let d = last_dim("l2_normalize", x)?;
    let mut y = x.data().to_vec();
    let mut norms = Vec::with_capacity(y.len() / d);
    for row in y.chunks_mut(d) {
        let nrm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt().max(NORM_EPS);
        for v in row.iter_mut() {
            *v = T::of(v.as_f64() / nrm);
        }
        norms.push(T::of(nrm));
    }
    Ok((Tensor::from_vec(x.shape(), y)?, norms))
}

pub fn l2_normalize_last_backward<T: Real>(y: &Tensor<T>, norms: &[T], gy: &Tensor<T>) -> Result<Tensor<T>> {
    let d = last_dim("l2_normalize", y)?;
    let mut gx = vec![T::zero(); y.numel()];
    for (i, ((dst, yr), gr)) in gx.chunks_mut(d).zip(y.data().chunks(d)).zip(gy.data().chunks(d)).enumerate() {
        let nrm = norms[i].as_f64();
        let clamped = nrm <= NORM_EPS;
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        for ((o, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            let v = if clamped { gv.as_f64() } else { gv.as_f64() - yv.as_f64() * dot };
            *o = T::of(v / nrm);
        }
    }
    Tensor::from_vec(y.shape(), gx)
}

/// Patch-wise contrastive loss over `[N, S, D]` query and key stacks.
///
/// For every sample and location `s`, the logits are `q_s . k_t / temperature`
/// over all locations `t` of the same sample; the positive is `t = s` and the
/// other `S - 1` locations are negatives. Returns the mean cross-entropy and
/// the row-softmax probabilities needed by the backward pass.
pub fn patch_nce<T: Real>(q: &Tensor<T>, k: &Tensor<T>, temperature: f64) -> Result<(f64, Vec<f64>)> {
    let (n, s, d) = q.dims3()?;
    if k.shape() != q.shape() {
        return Err(shape_err("patch_nce", format!("query {:?} vs key {:?}", q.shape(), k.shape())));
    }
    if s < 2 {
        return Err(shape_err("patch_nce", "needs at least two locations so every query has a negative"));
    }
    let mut probs = vec![0.0f64; n * s * s];
    let mut logits = vec![T::zero(); s * s];
    let mut total = 0.0f64;
    for ni in 0..n {
        let qn = &q.data()[ni * s * d..(ni + 1) * s * d];
        let kn = &k.data()[ni * s * d..(ni + 1) * s * d];
        T::gemm(
            T::one(),
            MatRef::dense(qn, s, d),
            MatRef::dense(kn, s, d).t(),
            T::zero(),
            MatMut::dense(&mut logits, s, s),
        );
        for si in 0..s {
            let row = &logits[si * s..(si + 1) * s];
            let scaled = |v: T| v.as_f64() / temperature;
            let mx = row.iter().map(|&v| scaled(v)).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (scaled(v) - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += lse - scaled(row[si]);
            let prow = &mut probs[(ni * s + si) * s..(ni * s + si + 1) * s];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (scaled(v) - lse).exp();
            }
        }
    }
    Ok((total / (n * s) as f64, probs))
}

pub fn patch_nce_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    probs: &[f64],
    temperature: f64,
    upstream: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, s, d) = q.dims3()?;
    let scale = upstream / ((n * s) as f64 * temperature);
    let mut dl = vec![T::zero(); s * s];
    let mut gq = vec![T::zero(); q.numel()];
    let mut gk = vec![T::zero(); k.numel()];
    for ni in 0..n {
        for si in 0..s {
            for ti in 0..s {
                let p = probs[(ni * s + si) * s + ti];
                let target = if si == ti { 1.0 } else { 0.0 };
                dl[si * s + ti] = T::of((p - target) * scale);
            }
        }
        let qn = &q.data()[ni * s * d..(ni + 1) * s * d];
        let kn = &k.data()[ni * s * d..(ni + 1) * s * d];
        let dlm = MatRef::dense(&dl, s, s);
        T::gemm(
            T::one(),
            dlm,
            MatRef::dense(kn, s, d),
            T::zero(),
            MatMut::dense(&mut gq[ni * s * d..(ni + 1) * s * d], s, d),
        );
        T::gemm(
            T::one(),
            dlm.t(),
            MatRef::dense(qn, s, d),
            T::zero(),
            MatMut::dense(&mut gk[ni * s * d..(ni + 1) * s * d], s, d),
        );
    }
    Ok((Tensor::from_vec(q.shape(), gq)?, Tensor::from_vec(k.shape(), gk)?))
}

/// `mean((x - target)^2)`.
pub fn mse_to_const<T: Real>(x: &Tensor<T>, target: f64) -> Result<f64> {
    if x.numel() == 0 {
        return Err(shape_err("mse", "empty score map"));
    }
    Ok(x.data().iter().map(|v| (v.as_f64() - target).powi(2)).sum::<f64>() / x.numel() as f64)
}

/// Binary cross-entropy of logits against a constant label, averaged.
pub fn bce_logits_to_const<T: Real>(x: &Tensor<T>, target: f64) -> Result<f64> {
    if x.numel() == 0 {
        return Err(shape_err("bce", "empty score map"));
    }
    let s: f64 = x
        .data()
        .iter()
        .map(|v| {
            let z = v.as_f64();
            z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
        })
        .sum();
    Ok(s / x.numel() as f64)
}

/// `mean(|a - b|)`.
pub fn l1_mean<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err("l1", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(shape_err("l1", "empty tensors"));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum::<f64>() / a.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, k, _) = w.dims4().unwrap();
        let oh = g.out_dim(h).unwrap();
        let ow = g.out_dim(wd).unwrap();
        let mut y = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (yy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (xx * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oi * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((ni * o + oi) * oh + yy) * ow + xx] = acc;
                    }
                }
            }
        }
        y
    }

    fn rng() -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = rng();
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (7, 1, 0), (1, 1, 0), (3, 2, 0)] {
            let g = ConvGeom::new(k, s, p);
            let x = Tensor::<f64>::randn(&[2, 3, 9, 8], 1.0, &mut r);
            let w = Tensor::<f64>::randn(&[4, 3, k, k], 1.0, &mut r);
            let got = conv2d(&x, &w, None, g).unwrap();
            let want = naive_conv(&x, &w, g);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> with shared weights
        let mut r = rng();
        let g = ConvGeom::new(3, 2, 1);
        let x = Tensor::<f64>::randn(&[1, 2, 8, 8], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let y = conv2d(&x, &w, None, g).unwrap();
        let u = Tensor::<f64>::randn(y.shape(), 1.0, &mut r);
        let wt = w.clone(); // [O=3, C=2] read as [Cin=3, Cout=2] for the transpose
        let v = conv_transpose2d(&u, &wt, None, g, 1).unwrap();
        assert_eq!(v.shape(), x.shape());
        let lhs: f64 = y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn chunked_lowering_matches_unchunked() {
        // 1x1 stride-2 is not pointwise and exercises the chunk loop with a
        // tiny budget via a large channel count.
        let mut r = rng();
        let g = ConvGeom::new(3, 1, 1);
        let x = Tensor::<f32>::randn(&[1, 600, 40, 40], 1.0, &mut r);
        let w = Tensor::<f32>::randn(&[2, 600, 3, 3], 0.05, &mut r);
        let y = conv2d(&x, &w, None, g).unwrap();
        let low = Lowering { c: 600, h: 40, w: 40, ow: 40, geom: g };
        assert!(low.chunk(1600) < 1600, "test must exercise chunking");
        let y64 = naive_conv(&x.cast(), &w.cast(), g);
        assert!(y.cast::<f64>().max_abs_diff(&y64) < 1e-3);
    }

    #[test]
    fn reflect_pad_values() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(reflect_pad(&x, 1).is_err());
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = reflect_pad(&x, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 5]);
        assert_eq!(&y.data()[0..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
        assert_eq!(&y.data()[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[3, 7], 5.0, &mut r);
        let y = softmax_last(&x).unwrap();
        for row in y.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap();
        let (y, arg) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}
