//! Forward and backward kernels on plain tensors.
//!
//! These carry no graph state; [`super::Tape`] records which kernel ran and
//! calls the matching backward. Stride-1 convolutions run as row-wise
//! multiply-adds over a padded input, pointwise ones as a single GEMM, and
//! anything else through im2col and a strided GEMM.

use crate::error::{Error, Result};

use super::direct::Plan;
use super::{Element, Shape, Tensor};

/// Stride, zero-padding and dilation of a 2-D convolution (same on both axes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1, padding equal to the dilation: a 3x3 kernel keeps extents.
    pub fn same3x3(dilation: usize) -> Self {
        ConvGeometry::new(1, dilation, dilation)
    }

    pub fn pointwise() -> Self {
        ConvGeometry::new(1, 0, 1)
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry::new(1, 0, 1)
    }
}

/// `floor((input + 2p - d(k-1) - 1) / s) + 1`, or `None` when the dilated
/// kernel does not fit the padded input or the geometry is degenerate.
pub fn conv_out_extent(input: usize, kernel: usize, g: ConvGeometry) -> Option<usize> {
    if g.stride == 0 || g.dilation == 0 || kernel == 0 || input == 0 {
        return None;
    }
    let effective = g.dilation * (kernel - 1) + 1;
    let padded = input + 2 * g.padding;
    if effective > padded {
        return None;
    }
    Some((padded - effective) / g.stride + 1)
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn pointwise(&self, g: ConvGeometry) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.padding == 0
    }

    fn plan(&self, cout: usize, g: ConvGeometry) -> Plan {
        Plan {
            cin: self.cin,
            cout,
            h: self.h,
            w: self.w,
            kh: self.kh,
            kw: self.kw,
            pad: g.padding,
            dilation: g.dilation,
            oh: self.oh,
            ow: self.ow,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvPath {
    Pointwise,
    Direct,
    Unfold,
}

fn choose_path(d: &ConvDims, g: ConvGeometry) -> ConvPath {
    if d.pointwise(g) {
        ConvPath::Pointwise
    } else if g.stride == 1 {
        ConvPath::Direct
    } else {
        ConvPath::Unfold
    }
}

fn conv_dims<T: Element>(
    input: Shape,
    weight: Shape,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<ConvDims> {
    if input.c != weight.c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input channels {} != kernel in_ch {} (input {input}, kernel {weight})",
                input.c, weight.c
            ),
        ));
    }
    if let Some(b) = bias {
        let bs = b.shape();
        if bs != Shape::new(1, weight.n, 1, 1) {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {bs} does not match out_ch {}", weight.n),
            ));
        }
    }
    let oh = conv_out_extent(input.h, weight.h, g);
    let ow = conv_out_extent(input.w, weight.w, g);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvDims {
            cin: input.c,
            h: input.h,
            w: input.w,
            kh: weight.h,
            kw: weight.w,
            oh,
            ow,
        }),
        _ => Err(Error::shape(
            "conv2d",
            format!(
                "kernel {}x{} with {g:?} does not fit input {}x{}",
                weight.h, weight.w, input.h, input.w
            ),
        )),
    }
}

/// Unfolds one image `(cin, h, w)` into a `(cin*kh*kw, oh*ow)` patch matrix.
fn im2col<T: Element>(x: &[T], d: &ConvDims, g: ConvGeometry, cols: &mut [T]) {
    let ohw = d.out_plane();
    let pad = g.padding as isize;
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let dst_row = &mut cols[row * ohw..(row + 1) * ohw];
                let x_off = (kj * g.dilation) as isize - pad;
                let (lo, hi) = valid_range(x_off, g.stride, d.w, d.ow);
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                    let dst = &mut dst_row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = (lo as isize + x_off) as usize;
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, v) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src[(ox as isize * g.stride as isize + x_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix entries back onto the image.
fn col2im<T: Element>(cols: &[T], d: &ConvDims, g: ConvGeometry, dx: &mut [T]) {
    let ohw = d.out_plane();
    let pad = g.padding as isize;
    for ci in 0..d.cin {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let src_row = &cols[row * ohw..(row + 1) * ohw];
                let x_off = (kj * g.dilation) as isize - pad;
                let (lo, hi) = valid_range(x_off, g.stride, d.w, d.ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &src_row[oy * d.ow..(oy + 1) * d.ow];
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if g.stride == 1 {
                        let start = (lo as isize + x_off) as usize;
                        for (d, &s) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                            *d = *d + s;
                        }
                    } else {
                        for ox in lo..hi {
                            let ix = (ox as isize * g.stride as isize + x_off) as usize;
                            dst[ix] = dst[ix] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose source column `ox*stride + offset` lies
/// inside `[0, width)`.
fn valid_range(offset: isize, stride: usize, width: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + s - 1) / s) as usize
    };
    let last = width as isize - 1 - offset;
    let hi = if last < 0 {
        0
    } else {
        ((last / s) as usize + 1).min(out)
    };
    (lo.min(out), hi.max(lo.min(out)))
}

/// Zero-padded 2-D convolution (cross-correlation) with optional bias.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input.shape(), weight.shape(), bias, g)?;
    conv2d_forward_via(choose_path(&d, g), &d, input, weight, bias, g)
}

fn conv2d_forward_via<T: Element>(
    path: ConvPath,
    d: &ConvDims,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let xs = input.shape();
    let cout = weight.shape().n;
    let ohw = d.out_plane();
    let patch = d.patch();
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, d.oh, d.ow));
    let mut cols = match path {
        ConvPath::Unfold => vec![T::zero(); patch * ohw],
        _ => Vec::new(),
    };
    let plan = d.plan(cout, g);
    for n in 0..xs.n {
        let x = input.item(n);
        let o = &mut out.data_mut()[n * cout * ohw..(n + 1) * cout * ohw];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(ohw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        if path == ConvPath::Direct {
            plan.forward(&plan.pad_image(x), weight.data(), o);
            continue;
        }
        let b_mat: &[T] = if path == ConvPath::Pointwise {
            x
        } else {
            im2col(x, d, g, &mut cols);
            &cols
        };
        T::gemm(
            cout,
            patch,
            ohw,
            T::one(),
            weight.data(),
            (patch as isize, 1),
            b_mat,
            (ohw as isize, 1),
            T::one(),
            o,
            (ohw as isize, 1),
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`]. Each requested gradient is returned in
/// the shape of its operand.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let d = conv_dims::<T>(input.shape(), weight.shape(), None, g)?;
    conv2d_backward_via(choose_path(&d, g), &d, input, weight, grad_out, g, need)
}

fn conv2d_backward_via<T: Element>(
    path: ConvPath,
    d: &ConvDims,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (need_input, need_weight, need_bias) = need;
    let xs = input.shape();
    let ws = weight.shape();
    let cout = ws.n;
    let ohw = d.out_plane();
    let patch = d.patch();
    if grad_out.shape() != Shape::new(xs.n, cout, d.oh, d.ow) {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {} has wrong shape", grad_out.shape()),
        ));
    }
    let mut dx = need_input.then(|| Tensor::zeros(xs));
    let mut dw = need_weight.then(|| Tensor::zeros(ws));
    let mut db = need_bias.then(|| Tensor::zeros(Shape::new(1, cout, 1, 1)));
    let mut cols = match path {
        ConvPath::Unfold => vec![T::zero(); patch * ohw],
        _ => Vec::new(),
    };
    let plan = d.plan(cout, g);
    let image = d.cin * d.h * d.w;
    for n in 0..xs.n {
        let go = &grad_out.data()[n * cout * ohw..(n + 1) * cout * ohw];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in go.chunks(ohw).enumerate() {
                let s = chunk.iter().fold(T::zero(), |a, &v| a + v);
                db.data_mut()[co] = db.data()[co] + s;
            }
        }
        if path == ConvPath::Direct {
            if let Some(dw) = dw.as_mut() {
                plan.weight_grad(&plan.pad_image(input.item(n)), go, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                plan.input_grad(weight.data(), go, &mut dx.data_mut()[n * image..(n + 1) * image]);
            }
            continue;
        }
        if let Some(dw) = dw.as_mut() {
            let x = input.item(n);
            let b_mat: &[T] = if path == ConvPath::Pointwise {
                x
            } else {
                im2col(x, d, g, &mut cols);
                &cols
            };
            // dW (cout x patch) += dOut (cout x ohw) * cols^T (ohw x patch)
            T::gemm(
                cout,
                ohw,
                patch,
                T::one(),
                go,
                (ohw as isize, 1),
                b_mat,
                (1, ohw as isize),
                T::one(),
                dw.data_mut(),
                (patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[n * image..(n + 1) * image];
            if path == ConvPath::Pointwise {
                T::gemm(
                    patch,
                    cout,
                    ohw,
                    T::one(),
                    weight.data(),
                    (1, patch as isize),
                    go,
                    (ohw as isize, 1),
                    T::one(),
                    dxi,
                    (ohw as isize, 1),
                );
            } else {
                // dcols (patch x ohw) = W^T (patch x cout) * dOut (cout x ohw)
                T::gemm(
                    patch,
                    cout,
                    ohw,
                    T::one(),
                    weight.data(),
                    (1, patch as isize),
                    go,
                    (ohw as isize, 1),
                    T::zero(),
                    &mut cols,
                    (ohw as isize, 1),
                );
                col2im(&cols, d, g, dxi);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

fn pool_extent(op: &'static str, input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::shape(op, "kernel and stride must be >= 1"));
    }
    if kernel > input {
        return Err(Error::shape(
            op,
            format!("kernel {kernel} larger than input extent {input}"),
        ));
    }
    Ok((input - kernel) / stride + 1)
}

pub fn avg_pool2d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let s = input.shape();
    let oh = pool_extent("avg_pool2d", s.h, kernel.0, stride.0)?;
    let ow = pool_extent("avg_pool2d", s.w, kernel.1, stride.1)?;
    let inv = T::one() / T::from_usize(kernel.0 * kernel.1).unwrap();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let out_data = out.data_mut();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..kernel.0 {
                        let row = (oy * stride.0 + ky) * s.w + ox * stride.1;
                        for &v in &plane[row..row + kernel.1] {
                            acc = acc + v;
                        }
                    }
                    out_data[o] = acc * inv;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d_backward<T: Element>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Tensor<T> {
    let s = input_shape;
    let os = grad_out.shape();
    let inv = T::one() / T::from_usize(kernel.0 * kernel.1).unwrap();
    let mut dx = Tensor::zeros(s);
    let plane = s.plane();
    let dxd = dx.data_mut();
    let god = grad_out.data();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * plane;
        for oy in 0..os.h {
            for ox in 0..os.w {
                let g = god[o] * inv;
                o += 1;
                for ky in 0..kernel.0 {
                    let row = base + (oy * stride.0 + ky) * s.w + ox * stride.1;
                    for v in &mut dxd[row..row + kernel.1] {
                        *v = *v + g;
                    }
                }
            }
        }
    }
    dx
}

/// Windowed maximum. Also returns, per output cell, the flat input index of
/// the first maximal element in row-major window order.
pub fn max_pool2d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    let oh = pool_extent("max_pool2d", s.h, kernel, stride)?;
    let ow = pool_extent("max_pool2d", s.w, kernel, stride)?;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut argmax = Vec::with_capacity(out.len());
    let data = input.data();
    let plane = s.plane();
    let out_data = out.data_mut();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * plane;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * stride * s.w + ox * stride;
                let mut best = data[best_i];
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * s.w + ox * stride;
                    for kx in 0..kernel {
                        let v = data[row + kx];
                        if v > best {
                            best = v;
                            best_i = row + kx;
                        }
                    }
                }
                out_data[o] = best;
                argmax.push(best_i);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2d_backward<T: Element>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
    argmax: &[usize],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dxd[i] = dxd[i] + g;
    }
    dx
}

/// `out(n, c, h*r+i, w*r+j) = in(n, c*r*r + i*r + j, h, w)`.
pub fn pixel_shuffle<T: Element>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("channels {} not divisible by r^2 = {}", s.c, r * r),
        ));
    }
    let oc = s.c / (r * r);
    let os = Shape::new(s.n, oc, s.h * r, s.w * r);
    let mut out = Tensor::zeros(os);
    let src = input.data();
    let dst = out.data_mut();
    for n in 0..s.n {
        for c in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    let ic = c * r * r + i * r + j;
                    for h in 0..s.h {
                        let srow = s.index(n, ic, h, 0);
                        let drow = os.index(n, c, h * r + i, 0);
                        for w in 0..s.w {
                            dst[drow + w * r + j] = src[srow + w];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse permutation of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("extents {}x{} not divisible by r = {r}", s.h, s.w),
        ));
    }
    let (h, w) = (s.h / r, s.w / r);
    let os = Shape::new(s.n, s.c * r * r, h, w);
    let mut out = Tensor::zeros(os);
    let src = input.data();
    let dst = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let oc = c * r * r + i * r + j;
                    for y in 0..h {
                        let drow = os.index(n, oc, y, 0);
                        let srow = s.index(n, c, y * r + i, 0);
                        for x in 0..w {
                            dst[drow + x] = src[srow + x * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Source index rule for nearest resizing: `floor((dst + 0.5) * src / dst)`.
pub fn nearest_index(dst: usize, src_extent: usize, dst_extent: usize) -> usize {
    let idx = ((2 * dst + 1) * src_extent) / (2 * dst_extent);
    idx.min(src_extent - 1)
}

pub fn resize_nearest_forward<T: Element>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_nearest", "output extents must be >= 1"));
    }
    let s = input.shape();
    let rows: Vec<usize> = (0..out_h).map(|y| nearest_index(y, s.h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|x| nearest_index(x, s.w, out_w)).collect();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let dst = out.data_mut();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for &sy in &rows {
                let row = &plane[sy * s.w..(sy + 1) * s.w];
                for &sx in &cols {
                    dst[o] = row[sx];
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn resize_nearest_backward<T: Element>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let os = grad_out.shape();
    let rows: Vec<usize> = (0..os.h).map(|y| nearest_index(y, s.h, os.h)).collect();
    let cols: Vec<usize> = (0..os.w).map(|x| nearest_index(x, s.w, os.w)).collect();
    let mut dx = Tensor::zeros(s);
    let dxd = dx.data_mut();
    let god = grad_out.data();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for &sy in &rows {
            for &sx in &cols {
                let i = base + sy * s.w + sx;
                dxd[i] = dxd[i] + god[o];
                o += 1;
            }
        }
    }
    dx
}

/// Per-output-index interpolation taps `(i0, i1, w0, w1)` along one axis,
/// half-pixel centres with edge clamping.
pub fn bilinear_taps(src_extent: usize, dst_extent: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src_extent as f64 / dst_extent as f64;
    (0..dst_extent)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(src_extent - 1);
            let i1 = (i0 + 1).min(src_extent - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resize of every plane to `(out_h, out_w)`.
pub fn resize_bilinear_forward<T: Element>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", "output extents must be >= 1"));
    }
    let s = input.shape();
    let ty = taps_as::<T>(bilinear_taps(s.h, out_h));
    let tx = taps_as::<T>(bilinear_taps(s.w, out_w));
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let dst = out.data_mut();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for &(y0, y1, wy0, wy1) in &ty {
                let r0 = &plane[y0 * s.w..(y0 + 1) * s.w];
                let r1 = &plane[y1 * s.w..(y1 + 1) * s.w];
                for &(x0, x1, wx0, wx1) in &tx {
                    let top = r0[x0] * wx0 + r0[x1] * wx1;
                    let bot = r1[x0] * wx0 + r1[x1] * wx1;
                    dst[o] = top * wy0 + bot * wy1;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`resize_bilinear_forward`].
pub fn resize_bilinear_backward<T: Element>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let os = grad_out.shape();
    let ty = taps_as::<T>(bilinear_taps(s.h, os.h));
    let tx = taps_as::<T>(bilinear_taps(s.w, os.w));
    let mut dx = Tensor::zeros(s);
    let dxd = dx.data_mut();
    let god = grad_out.data();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for &(y0, y1, wy0, wy1) in &ty {
            for &(x0, x1, wx0, wx1) in &tx {
                let g = god[o];
                o += 1;
                let a = base + y0 * s.w;
                let b = base + y1 * s.w;
                dxd[a + x0] = dxd[a + x0] + g * wy0 * wx0;
                dxd[a + x1] = dxd[a + x1] + g * wy0 * wx1;
                dxd[b + x0] = dxd[b + x0] + g * wy1 * wx0;
                dxd[b + x1] = dxd[b + x1] + g * wy1 * wx1;
            }
        }
    }
    dx
}

fn taps_as<T: Element>(taps: Vec<(usize, usize, f64, f64)>) -> Vec<(usize, usize, T, T)> {
    taps.into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64_lossy(wa), T::from_f64_lossy(wb)))
        .collect()
}

pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
        .shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(
                "concat_channels",
                format!("input {s} does not share batch/spatial extents with {first}"),
            ));
        }
        channels += s.c;
    }
    let os = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(os.len());
    for n in 0..first.n {
        for t in inputs {
            data.extend_from_slice(t.item(n));
        }
    }
    Tensor::from_vec(os, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data).unwrap()
    }

    /// Direct definition of cross-correlation, used as the oracle for the
    /// im2col path.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeometry) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let oh = conv_out_extent(xs.h, ws.h, g).unwrap();
        let ow = conv_out_extent(xs.w, ws.w, g).unwrap();
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
        for n in 0..xs.n {
            for co in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..xs.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set(n, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..shape.len())
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_scalar_example() {
        let x = t((1, 1, 1, 1), vec![3.0]);
        let w = t((1, 1, 1, 1), vec![2.0]);
        let b = t((1, 1, 1, 1), vec![1.0]);
        let y = conv2d_forward(&x, &w, Some(&b), ConvGeometry::default()).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn conv_dilated_same_shape() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 8, 8));
        let w = Tensor::<f32>::zeros(Shape::new(4, 2, 3, 3));
        let y = conv2d_forward(&x, &w, None, ConvGeometry::new(1, 2, 2)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 8, 8));
    }

    #[test]
    fn conv_channel_mismatch_names_dims() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 8, 8));
        let w = Tensor::<f32>::zeros(Shape::new(4, 2, 3, 3));
        let err = conv2d_forward(&x, &w, None, ConvGeometry::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input channels 3") && msg.contains("in_ch 2"), "{msg}");
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        assert!(conv2d_forward(&x, &w, None, ConvGeometry::new(1, 0, 3)).is_err());
    }

    #[test]
    fn conv_matches_naive_definition_across_geometries() {
        for &(s, p, d) in &[(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 3, 2), (3, 0, 1), (1, 4, 4)] {
            let g = ConvGeometry::new(s, p, d);
            let x = pseudo(Shape::new(2, 3, 9, 7), 1);
            let w = pseudo(Shape::new(4, 3, 3, 3), 2);
            let b = pseudo(Shape::new(1, 4, 1, 1), 3);
            let fast = conv2d_forward(&x, &w, Some(&b), g).unwrap();
            let slow = naive_conv(&x, &w, Some(&b), g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn row_and_unfold_paths_agree_forward_and_backward() {
        for &(kh, kw, p, dil) in &[(3, 3, 1, 1), (3, 3, 4, 4), (2, 3, 0, 1), (3, 2, 2, 3), (1, 3, 1, 1)] {
            let g = ConvGeometry::new(1, p, dil);
            let x = pseudo(Shape::new(2, 3, 11, 9), 4);
            let w = pseudo(Shape::new(5, 3, kh, kw), 5);
            let b = pseudo(Shape::new(1, 5, 1, 1), 6);
            let d = conv_dims(x.shape(), w.shape(), Some(&b), g).unwrap();
            let rows = conv2d_forward_via(ConvPath::Direct, &d, &x, &w, Some(&b), g).unwrap();
            let unfold = conv2d_forward_via(ConvPath::Unfold, &d, &x, &w, Some(&b), g).unwrap();
            let close = |a: &Tensor<f64>, b: &Tensor<f64>| {
                assert_eq!(a.shape(), b.shape());
                for (u, v) in a.data().iter().zip(b.data()) {
                    assert!((u - v).abs() < 1e-12, "{kh}x{kw} p{p} d{dil}: {u} vs {v}");
                }
            };
            close(&rows, &unfold);
            let go = pseudo(rows.shape(), 7);
            let need = (true, true, true);
            let a = conv2d_backward_via(ConvPath::Direct, &d, &x, &w, &go, g, need).unwrap();
            let u = conv2d_backward_via(ConvPath::Unfold, &d, &x, &w, &go, g, need).unwrap();
            close(a.input.as_ref().unwrap(), u.input.as_ref().unwrap());
            close(a.weight.as_ref().unwrap(), u.weight.as_ref().unwrap());
            close(a.bias.as_ref().unwrap(), u.bias.as_ref().unwrap());
        }
    }

    #[test]
    fn pointwise_path_matches_direct_definition() {
        let x = pseudo(Shape::new(2, 5, 4, 3), 4);
        let w = pseudo(Shape::new(3, 5, 1, 1), 5);
        let fast = conv2d_forward(&x, &w, None, ConvGeometry::pointwise()).unwrap();
        let slow = naive_conv(&x, &w, None, ConvGeometry::pointwise());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_dilated_kernel_is_shifted_copy() {
        for d in 1..=3 {
            let x = pseudo(Shape::new(1, 1, 10, 10), 6);
            let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
            // tap (2, 0): reads input at (y + d, x - d)
            w.set(0, 0, 2, 0, 1.0);
            let y = conv2d_forward(&x, &w, None, ConvGeometry::same3x3(d)).unwrap();
            for r in 0..10 {
                for c in 0..10 {
                    let (sr, sc) = (r as isize + d as isize, c as isize - d as isize);
                    let expect = if sr < 10 && sc >= 0 { x.at(0, 0, sr as usize, sc as usize) } else { 0.0 };
                    assert_eq!(y.at(0, 0, r, c), expect);
                }
            }
        }
    }

    #[test]
    fn avg_pool_examples() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool2d_forward(&x, (2, 2), (2, 2)).unwrap().data(), &[2.5]);
        let c = Tensor::full(Shape::new(1, 1, 4, 4), 7.0);
        assert_eq!(avg_pool2d_forward(&c, (4, 4), (4, 4)).unwrap().data(), &[7.0]);
        assert!(avg_pool2d_forward(&c, (5, 1), (1, 1)).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let x = t((1, 1, 2, 2), vec![1.0, 9.0, 3.0, 4.0]);
        let (y, arg) = max_pool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[9.0]);
        assert_eq!(arg, vec![1]);
        let c = Tensor::full(Shape::new(1, 2, 4, 6), -1.5);
        let (y, arg) = max_pool2d_forward(&c, 2, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 3));
        assert!(y.data().iter().all(|&v| v == -1.5));
        // ties go to the first element of each window
        assert_eq!(arg[0], 0);
        assert_eq!(arg[1], 2);
        assert!(max_pool2d_forward(&c, 5, 1).is_err());
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = t((1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = pseudo(Shape::new(2, 3, 4, 5), 7);
        assert_eq!(pixel_shuffle(&z, 1).unwrap(), z);
        assert!(pixel_shuffle(&z, 2).is_err());
    }

    #[test]
    fn nearest_block_replication() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = resize_nearest_forward(&x, 4, 4).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let v = t((1, 1, 1, 1), vec![5.0]);
        let c = resize_nearest_forward(&v, 3, 7).unwrap();
        assert!(c.data().iter().all(|&e| e == 5.0));
        let z = pseudo(Shape::new(1, 2, 3, 5), 8);
        assert_eq!(resize_nearest_forward(&z, 3, 5).unwrap(), z);
    }

    #[test]
    fn bilinear_half_pixel_ramp() {
        let x = t((1, 1, 1, 2), vec![0.0, 1.0]);
        let y = resize_bilinear_forward(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
        let c = Tensor::full(Shape::new(1, 1, 3, 5), 0.3f64);
        let u = resize_bilinear_forward(&c, 12, 20).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.3));
        let z = pseudo(Shape::new(1, 2, 3, 5), 9);
        assert_eq!(resize_bilinear_forward(&z, 3, 5).unwrap(), z);
    }

    #[test]
    fn concat_layout_and_errors() {
        let a = pseudo(Shape::new(1, 2, 4, 4), 10);
        let b = pseudo(Shape::new(1, 3, 4, 4), 11);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 5, 4, 4));
        assert_eq!(y.channels(0, 2).unwrap(), a);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let c = pseudo(Shape::new(1, 1, 4, 3), 12);
        assert!(concat_channels(&[&a, &c]).is_err());
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(-2, 1, 8, 8), (2, 8));
        assert_eq!(valid_range(2, 1, 8, 8), (0, 6));
        assert_eq!(valid_range(-3, 2, 8, 5), (2, 5));
        assert_eq!(valid_range(10, 1, 8, 8), (0, 0));
    }
}
