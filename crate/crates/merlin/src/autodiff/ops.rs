//! Operator kernels.
//!
//! Every kernel writes each output element from exactly one task with a
//! fixed accumulation order, so results are bit-identical regardless of the
//! worker thread count.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};

/// Work threshold (multiply-accumulates) below which kernels stay serial.
const PAR_THRESHOLD: usize = 1 << 16;

fn for_each_plane<T: Send>(
    data: &mut [T],
    plane: usize,
    parallel: bool,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    if parallel && data.len() > plane {
        data.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    } else {
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            f(i, chunk);
        }
    }
}

/// Row ranges such that `out[y][x] += w * in[y + dy][x + dx]` stays in
/// bounds: returns `(y0, y1, x0, x1)`.
#[inline]
fn shifted_bounds(h: usize, w: usize, dy: isize, dx: isize) -> (usize, usize, usize, usize) {
    let y0 = (-dy).max(0) as usize;
    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
    (y0, y1, x0, x1)
}

/// `out[y][x] += scale * src[y + dy][x + dx]` over the valid region.
#[inline]
fn accumulate_shifted<T: Real>(
    out: &mut [T],
    src: &[T],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    scale: T,
) {
    let (y0, y1, x0, x1) = shifted_bounds(h, w, dy, dx);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let dst_row = &mut out[y * w + x0..y * w + x1];
        let src_row = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (d, &s) in dst_row.iter_mut().zip(src_row.iter()) {
            *d = *d + scale * s;
        }
    }
}

/// Dot product of two equally shifted rows, used by the kernel gradient.
#[inline]
fn dot_shifted<T: Real>(a: &[T], b: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let (y0, y1, x0, x1) = shifted_bounds(h, w, dy, dx);
    let mut acc = T::ZERO;
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let ar = &a[y * w + x0..y * w + x1];
        let br = &b[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        let mut row = T::ZERO;
        for (&x, &y) in ar.iter().zip(br.iter()) {
            row = row + x * y;
        }
        acc = acc + row;
    }
    acc
}

/// 2-D convolution with zero padding preserving the spatial size.
/// `x (n,ci,h,w) * w (co,ci,k,k) + b (1,co,1,1) -> (n,co,h,w)`, stride 1.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let [n, ci, h, w] = x.dims;
    let [co, _, kh, kw] = weight.dims;
    let pad = (kh / 2) as isize;
    let plane = h * w;
    let mut out = Tensor::zeros([n, co, h, w]);
    let parallel = n * co * ci * kh * kw * plane > PAR_THRESHOLD;
    let xdata = &x.data;
    let wdata = &weight.data;
    let bdata = &bias.data;
    for_each_plane(&mut out.data, plane, parallel, |idx, out_plane| {
        let ni = idx / co;
        let coi = idx % co;
        let bias_v = bdata[coi];
        for v in out_plane.iter_mut() {
            *v = bias_v;
        }
        for cii in 0..ci {
            let src = &xdata[(ni * ci + cii) * plane..(ni * ci + cii + 1) * plane];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdata[((coi * ci + cii) * kh + ky) * kw + kx];
                    accumulate_shifted(
                        out_plane,
                        src,
                        h,
                        w,
                        ky as isize - pad,
                        kx as isize - pad,
                        wv,
                    );
                }
            }
        }
    });
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, ci, h, w] = x.dims;
    let [co, _, kh, kw] = weight.dims;
    let pad = (kh / 2) as isize;
    let plane = h * w;
    let parallel = n * co * ci * kh * kw * plane > PAR_THRESHOLD;

    let mut gx = Tensor::zeros(x.dims);
    let wdata = &weight.data;
    let godata = &gout.data;
    for_each_plane(&mut gx.data, plane, parallel, |idx, gx_plane| {
        let ni = idx / ci;
        let cii = idx % ci;
        for coi in 0..co {
            let gsrc = &godata[(ni * co + coi) * plane..(ni * co + coi + 1) * plane];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdata[((coi * ci + cii) * kh + ky) * kw + kx];
                    // Transposed stencil: gx[s] += w * gout[s - (k - pad)].
                    accumulate_shifted(
                        gx_plane,
                        gsrc,
                        h,
                        w,
                        pad - ky as isize,
                        pad - kx as isize,
                        wv,
                    );
                }
            }
        }
    });

    let mut gw = Tensor::zeros(weight.dims);
    let xdata = &x.data;
    let kern = ci * kh * kw;
    for_each_plane(&mut gw.data, kern, parallel, |coi, gw_slab| {
        for cii in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::ZERO;
                    for ni in 0..n {
                        let go = &godata[(ni * co + coi) * plane..(ni * co + coi + 1) * plane];
                        let src = &xdata[(ni * ci + cii) * plane..(ni * ci + cii + 1) * plane];
                        acc = acc
                            + dot_shifted(go, src, h, w, ky as isize - pad, kx as isize - pad);
                    }
                    gw_slab[(cii * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });

    let mut gb = Tensor::zeros([1, co, 1, 1]);
    for coi in 0..co {
        let mut acc = T::ZERO;
        for ni in 0..n {
            for &v in &godata[(ni * co + coi) * plane..(ni * co + coi + 1) * plane] {
                acc = acc + v;
            }
        }
        gb.data[coi] = acc;
    }

    (gx, gw, gb)
}

pub fn leaky_relu_forward<T: Real>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    let mut out = x.detached();
    for v in out.data.iter_mut() {
        if *v < T::ZERO {
            *v = alpha * *v;
        }
    }
    out
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, gout: &[T], alpha: T) -> Vec<T> {
    x.data
        .iter()
        .zip(gout.iter())
        .map(|(&xi, &g)| if xi < T::ZERO { alpha * g } else { g })
        .collect()
}

/// 2x2 max pooling with stride 2. Ties pick the first element in scan order.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let plane = h * w;
    let oplane = oh * ow;
    for pc in 0..n * c {
        let src = &x.data[pc * plane..(pc + 1) * plane];
        let dst = &mut out.data[pc * oplane..(pc + 1) * oplane];
        for y in 0..oh {
            for x2 in 0..ow {
                let mut best = src[2 * y * w + 2 * x2];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = src[(2 * y + dy) * w + 2 * x2 + dx];
                    if v > best {
                        best = v;
                    }
                }
                dst[y * ow + x2] = best;
            }
        }
    }
    out
}

pub fn maxpool2_backward<T: Real>(x: &Tensor<T>, gout: &[T]) -> Vec<T> {
    let [n, c, h, w] = x.dims;
    let (oh, ow) = (h / 2, w / 2);
    let plane = h * w;
    let oplane = oh * ow;
    let mut gx = vec![T::ZERO; x.numel()];
    for pc in 0..n * c {
        let src = &x.data[pc * plane..(pc + 1) * plane];
        let gsrc = &gout[pc * oplane..(pc + 1) * oplane];
        let gdst = &mut gx[pc * plane..(pc + 1) * plane];
        for y in 0..oh {
            for x2 in 0..ow {
                let mut best_idx = 2 * y * w + 2 * x2;
                let mut best = src[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * w + 2 * x2 + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                gdst[best_idx] = gdst[best_idx] + gsrc[y * ow + x2];
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let plane = h * w;
    let oplane = oh * ow;
    for pc in 0..n * c {
        let src = &x.data[pc * plane..(pc + 1) * plane];
        let dst = &mut out.data[pc * oplane..(pc + 1) * oplane];
        for y in 0..oh {
            for x2 in 0..ow {
                dst[y * ow + x2] = src[(y / 2) * w + x2 / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(x: &Tensor<T>, gout: &[T]) -> Vec<T> {
    let [n, c, h, w] = x.dims;
    let (oh, ow) = (2 * h, 2 * w);
    let plane = h * w;
    let oplane = oh * ow;
    let mut gx = vec![T::ZERO; x.numel()];
    for pc in 0..n * c {
        let gsrc = &gout[pc * oplane..(pc + 1) * oplane];
        let gdst = &mut gx[pc * plane..(pc + 1) * plane];
        for y in 0..oh {
            for x2 in 0..ow {
                let d = &mut gdst[(y / 2) * w + x2 / 2];
                *d = *d + gsrc[y * ow + x2];
            }
        }
    }
    gx
}

pub fn concat_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.dims;
    let cb = b.dims[1];
    let plane = h * w;
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    for ni in 0..n {
        let dst = &mut out.data[ni * (ca + cb) * plane..(ni + 1) * (ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&a.data[ni * ca * plane..(ni + 1) * ca * plane]);
        dst[ca * plane..].copy_from_slice(&b.data[ni * cb * plane..(ni + 1) * cb * plane]);
    }
    out
}

pub fn concat_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, gout: &[T]) -> (Vec<T>, Vec<T>) {
    let [n, ca, h, w] = a.dims;
    let cb = b.dims[1];
    let plane = h * w;
    let mut ga = vec![T::ZERO; a.numel()];
    let mut gb = vec![T::ZERO; b.numel()];
    for ni in 0..n {
        let src = &gout[ni * (ca + cb) * plane..(ni + 1) * (ca + cb) * plane];
        ga[ni * ca * plane..(ni + 1) * ca * plane].copy_from_slice(&src[..ca * plane]);
        gb[ni * cb * plane..(ni + 1) * cb * plane].copy_from_slice(&src[ca * plane..]);
    }
    (ga, gb)
}

/// Loss flavor selector shared by the two likelihood losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `sum 0.5 d(p) + exp(d(t) - d(p))`, one-part self-supervision.
    HalfLog,
    /// `sum d(p) + exp(d(t) - d(p))`, full-intensity supervision.
    FullLog,
}

/// Pixel-summed, batch-averaged likelihood loss. Prediction and target are
/// normalized log images; the affine `d(v) = lo + (hi - lo) v` restores the
/// log domain. Exponent arguments are clamped at `clamp` before `exp`.
pub fn likelihood_loss_forward<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    lo: T,
    span: T,
    clamp: T,
    kind: LossKind,
) -> T {
    let half = T::from_f64(0.5);
    let mut acc = T::ZERO;
    for (&p, &t) in pred.data.iter().zip(target.data.iter()) {
        let dp = lo + span * p;
        let dt = lo + span * t;
        let arg = dt - dp;
        let arg = if arg > clamp { clamp } else { arg };
        let linear = match kind {
            LossKind::HalfLog => half * dp,
            LossKind::FullLog => dp,
        };
        acc = acc + linear + arg.exp();
    }
    acc / T::from_f64(pred.dims[0] as f64)
}

/// Gradient of [`likelihood_loss_forward`] w.r.t. the prediction.
pub fn likelihood_loss_backward<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    lo: T,
    span: T,
    clamp: T,
    kind: LossKind,
    gout: T,
) -> Vec<T> {
    let half = T::from_f64(0.5);
    let batch = T::from_f64(pred.dims[0] as f64);
    pred.data
        .iter()
        .zip(target.data.iter())
        .map(|(&p, &t)| {
            let dp = lo + span * p;
            let dt = lo + span * t;
            let arg = dt - dp;
            let linear = match kind {
                LossKind::HalfLog => half,
                LossKind::FullLog => T::ONE,
            };
            // Clamped exponent region has zero slope.
            let expterm = if arg > clamp { T::ZERO } else { arg.exp() };
            gout * span * (linear - expterm) / batch
        })
        .collect()
}
