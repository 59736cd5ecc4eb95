//! Slice-level forward/backward kernels. Shapes are validated by the callers
//! in `graph`; everything here assumes consistent extents.

use rayon::prelude::*;

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let plane = g.out_plane();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    out.par_chunks_mut(g.out_channels * plane)
        .zip(x.par_chunks(g.in_sample()))
        .for_each(|(y, xn)| {
            let mut scratch = Vec::new();
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                scratch.resize(kk * plane, T::zero());
                im2col(xn, g, &mut scratch);
                &scratch
            };
            if let Some(b) = bias {
                for (o, row) in y.chunks_mut(plane).enumerate() {
                    row.fill(b[o]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                g.out_channels,
                kk,
                plane,
                T::one(),
                weight,
                (kk, 1),
                cols,
                (plane, 1),
                beta,
                y,
                (plane, 1),
            );
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Input and weight gradients of one sample.
type SamplePartial<T> = (Option<Vec<T>>, Option<Vec<T>>);

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let kk = g.patch_len();
    let (want_x, want_w, want_b) = want;

    // Per-sample partials, reduced below in sample order so the result does
    // not depend on the thread count.
    let partials: Vec<SamplePartial<T>> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let xn = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
            let gy = &grad_out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
            let mut dw = None;
            if want_w {
                let mut scratch = Vec::new();
                let cols: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    scratch.resize(kk * plane, T::zero());
                    im2col(xn, g, &mut scratch);
                    &scratch
                };
                let mut buf = vec![T::zero(); g.out_channels * kk];
                T::gemm(
                    g.out_channels,
                    plane,
                    kk,
                    T::one(),
                    gy,
                    (plane, 1),
                    cols,
                    (1, plane),
                    T::zero(),
                    &mut buf,
                    (kk, 1),
                );
                dw = Some(buf);
            }
            let mut dx = None;
            if want_x {
                let mut dcols = vec![T::zero(); kk * plane];
                T::gemm(
                    kk,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    (1, kk),
                    gy,
                    (plane, 1),
                    T::zero(),
                    &mut dcols,
                    (plane, 1),
                );
                if g.is_pointwise() {
                    dx = Some(dcols);
                } else {
                    let mut buf = vec![T::zero(); g.in_sample()];
                    col2im(&dcols, g, &mut buf);
                    dx = Some(buf);
                }
            }
            (dx, dw)
        })
        .collect();

    let mut input = want_x.then(|| Vec::with_capacity(g.batch * g.in_sample()));
    let mut weight_grad = want_w.then(|| vec![T::zero(); g.out_channels * kk]);
    for (dx, dw) in partials {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dw)) = (weight_grad.as_mut(), dw) {
            acc.iter_mut().zip(&dw).for_each(|(a, d)| *a += *d);
        }
    }
    let bias = want_b.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for n in 0..g.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = (n * g.out_channels + o) * plane;
                *acc += grad_out[start..start + plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// 2×2 max pooling over `planes` independent `h×w` planes. Returns the pooled
/// values and, per output, the flat index of the selected input (first
/// maximum in row-major window order).
pub(crate) fn maxpool2_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: T,
    pub w_hi: T,
}

/// Half-pixel (align-corners-false) interpolation taps from `in_len` samples
/// to `out_len` samples.
pub(crate) fn bilinear_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: T::from_f64_lossy(1.0 - frac),
                w_hi: T::from_f64_lossy(frac),
            }
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let rows = bilinear_taps::<T>(h, oh);
    let cols = bilinear_taps::<T>(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for r in &rows {
            let top = &src[r.lo * w..(r.lo + 1) * w];
            let bot = &src[r.hi * w..(r.hi + 1) * w];
            for c in &cols {
                let t = top[c.lo] * c.w_lo + top[c.hi] * c.w_hi;
                let b = bot[c.lo] * c.w_lo + bot[c.hi] * c.w_hi;
                out.push(t * r.w_lo + b * r.w_hi);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let rows = bilinear_taps::<T>(h, oh);
    let cols = bilinear_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let gy = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, r) in rows.iter().enumerate() {
            for (ox, c) in cols.iter().enumerate() {
                let g = gy[oy * ow + ox];
                dst[r.lo * w + c.lo] += g * r.w_lo * c.w_lo;
                dst[r.lo * w + c.hi] += g * r.w_lo * c.w_hi;
                dst[r.hi * w + c.lo] += g * r.w_hi * c.w_lo;
                dst[r.hi * w + c.hi] += g * r.w_hi * c.w_hi;
            }
        }
    }
    dx
}

/// Softmax along an axis described as `outer × len × inner`.
pub(crate) fn softmax_forward<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                y[at(j)] /= total;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    grad_out: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * grad_out[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (grad_out[at(j)] - dot);
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance of an `n × c × plane` tensor,
/// accumulated in f64.
pub(crate) fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = (n * plane) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let lanes = || (0..n).flat_map(move |b| x[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter());
        let m = lanes().map(|v| v.as_f64()).sum::<f64>() / count;
        let v = lanes().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / count;
        mean[ch] = T::from_f64_lossy(m);
        var[ch] = T::from_f64_lossy(v);
    }
    (mean, var)
}
