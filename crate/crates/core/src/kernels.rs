//! Raw forward/backward kernels over NCHW buffers.
//!
//! These are the building blocks of the graph ops in [`crate::graph`]; they
//! perform no shape validation beyond debug assertions.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, pad_mode: PadMode) -> Self {
        ConvGeom {
            stride,
            pad,
            pad_mode,
        }
    }

    /// Output extent, or `None` when the kernel does not fit.
    pub fn out_len(&self, n: usize, k: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < k || n == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }
}

/// Maps a padded coordinate to a source coordinate, `None` for zero padding.
#[inline]
fn source_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n_i = n as isize;
    if (0..n_i).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let mut j = i;
            if j < 0 {
                j = -j;
            }
            if j >= n_i {
                j = 2 * (n_i - 1) - j;
            }
            Some(j.clamp(0, n_i - 1) as usize)
        }
    }
}

/// Upper bound on im2col buffer elements; larger convolutions are row-chunked.
const COL_BUDGET: usize = 1 << 22;

struct ConvShape {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
}

impl ConvShape {
    fn kdim(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.kdim() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Fills `cols` (`kdim × (rows·wo)`) for output rows `[r0, r0 + rows)`.
    fn im2col<T: Real>(&self, x: &[T], r0: usize, rows: usize, cols: &mut [T]) {
        let n = rows * self.wo;
        let s = self.geom.stride as isize;
        let p = self.geom.pad as isize;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..rows {
                        let iy = (r0 + oy) as isize * s + ky as isize - p;
                        let sy = source_index(iy, self.h, self.geom.pad_mode);
                        for ox in 0..self.wo {
                            let ix = ox as isize * s + kx as isize - p;
                            dst[oy * self.wo + ox] = match (sy, source_index(ix, self.w, self.geom.pad_mode)) {
                                (Some(sy), Some(sx)) => plane[sy * self.w + sx],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into the input gradient.
    fn col2im<T: Real>(&self, cols: &[T], r0: usize, rows: usize, dx: &mut [T]) {
        let n = rows * self.wo;
        let s = self.geom.stride as isize;
        let p = self.geom.pad as isize;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..rows {
                        let iy = (r0 + oy) as isize * s + ky as isize - p;
                        let Some(sy) = source_index(iy, self.h, self.geom.pad_mode) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if let Some(sx) = source_index(ix, self.w, self.geom.pad_mode) {
                                plane[sy * self.w + sx] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_shape<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, geom: ConvGeom) -> ConvShape {
    let (_, cin, h, w) = x.dims4();
    let (_, wcin, kh, kw) = weight.dims4();
    assert_eq!(cin, wcin, "conv input channels {cin} vs weight {wcin}");
    let ho = geom.out_len(h, kh).expect("conv kernel larger than padded input");
    let wo = geom.out_len(w, kw).expect("conv kernel larger than padded input");
    ConvShape {
        cin,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        geom,
    }
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Tensor<T> {
    let cs = conv_shape(x, weight, geom);
    let (b, _, _, _) = x.dims4();
    let cout = weight.shape()[0];
    let kdim = cs.kdim();
    let plane = cs.ho * cs.wo;
    let mut out = Tensor::zeros(&[b, cout, cs.ho, cs.wo]);
    let in_per = cs.cin * cs.h * cs.w;
    let chunk = cs.rows_per_chunk();
    let mut cols = if cs.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * chunk * cs.wo]
    };
    for bi in 0..b {
        let xb = &x.data()[bi * in_per..(bi + 1) * in_per];
        let ob = &mut out.data_mut()[bi * cout * plane..(bi + 1) * cout * plane];
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                ob[co * plane..(co + 1) * plane].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if cs.is_pointwise() {
            T::gemm(cout, kdim, plane, T::one(), weight.data(), (kdim as isize, 1), xb, (plane as isize, 1), beta, ob, (plane as isize, 1));
            continue;
        }
        let mut r0 = 0;
        while r0 < cs.ho {
            let rows = chunk.min(cs.ho - r0);
            let n = rows * cs.wo;
            cs.im2col(xb, r0, rows, &mut cols[..kdim * n]);
            T::gemm(
                cout,
                kdim,
                n,
                T::one(),
                weight.data(),
                (kdim as isize, 1),
                &cols[..kdim * n],
                (n as isize, 1),
                beta,
                &mut ob[r0 * cs.wo..],
                (plane as isize, 1),
            );
            r0 += rows;
        }
    }
    out
}

/// Gradients of [`conv2d`]; each output is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let cs = conv_shape(x, weight, geom);
    let (b, _, _, _) = x.dims4();
    let cout = weight.shape()[0];
    let kdim = cs.kdim();
    let plane = cs.ho * cs.wo;
    let in_per = cs.cin * cs.h * cs.w;
    let mut dx = want.0.then(|| Tensor::zeros(x.shape()));
    let mut dw = want.1.then(|| Tensor::zeros(weight.shape()));
    let mut db = want.2.then(|| Tensor::zeros(&[cout]));
    let chunk = cs.rows_per_chunk();
    let mut cols = vec![T::zero(); kdim * chunk * cs.wo];

    for bi in 0..b {
        let gb = &grad_out.data()[bi * cout * plane..(bi + 1) * cout * plane];
        if let Some(db) = db.as_mut() {
            for (co, slot) in db.data_mut().iter_mut().enumerate() {
                *slot += gb[co * plane..(co + 1) * plane].iter().copied().sum();
            }
        }
        let xb = &x.data()[bi * in_per..(bi + 1) * in_per];
        if cs.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                T::gemm(cout, plane, kdim, T::one(), gb, (plane as isize, 1), xb, (1, plane as isize), T::one(), dw.data_mut(), (kdim as isize, 1));
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.data_mut()[bi * in_per..(bi + 1) * in_per];
                T::gemm(kdim, cout, plane, T::one(), weight.data(), (1, kdim as isize), gb, (plane as isize, 1), T::zero(), dxb, (plane as isize, 1));
            }
            continue;
        }
        let mut r0 = 0;
        while r0 < cs.ho {
            let rows = chunk.min(cs.ho - r0);
            let n = rows * cs.wo;
            let g_chunk = &gb[r0 * cs.wo..];
            if let Some(dw) = dw.as_mut() {
                cs.im2col(xb, r0, rows, &mut cols[..kdim * n]);
                T::gemm(
                    cout,
                    n,
                    kdim,
                    T::one(),
                    g_chunk,
                    (plane as isize, 1),
                    &cols[..kdim * n],
                    (1, n as isize),
                    T::one(),
                    dw.data_mut(),
                    (kdim as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    kdim,
                    cout,
                    n,
                    T::one(),
                    weight.data(),
                    (1, kdim as isize),
                    g_chunk,
                    (plane as isize, 1),
                    T::zero(),
                    &mut cols[..kdim * n],
                    (n as isize, 1),
                );
                let dxb = &mut dx.data_mut()[bi * in_per..(bi + 1) * in_per];
                cs.col2im(&cols[..kdim * n], r0, rows, dxb);
            }
            r0 += rows;
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// 2×2, stride-2 max pooling. Returns the output and flat argmax indices.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (b, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut arg = vec![0usize; b * c * ho * wo];
    let xd = x.data();
    for p in 0..b * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out.data_mut()[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// 3×3, stride-2, pad-1 average pooling; padded cells are excluded from the count.
pub fn avg_pool3<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let xd = x.data();
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (ys, xs) = (pool_window(oy, h), pool_window(ox, w));
                let mut acc = T::zero();
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        acc += xd[(p * h + iy) * w + ix];
                    }
                }
                let count = T::from_f64((ys.len() * xs.len()) as f64);
                out.data_mut()[(p * ho + oy) * wo + ox] = acc / count;
            }
        }
    }
    out
}

fn pool_window(o: usize, n: usize) -> core::ops::Range<usize> {
    let start = (2 * o).saturating_sub(1);
    let end = (2 * o + 2).min(n);
    start..end
}

pub fn avg_pool3_backward<T: Real>(x_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, ho, wo) = grad_out.dims4();
    let mut dx = Tensor::zeros(x_shape);
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (ys, xs) = (pool_window(oy, h), pool_window(ox, w));
                let g = grad_out.data()[(p * ho + oy) * wo + ox]
                    / T::from_f64((ys.len() * xs.len()) as f64);
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        dx.data_mut()[(p * h + iy) * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour source index for output coordinate `o` when resizing `n_in → n_out`.
#[inline]
pub fn nearest_src(o: usize, n_in: usize, n_out: usize) -> usize {
    (o * n_in / n_out).min(n_in - 1)
}

pub fn resize_nearest<T: Real>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    for p in 0..b * c {
        for oy in 0..ho {
            let sy = nearest_src(oy, h, ho);
            for ox in 0..wo {
                let sx = nearest_src(ox, w, wo);
                out.data_mut()[(p * ho + oy) * wo + ox] = x.data()[(p * h + sy) * w + sx];
            }
        }
    }
    out
}

pub fn resize_nearest_backward<T: Real>(x_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (b, c, ho, wo) = grad_out.dims4();
    let mut dx = Tensor::zeros(x_shape);
    for p in 0..b * c {
        for oy in 0..ho {
            let sy = nearest_src(oy, h, ho);
            for ox in 0..wo {
                let sx = nearest_src(ox, w, wo);
                dx.data_mut()[(p * h + sy) * w + sx] += grad_out.data()[(p * ho + oy) * wo + ox];
            }
        }
    }
    dx
}

/// Per-(batch, channel) mean–variance normalization over the spatial axes.
///
/// Returns the normalized tensor and the per-plane `1/sqrt(var + eps)`.
pub fn channel_norm<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let (b, c, h, w) = x.dims4();
    let n = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(b * c);
    let nf = T::from_f64(n as f64);
    for p in 0..b * c {
        let src = &x.data()[p * n..(p + 1) * n];
        let mean = src.iter().copied().sum::<T>() / nf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in out.data_mut()[p * n..(p + 1) * n].iter_mut().zip(src) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn channel_norm_backward<T: Real>(y: &Tensor<T>, inv_std: &[T], grad_out: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = y.dims4();
    let n = h * w;
    let nf = T::from_f64(n as f64);
    let mut dx = Tensor::zeros(y.shape());
    for (p, &inv) in inv_std.iter().enumerate() {
        let ys = &y.data()[p * n..(p + 1) * n];
        let gs = &grad_out.data()[p * n..(p + 1) * n];
        let g_mean = gs.iter().copied().sum::<T>() / nf;
        let gy_mean = gs.iter().zip(ys).map(|(&g, &v)| g * v).sum::<T>() / nf;
        for ((d, &g), &v) in dx.data_mut()[p * n..(p + 1) * n].iter_mut().zip(gs).zip(ys) {
            *d = inv * (g - g_mean - v * gy_mean);
        }
    }
    dx
}

/// Row-wise softmax over the last axis of a `rows × cols` buffer.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn conv_matches_direct_loops_for_every_geometry() {
        for (k, stride, pad, mode) in [
            (3, 1, 1, PadMode::Zero),
            (3, 1, 1, PadMode::Reflect),
            (4, 2, 1, PadMode::Zero),
            (1, 1, 0, PadMode::Zero),
        ] {
            let geom = ConvGeom::new(stride, pad, mode);
            let x = pseudo(&[2, 3, 6, 8], 1);
            let w = pseudo(&[5, 3, k, k], 2);
            let b = pseudo(&[5], 3);
            let fast = conv2d(&x, &w, Some(&b), geom);
            let slow = oracle::conv2d_direct(&x, &w, Some(&b), geom);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} s={stride} {mode:?}");
        }
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(source_index(-1, 4, PadMode::Reflect), Some(1));
        assert_eq!(source_index(4, 4, PadMode::Reflect), Some(2));
        assert_eq!(source_index(-1, 1, PadMode::Reflect), Some(0));
        assert_eq!(source_index(-1, 4, PadMode::Zero), None);
    }

    #[test]
    fn avg_pool_preserves_constants_everywhere() {
        let x = Tensor::<f64>::full(&[1, 1, 8, 8], 0.25);
        let y = avg_pool3(&x);
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn channel_norm_two_positions() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (y, _) = channel_norm(&x, 0.0);
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let out = softmax_rows(&[1000.0f64, 0.0, -1000.0, 1.0, 2.0, 3.0], 3);
        for row in out.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
