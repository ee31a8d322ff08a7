//! im2col convolution kernels shared by the forward and backward passes.

use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return shape_err("conv2d", "kernel size and stride must be positive");
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return shape_err(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w}+{pad}"),
            );
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

/// Stride-1 convolutions on wide planes or with few channels skip im2col;
/// there the copy costs more than the multiply.
const DIRECT_MIN_WIDTH: usize = 48;
const DIRECT_MAX_CHANNELS: usize = 64;

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let n_out = g.spatial_out();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - pad;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let n_out = g.spatial_out();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output range along one axis for kernel offset `kk`: positions whose
/// source index `o + kk - pad` lands inside `0..len`.
fn valid_range(kk: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (len + pad).saturating_sub(kk).min(out_len);
    (lo, hi.max(lo))
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Direct stride-1 convolution of one item: `y[co] += Σ w · shifted x`.
fn direct_forward<T: Float>(g: &ConvGeom, co: usize, x: &[T], w: &[T], y: &mut [T]) {
    let (k, hw, ohw) = (g.k, g.h * g.w, g.ho * g.wo);
    for o in 0..co {
        let yo = &mut y[o * ohw..(o + 1) * ohw];
        for c in 0..g.c {
            let xp = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, g.pad, g.h, g.ho);
                if y0 == y1 {
                    continue;
                }
                for kx in 0..k {
                    let wv = w[((o * g.c + c) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(kx, g.pad, g.w, g.wo);
                    if x0 == x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy + ky - g.pad;
                        let src = &xp[iy * g.w + x0 + kx - g.pad..iy * g.w + x1 + kx - g.pad];
                        let dst = &mut yo[oy * g.wo + x0..oy * g.wo + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

fn direct_backward<T: Float>(
    g: &ConvGeom,
    co: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (k, hw, ohw) = (g.k, g.h * g.w, g.ho * g.wo);
    if let Some(dw) = dw {
        for o in 0..co {
            let go = &gy[o * ohw..(o + 1) * ohw];
            for c in 0..g.c {
                let xp = &x[c * hw..(c + 1) * hw];
                for ky in 0..k {
                    let (y0, y1) = valid_range(ky, g.pad, g.h, g.ho);
                    if y0 == y1 {
                        continue;
                    }
                    for kx in 0..k {
                        let (x0, x1) = valid_range(kx, g.pad, g.w, g.wo);
                        if x0 == x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy + ky - g.pad;
                            acc += dot(
                                &go[oy * g.wo + x0..oy * g.wo + x1],
                                &xp[iy * g.w + x0 + kx - g.pad..iy * g.w + x1 + kx - g.pad],
                            );
                        }
                        dw[((o * g.c + c) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        for o in 0..co {
            let go = &gy[o * ohw..(o + 1) * ohw];
            for c in 0..g.c {
                let dp = &mut dx[c * hw..(c + 1) * hw];
                for ky in 0..k {
                    let (y0, y1) = valid_range(ky, g.pad, g.h, g.ho);
                    if y0 == y1 {
                        continue;
                    }
                    for kx in 0..k {
                        let wv = w[((o * g.c + c) * k + ky) * k + kx];
                        let (x0, x1) = valid_range(kx, g.pad, g.w, g.wo);
                        if x0 == x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy + ky - g.pad;
                            let dst =
                                &mut dp[iy * g.w + x0 + kx - g.pad..iy * g.w + x1 + kx - g.pad];
                            for (d, &s) in dst.iter_mut().zip(&go[oy * g.wo + x0..oy * g.wo + x1]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Validated layout of one convolution call.
pub(crate) struct ConvCall {
    pub n: usize,
    pub co: usize,
    pub per_sample: bool,
    pub geom: ConvGeom,
}

impl ConvCall {
    pub fn new<T: Float>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, wd) = x.dims4()?;
        let (per_sample, co, ci, kh, kw) = match w.shape()[..] {
            [co, ci, kh, kw] => (false, co, ci, kh, kw),
            [wn, co, ci, kh, kw] if wn == n => (true, co, ci, kh, kw),
            _ => {
                return shape_err(
                    "conv2d",
                    format!(
                        "weights {:?} incompatible with input {:?}",
                        w.shape(),
                        x.shape()
                    ),
                )
            }
        };
        if ci != c || kh != kw {
            return shape_err(
                "conv2d",
                format!(
                    "weights {:?} incompatible with input {:?}",
                    w.shape(),
                    x.shape()
                ),
            );
        }
        let geom = ConvGeom::new(c, h, wd, kh, stride, pad)?;
        Ok(Self {
            n,
            co,
            per_sample,
            geom,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.co, self.geom.ho, self.geom.wo]
    }

    fn direct(&self) -> bool {
        let g = &self.geom;
        g.stride == 1
            && g.k > 1
            && (g.w >= DIRECT_MIN_WIDTH || self.co * g.c <= DIRECT_MAX_CHANNELS)
    }

    fn weight_len(&self) -> usize {
        self.co * self.geom.rows()
    }

    fn weight_of<'a, T>(&self, w: &'a [T], item: usize) -> &'a [T] {
        if self.per_sample {
            &w[item * self.weight_len()..(item + 1) * self.weight_len()]
        } else {
            w
        }
    }
}

pub(crate) fn forward<T: Float>(call: &ConvCall, x: &[T], w: &[T]) -> Vec<T> {
    let g = &call.geom;
    let (rows, n_out, in_len) = (g.rows(), g.spatial_out(), g.c * g.h * g.w);
    let mut out = vec![T::zero(); call.n * call.co * n_out];
    if call.direct() {
        for item in 0..call.n {
            let yi = &mut out[item * call.co * n_out..(item + 1) * call.co * n_out];
            direct_forward(
                g,
                call.co,
                &x[item * in_len..(item + 1) * in_len],
                call.weight_of(w, item),
                yi,
            );
        }
        return out;
    }
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * n_out]
    };
    for item in 0..call.n {
        let xi = &x[item * in_len..(item + 1) * in_len];
        let b: &[T] = if g.pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        let wi = call.weight_of(w, item);
        let yi = &mut out[item * call.co * n_out..(item + 1) * call.co * n_out];
        T::gemm(
            call.co,
            rows,
            n_out,
            T::one(),
            wi,
            rows as isize,
            1,
            b,
            n_out as isize,
            1,
            T::zero(),
            yi,
            n_out as isize,
            1,
        );
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub(crate) fn backward<T: Float>(
    call: &ConvCall,
    x: &[T],
    w: &[T],
    gy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let g = &call.geom;
    let (rows, n_out, in_len) = (g.rows(), g.spatial_out(), g.c * g.h * g.w);
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    if call.direct() {
        for item in 0..call.n {
            let gyi = &gy[item * call.co * n_out..(item + 1) * call.co * n_out];
            let xi = &x[item * in_len..(item + 1) * in_len];
            let dxi = dx
                .as_mut()
                .map(|d| &mut d[item * in_len..(item + 1) * in_len]);
            let wl = call.weight_len();
            let dwi = dw.as_mut().map(|d| {
                if call.per_sample {
                    &mut d[item * wl..(item + 1) * wl]
                } else {
                    &mut d[..]
                }
            });
            direct_backward(g, call.co, xi, call.weight_of(w, item), gyi, dxi, dwi);
        }
        return (dx, dw);
    }
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * n_out]
    };
    for item in 0..call.n {
        let gyi = &gy[item * call.co * n_out..(item + 1) * call.co * n_out];
        if let Some(dw) = dw.as_mut() {
            let xi = &x[item * in_len..(item + 1) * in_len];
            let b: &[T] = if g.pointwise() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            let dwi: &mut [T] = if call.per_sample {
                &mut dw[item * call.weight_len()..(item + 1) * call.weight_len()]
            } else {
                &mut dw[..]
            };
            // dW[co, rows] += gy[co, n_out] · colsᵀ[n_out, rows]
            T::gemm(
                call.co,
                n_out,
                rows,
                T::one(),
                gyi,
                n_out as isize,
                1,
                b,
                1,
                n_out as isize,
                T::one(),
                dwi,
                rows as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let wi = call.weight_of(w, item);
            let dxi = &mut dx[item * in_len..(item + 1) * in_len];
            if g.pointwise() {
                T::gemm(
                    rows,
                    call.co,
                    n_out,
                    T::one(),
                    wi,
                    1,
                    rows as isize,
                    gyi,
                    n_out as isize,
                    1,
                    T::one(),
                    dxi,
                    n_out as isize,
                    1,
                );
            } else {
                // dcols[rows, n_out] = Wᵀ[rows, co] · gy[co, n_out]
                T::gemm(
                    rows,
                    call.co,
                    n_out,
                    T::one(),
                    wi,
                    1,
                    rows as isize,
                    gyi,
                    n_out as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    n_out as isize,
                    1,
                );
                col2im(&cols, g, dxi);
            }
        }
    }
    (dx, dw)
}
