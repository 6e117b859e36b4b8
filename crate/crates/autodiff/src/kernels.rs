//! im2col/GEMM convolution kernels over batches of NCHW images.

use crate::par;
use crate::Real;

/// Output columns processed per im2col tile; keeps the column buffer
/// cache-resident for wide feature maps.
const TILE_COLS: usize = 512;

/// Stride, zero padding and dilation shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeom { stride, pad, dilation }
    }

    /// Spatial span covered by one kernel: `(k - 1) * dilation + 1`.
    pub fn span(&self, k: usize) -> usize {
        (k - 1) * self.dilation + 1
    }

    pub fn out_size(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        let span = self.span(k);
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    pub fn transpose_out_size(&self, input: usize, k: usize) -> Option<usize> {
        if input == 0 || self.stride == 0 {
            return None;
        }
        let full = (input - 1) * self.stride + self.span(k);
        full.checked_sub(2 * self.pad).filter(|&v| v > 0)
    }
}

/// Geometry of one convolution `x[cin,h,w] -> y[cout,hout,wout]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvPlan {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub hout: usize,
    pub wout: usize,
    pub geom: ConvGeom,
}

impl ConvPlan {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.hout * self.wout
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.pad == 0
    }

    fn rows_per_tile(&self) -> usize {
        (TILE_COLS / self.wout.max(1)).clamp(1, self.hout.max(1))
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.rows_per_tile();
        let hout = self.hout;
        (0..hout).step_by(step).map(move |r| (r, (r + step).min(hout)))
    }
}

fn im2col<T: Real>(p: &ConvPlan, x: &[T], oy0: usize, oy1: usize, cols: &mut [T]) {
    let ncols = (oy1 - oy0) * p.wout;
    let (s, pad, d) = (p.geom.stride, p.geom.pad as isize, p.geom.dilation);
    let (h, w, wout) = (p.h as isize, p.w, p.wout);
    for ci in 0..p.cin {
        let xc = &x[ci * p.h * w..(ci + 1) * p.h * w];
        for ky in 0..p.kh {
            for kx in 0..p.kw {
                let row = (ci * p.kh + ky) * p.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let off = (kx * d) as isize - pad;
                for (t, oy) in (oy0..oy1).enumerate() {
                    let drow = &mut dst[t * wout..(t + 1) * wout];
                    let iy = (oy * s + ky * d) as isize - pad;
                    if iy < 0 || iy >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(off, s, w, wout);
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if hi > lo {
                        let a = (lo as isize * s as isize + off) as usize;
                        if s == 1 {
                            drow[lo..hi].copy_from_slice(&xrow[a..a + (hi - lo)]);
                        } else {
                            drow[lo..hi].iter_mut().zip(xrow[a..].iter().step_by(s)).for_each(|(d, &v)| *d = v);
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(p: &ConvPlan, cols: &[T], oy0: usize, oy1: usize, dx: &mut [T]) {
    let ncols = (oy1 - oy0) * p.wout;
    let (s, pad, d) = (p.geom.stride, p.geom.pad as isize, p.geom.dilation);
    let (h, w, wout) = (p.h as isize, p.w, p.wout);
    for ci in 0..p.cin {
        let xc = &mut dx[ci * p.h * w..(ci + 1) * p.h * w];
        for ky in 0..p.kh {
            for kx in 0..p.kw {
                let row = (ci * p.kh + ky) * p.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let off = (kx * d) as isize - pad;
                for (t, oy) in (oy0..oy1).enumerate() {
                    let iy = (oy * s + ky * d) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let srow = &src[t * wout..(t + 1) * wout];
                    let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(off, s, w, wout);
                    if hi > lo {
                        let a = (lo as isize * s as isize + off) as usize;
                        xrow[a..].iter_mut().step_by(s).zip(&srow[lo..hi]).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox * s + off` lies inside `0..w`.
fn valid_cols(off: isize, s: usize, w: usize, wout: usize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off < 0 { (-off + s - 1) / s } else { 0 };
    let hi = (w as isize - off + s - 1).div_euclid(s).max(0);
    let lo = (lo as usize).min(wout);
    (lo, (hi as usize).clamp(lo, wout))
}

/// `out[n] = w ⊛ x[n]` (no bias). `out` is overwritten.
pub(crate) fn conv_forward<T: Real>(p: &ConvPlan, x: &[T], w: &[T], out: &mut [T]) {
    let (k, hw_in, hw_out) = (p.k(), p.h * p.w, p.hout * p.wout);
    par::map_chunks_mut(out, p.out_len(), |i, o| {
        let xi = &x[i * p.in_len()..(i + 1) * p.in_len()];
        if p.pointwise() {
            T::gemm(p.cout, p.cin, hw_in, T::one(), w, p.cin, 1, xi, hw_in, 1, T::zero(), o, hw_out, 1);
            return;
        }
        let mut cols = vec![T::zero(); k * p.rows_per_tile() * p.wout];
        for (oy0, oy1) in p.tiles() {
            let ncols = (oy1 - oy0) * p.wout;
            im2col(p, xi, oy0, oy1, &mut cols);
            T::gemm(
                p.cout,
                k,
                ncols,
                T::one(),
                w,
                k,
                1,
                &cols,
                ncols,
                1,
                T::zero(),
                &mut o[oy0 * p.wout..],
                hw_out,
                1,
            );
        }
    });
}

/// `dx[n] += wᵀ ⊛ g[n]`, the gradient of [`conv_forward`] w.r.t. its input.
pub(crate) fn conv_backward_data<T: Real>(p: &ConvPlan, g: &[T], w: &[T], dx: &mut [T]) {
    let (k, hw_in, hw_out) = (p.k(), p.h * p.w, p.hout * p.wout);
    par::map_chunks_mut(dx, p.in_len(), |i, dxi| {
        let gi = &g[i * p.out_len()..(i + 1) * p.out_len()];
        if p.pointwise() {
            T::gemm(p.cin, p.cout, hw_in, T::one(), w, 1, p.cin, gi, hw_out, 1, T::one(), dxi, hw_in, 1);
            return;
        }
        let mut dcols = vec![T::zero(); k * p.rows_per_tile() * p.wout];
        for (oy0, oy1) in p.tiles() {
            let ncols = (oy1 - oy0) * p.wout;
            T::gemm(
                k,
                p.cout,
                ncols,
                T::one(),
                w,
                1,
                k,
                &gi[oy0 * p.wout..],
                hw_out,
                1,
                T::zero(),
                &mut dcols,
                ncols,
                1,
            );
            col2im(p, &dcols, oy0, oy1, dxi);
        }
    });
}

/// `Σ_n g[n] ⋆ x[n]`, the gradient of [`conv_forward`] w.r.t. its weights.
pub(crate) fn conv_backward_filter<T: Real>(p: &ConvPlan, x: &[T], g: &[T], batch: usize) -> Vec<T> {
    let (k, hw_in, hw_out) = (p.k(), p.h * p.w, p.hout * p.wout);
    let per_image = par::map_range(batch, |i| {
        let xi = &x[i * p.in_len()..(i + 1) * p.in_len()];
        let gi = &g[i * p.out_len()..(i + 1) * p.out_len()];
        let mut dw = vec![T::zero(); p.cout * k];
        if p.pointwise() {
            T::gemm(p.cout, hw_in, p.cin, T::one(), gi, hw_out, 1, xi, 1, hw_in, T::zero(), &mut dw, k, 1);
            return dw;
        }
        let mut cols = vec![T::zero(); k * p.rows_per_tile() * p.wout];
        for (oy0, oy1) in p.tiles() {
            let ncols = (oy1 - oy0) * p.wout;
            im2col(p, xi, oy0, oy1, &mut cols);
            T::gemm(
                p.cout,
                ncols,
                k,
                T::one(),
                &gi[oy0 * p.wout..],
                hw_out,
                1,
                &cols,
                1,
                ncols,
                T::one(),
                &mut dw,
                k,
                1,
            );
        }
        dw
    });
    sum_in_order(per_image, p.cout * k)
}

pub(crate) fn sum_in_order<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, b) in acc.iter_mut().zip(part) {
            *a += b;
        }
    }
    acc
}

/// Adds `bias[c]` to every element of channel `c`.
pub(crate) fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (j, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[j % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Per-channel sum of `g` (shape `[n, c, plane]`).
pub(crate) fn channel_sums<T: Real>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); channels];
    for (j, chunk) in g.chunks(plane).enumerate() {
        acc[j % channels] += chunk.iter().copied().sum::<T>();
    }
    acc
}
