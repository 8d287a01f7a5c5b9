//! im2col + GEMM convolution kernels shared by `conv2d` and `conv2d_transpose`.
//!
//! All three kernels operate on the geometry of an ordinary (forward) convolution
//! mapping a "wide" input of `in_c` channels to a "narrow" output of `out_c`
//! channels. The transposed convolution reuses them with roles swapped.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::num_like::Scalar;
use crate::tensor::Shape;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that output = ceil(input / stride); odd totals put the
    /// extra pixel on the bottom/right.
    Same,
    Valid,
}

/// Stride and padding of a convolution. The kernel extents come from the
/// weight tensor, laid out `(out_ch, in_ch, kh, kw)` for `conv2d` and
/// `(in_ch, out_ch, kh, kw)` for `conv2d_transpose`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvSpec {
    pub const fn same() -> Self {
        ConvSpec {
            stride: (1, 1),
            padding: Padding::Same,
        }
    }

    pub const fn valid() -> Self {
        ConvSpec {
            stride: (1, 1),
            padding: Padding::Valid,
        }
    }

    pub const fn strided(stride: usize, padding: Padding) -> Self {
        ConvSpec {
            stride: (stride, stride),
            padding,
        }
    }

    fn check(&self, kh: usize, kw: usize) -> Result<()> {
        if kh == 0 || kw == 0 {
            return Err(Error::Shape("kernel extents must be at least 1".into()));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Shape("stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fully resolved geometry of a forward convolution `wide -> narrow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn same_pad(input: usize, out: usize, k: usize, s: usize) -> usize {
    ((out - 1) * s + k).saturating_sub(input)
}

impl ConvGeom {
    /// Geometry of `conv2d` on an input of shape `x` with weights `w = (out, in, kh, kw)`.
    pub fn forward(x: Shape, w: Shape, spec: ConvSpec) -> Result<Self> {
        spec.check(w.h, w.w)?;
        if x.c != w.c {
            return Err(Error::Shape(format!(
                "conv2d input has {} channels but kernel {w} expects {}",
                x.c, w.c
            )));
        }
        let (sh, sw) = spec.stride;
        let (out_h, out_w, pad_top, pad_left) = match spec.padding {
            Padding::Valid => {
                if w.h > x.h || w.w > x.w {
                    return Err(Error::Shape(format!(
                        "kernel {}x{} larger than input {}x{}",
                        w.h, w.w, x.h, x.w
                    )));
                }
                ((x.h - w.h) / sh + 1, (x.w - w.w) / sw + 1, 0, 0)
            }
            Padding::Same => {
                let oh = x.h.div_ceil(sh);
                let ow = x.w.div_ceil(sw);
                let ph = same_pad(x.h, oh, w.h, sh);
                let pw = same_pad(x.w, ow, w.w, sw);
                if w.h > x.h + ph || w.w > x.w + pw {
                    return Err(Error::Shape("kernel larger than padded input".into()));
                }
                (oh, ow, ph / 2, pw / 2)
            }
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("convolution output would be empty".into()));
        }
        Ok(ConvGeom {
            in_c: x.c,
            in_h: x.h,
            in_w: x.w,
            out_c: w.n,
            out_h,
            out_w,
            kh: w.h,
            kw: w.w,
            sh,
            sw,
            pad_top,
            pad_left,
        })
    }

    /// Geometry of the forward convolution whose adjoint is `conv2d_transpose`
    /// applied to `x` with weights `w = (x.c, out, kh, kw)`. The returned
    /// geometry's "wide" side is the transposed convolution's output.
    pub fn transpose(x: Shape, w: Shape, spec: ConvSpec) -> Result<Self> {
        spec.check(w.h, w.w)?;
        if x.c != w.n {
            return Err(Error::Shape(format!(
                "conv2d_transpose input has {} channels but kernel {w} expects {}",
                x.c, w.n
            )));
        }
        let (sh, sw) = spec.stride;
        let (big_h, big_w, pad_top, pad_left) = match spec.padding {
            Padding::Valid => ((x.h - 1) * sh + w.h, (x.w - 1) * sw + w.w, 0, 0),
            Padding::Same => {
                let bh = x.h * sh;
                let bw = x.w * sw;
                let ph = same_pad(bh, x.h, w.h, sh);
                let pw = same_pad(bw, x.w, w.w, sw);
                (bh, bw, ph / 2, pw / 2)
            }
        };
        Ok(ConvGeom {
            in_c: w.c,
            in_h: big_h,
            in_w: big_w,
            out_c: x.c,
            out_h: x.h,
            out_w: x.w,
            kh: w.h,
            kw: w.w,
            sh,
            sw,
            pad_top,
            pad_left,
        })
    }

    fn cols_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_plane()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.sh == 1
            && self.sw == 1
            && self.pad_top == 0
            && self.pad_left == 0
            && self.in_h == self.out_h
            && self.in_w == self.out_w
    }

    /// Visits every run of taps that lies inside the unpadded input as
    /// `(column index, input index, length)`; consecutive taps of a run are
    /// adjacent in the column buffer and `sw` apart in the input.
    #[inline]
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plane = self.out_plane();
        for kj in 0..self.kw {
            let (lo, hi) = self.ox_range(kj);
            if lo >= hi {
                continue;
            }
            let ix0 = lo * self.sw + kj - self.pad_left;
            for c in 0..self.in_c {
                for ki in 0..self.kh {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.sh + ki) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base_in = (c * self.in_h + iy as usize) * self.in_w;
                        f(row * plane + oy * self.out_w + lo, base_in + ix0, hi - lo);
                    }
                }
            }
        }
    }

    /// Output columns `lo..hi` whose tap `kj` lands inside the input, i.e.
    /// `0 <= ox*sw + kj - pad_left < in_w`.
    #[inline]
    fn ox_range(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(kj).div_ceil(self.sw);
        let hi = if self.in_w + self.pad_left > kj {
            ((self.in_w + self.pad_left - kj - 1) / self.sw + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (ow, sw) = (self.out_w, self.sw);
        let mut rows = cols.chunks_exact_mut(ow);
        for c in 0..self.in_c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.ox_range(kj);
                    for oy in 0..self.out_h {
                        let dst = rows.next().expect("column buffer sized by geometry");
                        let iy = (oy * self.sh + ki) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.in_h as isize || lo == hi {
                            dst.fill(T::ZERO);
                            continue;
                        }
                        let xi = (c * self.in_h + iy as usize) * self.in_w + lo * sw + kj
                            - self.pad_left;
                        dst[..lo].fill(T::ZERO);
                        if sw == 1 {
                            dst[lo..hi].copy_from_slice(&x[xi..xi + hi - lo]);
                        } else {
                            for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = x[xi + k * sw];
                            }
                        }
                        dst[hi..].fill(T::ZERO);
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let sw = self.sw;
        self.for_each_span(|ci, xi, n| {
            if sw == 1 {
                for (d, &c) in x[xi..xi + n].iter_mut().zip(&cols[ci..ci + n]) {
                    *d += c;
                }
            } else {
                for (k, &c) in cols[ci..ci + n].iter().enumerate() {
                    x[xi + k * sw] += c;
                }
            }
        });
    }
}

/// Multiply-adds below which a batch is processed on the calling thread.
const PAR_MIN_WORK: usize = 1 << 18;

fn parallel(g: &ConvGeom, batch: usize) -> bool {
    batch > 1
        && rayon::current_num_threads() > 1
        && batch * g.out_len() * g.cols_rows() >= PAR_MIN_WORK
}

/// `out[b] = W * im2col(x[b])`, weights `(out_c, in_c*kh*kw)`.
pub fn forward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], w: &[T]) -> Vec<T> {
    let (k, plane) = (g.cols_rows(), g.out_plane());
    let mut out = vec![T::ZERO; batch * g.out_len()];
    let init = || vec![T::ZERO; if g.is_pointwise() { 0 } else { k * plane }];
    let body = |cols: &mut Vec<T>, (o, xb): (&mut [T], &[T])| {
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, cols);
            cols
        };
        // SAFETY: slices are sized m*k, k*n and m*n with the given strides.
        unsafe {
            T::gemm(
                g.out_c,
                k,
                plane,
                T::ONE,
                w.as_ptr(),
                k as isize,
                1,
                src.as_ptr(),
                plane as isize,
                1,
                T::ZERO,
                o.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
    };
    if parallel(g, batch) {
        out.par_chunks_mut(g.out_len())
            .zip(x.par_chunks(g.in_len()))
            .for_each_init(init, body);
    } else {
        let mut cols = init();
        out.chunks_mut(g.out_len())
            .zip(x.chunks(g.in_len()))
            .for_each(|p| body(&mut cols, p));
    }
    out
}

/// Adjoint of [`forward`] with respect to the input: `dx[b] = col2im(W^T dy[b])`.
pub fn backward_data<T: Scalar>(g: &ConvGeom, batch: usize, dy: &[T], w: &[T]) -> Vec<T> {
    let (k, plane) = (g.cols_rows(), g.out_plane());
    let mut dx = vec![T::ZERO; batch * g.in_len()];
    let init = || vec![T::ZERO; k * plane];
    let body = |cols: &mut Vec<T>, (dxb, dyb): (&mut [T], &[T])| {
        // SAFETY: W^T is (k x out_c) read with swapped strides.
        unsafe {
            T::gemm(
                k,
                g.out_c,
                plane,
                T::ONE,
                w.as_ptr(),
                1,
                k as isize,
                dyb.as_ptr(),
                plane as isize,
                1,
                T::ZERO,
                cols.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
        if g.is_pointwise() {
            dxb.copy_from_slice(cols);
        } else {
            g.col2im(cols, dxb);
        }
    };
    if parallel(g, batch) {
        dx.par_chunks_mut(g.in_len())
            .zip(dy.par_chunks(g.out_len()))
            .for_each_init(init, body);
    } else {
        let mut cols = init();
        dx.chunks_mut(g.in_len())
            .zip(dy.chunks(g.out_len()))
            .for_each(|p| body(&mut cols, p));
    }
    dx
}

/// Gradient with respect to the weights: `dW = sum_b dy[b] * im2col(x[b])^T`.
///
/// Per-sample partial products are reduced in batch order so the result does
/// not depend on scheduling.
pub fn backward_weight<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], dy: &[T]) -> Vec<T> {
    let (k, plane) = (g.cols_rows(), g.out_plane());
    let partial = |(xb, dyb): (&[T], &[T])| {
        let mut cols = Vec::new();
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            cols.resize(k * plane, T::ZERO);
            g.im2col(xb, &mut cols);
            &cols
        };
        let mut dw = vec![T::ZERO; g.out_c * k];
        // SAFETY: dy is (out_c x plane), cols^T is (plane x k).
        unsafe {
            T::gemm(
                g.out_c,
                plane,
                k,
                T::ONE,
                dyb.as_ptr(),
                plane as isize,
                1,
                src.as_ptr(),
                1,
                plane as isize,
                T::ZERO,
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        dw
    };
    let partials: Vec<Vec<T>> = if parallel(g, batch) {
        x.par_chunks(g.in_len())
            .zip(dy.par_chunks(g.out_len()))
            .take(batch)
            .map(partial)
            .collect()
    } else {
        x.chunks(g.in_len())
            .zip(dy.chunks(g.out_len()))
            .take(batch)
            .map(partial)
            .collect()
    };
    let mut total = vec![T::ZERO; g.out_c * k];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle for the GEMM path.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for o in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..g.in_c {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.sh + ki) as isize - g.pad_top as isize;
                                let ix = (ox * g.sw + kj) as isize - g.pad_left as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.in_h as isize
                                    || ix >= g.in_w as isize
                                {
                                    continue;
                                }
                                acc += x[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                                    * w[((o * g.in_c + c) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[(o * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        for (spec, h, w, k) in [
            (ConvSpec::same(), 5, 6, 3),
            (ConvSpec::valid(), 5, 6, 3),
            (ConvSpec::strided(2, Padding::Same), 7, 5, 3),
            (ConvSpec::strided(2, Padding::Valid), 8, 8, 2),
            (ConvSpec::same(), 4, 4, 2),
            (ConvSpec::same(), 4, 4, 1),
        ] {
            let xs = Shape::new(1, 3, h, w);
            let ws = Shape::new(2, 3, k, k);
            let x: Vec<f64> = (0..xs.numel())
                .map(|i| ((i * 7919) % 13) as f64 - 6.0)
                .collect();
            let wt: Vec<f64> = (0..ws.numel())
                .map(|i| ((i * 104729) % 11) as f64 - 5.0)
                .collect();
            let g = ConvGeom::forward(xs, ws, spec).unwrap();
            assert_eq!(
                forward(&g, 1, &x, &wt),
                naive(&g, &x, &wt),
                "{spec:?} {h}x{w} k{k}"
            );
        }
    }

    #[test]
    fn same_padding_puts_extra_on_bottom_right() {
        let g = ConvGeom::forward(
            Shape::new(1, 1, 4, 4),
            Shape::new(1, 1, 2, 2),
            ConvSpec::same(),
        )
        .unwrap();
        assert_eq!((g.out_h, g.pad_top, g.pad_left), (4, 0, 0));
        let g = ConvGeom::forward(
            Shape::new(1, 1, 4, 4),
            Shape::new(1, 1, 4, 4),
            ConvSpec::same(),
        )
        .unwrap();
        assert_eq!((g.pad_top, g.pad_left), (1, 1));
    }
}
