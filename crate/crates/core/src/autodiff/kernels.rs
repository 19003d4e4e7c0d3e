//! Numeric kernels behind the tape ops.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 3 || k.len() != 4 || k[1] != x[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.to_vec(),
                right: k.to_vec(),
            });
        }
        let (kh, kw) = (k[2], k[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let out = |n: usize, k: usize| -> Result<usize> {
            let span = (n + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| Error::shape("conv2d", format!("kernel {k} larger than padded input {n}")))?;
            if span % stride != 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!("({n}+2*{pad}-{k})/{stride} is not integral"),
                ));
            }
            Ok(span / stride + 1)
        };
        Ok(Self {
            c_in: x[0],
            h: x[1],
            w: x[2],
            c_out: k[0],
            kh,
            kw,
            stride,
            pad,
            oh: out(x[1], kh)?,
            ow: out(x[2], kw)?,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate feeding output position `o` at kernel offset `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(self.pad)?;
        (p < limit).then_some(p)
    }
}

/// Unfolds `x` into a `[c_in*kh*kw, oh*ow]` matrix.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let n = g.cols();
    let mut cols = vec![T::zero(); g.rows() * n];
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        cols.copy_from_slice(x);
        return cols;
    }
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ki, g.h) else { continue };
                    let src = (c * g.h + iy) * g.w;
                    let dst = row + oy * g.ow;
                    for ox in 0..g.ow {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            cols[dst + ox] = x[src + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column-matrix gradient back onto the input layout, accumulating.
pub(crate) fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ki, g.h) else { continue };
                    let dst = (c * g.h + iy) * g.w;
                    let src = row + oy * g.ow;
                    for ox in 0..g.ow {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            dx[dst + ix] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeom, cols: &[T], k: &[T], b: &[T]) -> Vec<T> {
    let (m, r, n) = (g.c_out, g.rows(), g.cols());
    let mut out = Vec::with_capacity(m * n);
    for &bias in b {
        out.extend(std::iter::repeat(bias).take(n));
    }
    T::gemm(m, r, n, k, r as isize, 1, cols, n as isize, 1, T::one(), &mut out, n as isize, 1);
    out
}

/// `Kᵀ·dOut`, the gradient w.r.t. the unfolded input.
pub(crate) fn conv_backward_cols<T: Scalar>(g: &ConvGeom, k: &[T], dout: &[T]) -> Vec<T> {
    let (m, r, n) = (g.c_out, g.rows(), g.cols());
    let mut dcols = vec![T::zero(); r * n];
    T::gemm(r, m, n, k, 1, r as isize, dout, n as isize, 1, T::zero(), &mut dcols, n as isize, 1);
    dcols
}

/// `dK += dOut·colsᵀ`.
pub(crate) fn conv_backward_kernel<T: Scalar>(g: &ConvGeom, cols: &[T], dout: &[T], dk: &mut [T]) {
    let (m, r, n) = (g.c_out, g.rows(), g.cols());
    T::gemm(m, n, r, dout, n as isize, 1, cols, 1, n as isize, T::one(), dk, r as isize, 1);
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
