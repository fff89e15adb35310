//! Valid-padding cross-correlation helpers shared by `conv2d` and its adjoint.
//!
//! Column buffers use the `[C·k·k, B·P]` layout where `P = out_h·out_w`, so a
//! single GEMM against the `[F, C·k·k]` kernel matrix handles a whole batch.

use crate::error::{AutodiffError, Result};
use crate::real::Real;

/// Shape bookkeeping for a cross-correlation from a fine `[B, C, H, W]` grid
/// to a coarse `[B, F, H', W']` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub filters: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// Geometry of `conv2d(x, K, stride)` with `x: [B, C, H, W]`, `K: [F, C, k, k]`.
    pub fn forward(x_shape: &[usize], k_shape: &[usize], stride: usize) -> Result<Self> {
        let op = "conv2d";
        let (b, c, h, w) = four(op, "input", x_shape)?;
        let (f, kc, kh, kw) = four(op, "kernel", k_shape)?;
        if kc != c {
            return Err(AutodiffError::dim(
                op,
                format!("kernel expects {kc} channels, input has {c}"),
            ));
        }
        if kh != kw {
            return Err(AutodiffError::dim(op, format!("kernel {kh}x{kw} is not square")));
        }
        if stride == 0 {
            return Err(AutodiffError::dim(op, "stride must be at least 1"));
        }
        if kh > h || kw > w {
            return Err(AutodiffError::dim(
                op,
                format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            ));
        }
        Ok(ConvGeometry {
            batch: b,
            channels: c,
            filters: f,
            height: h,
            width: w,
            kernel: kh,
            stride,
            out_height: (h - kh) / stride + 1,
            out_width: (w - kw) / stride + 1,
        })
    }

    /// Geometry of `conv2d_transpose(y, K, stride)` with `y: [B, F, H', W']`
    /// and `K: [F, C, k, k]`; the result is `[B, C, (H'-1)·s + k, (W'-1)·s + k]`.
    pub fn transpose(y_shape: &[usize], k_shape: &[usize], stride: usize) -> Result<Self> {
        let op = "conv2d_transpose";
        let (b, f, oh, ow) = four(op, "input", y_shape)?;
        let (kf, c, kh, kw) = four(op, "kernel", k_shape)?;
        if kf != f {
            return Err(AutodiffError::dim(
                op,
                format!("kernel expects {kf} input channels, input has {f}"),
            ));
        }
        if kh != kw {
            return Err(AutodiffError::dim(op, format!("kernel {kh}x{kw} is not square")));
        }
        if stride == 0 {
            return Err(AutodiffError::dim(op, "stride must be at least 1"));
        }
        Ok(ConvGeometry {
            batch: b,
            channels: c,
            filters: f,
            height: (oh - 1) * stride + kh,
            width: (ow - 1) * stride + kw,
            kernel: kh,
            stride,
            out_height: oh,
            out_width: ow,
        })
    }

    pub fn fine_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn coarse_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_height, self.out_width]
    }

    /// Rows of the column buffer (`C·k·k`).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column buffer (`B·H'·W'`).
    pub fn positions(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }
}

fn four(op: &'static str, what: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(AutodiffError::dim(
            op,
            format!("{what} must be 4-D, got shape {shape:?}"),
        )),
    }
}

/// Unfolds a fine `[B, C, H, W]` tensor into `[C·k·k, B·P]` patches.
pub fn im2col<S: Real>(g: &ConvGeometry, x: &[S]) -> Vec<S> {
    let k = g.kernel;
    let p = g.out_height * g.out_width;
    let cols_n = g.positions();
    let mut cols = vec![S::ZERO; g.patch_len() * cols_n];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let plane = &x[(b * g.channels + c) * g.height * g.width..];
                    for oy in 0..g.out_height {
                        let src = &plane[(oy * g.stride + ky) * g.width + kx..];
                        let out = &mut dst[b * p + oy * g.out_width..];
                        for ox in 0..g.out_width {
                            out[ox] = src[ox * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds `[C·k·k, B·P]` patches back onto a fine `[B, C, H, W]` grid,
/// summing overlapping contributions. Adjoint of [`im2col`].
pub fn col2im<S: Real>(g: &ConvGeometry, cols: &[S]) -> Vec<S> {
    let k = g.kernel;
    let p = g.out_height * g.out_width;
    let cols_n = g.positions();
    let mut x = vec![S::ZERO; g.batch * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let base = (b * g.channels + c) * g.height * g.width;
                    for oy in 0..g.out_height {
                        let line = base + (oy * g.stride + ky) * g.width + kx;
                        let from = &src[b * p + oy * g.out_width..];
                        for ox in 0..g.out_width {
                            x[line + ox * g.stride] += from[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B, F, P]` (NCHW) to `[F, B·P]`.
pub fn batch_major_to_filter_major<S: Real>(g: &ConvGeometry, y: &[S]) -> Vec<S> {
    let p = g.out_height * g.out_width;
    let bp = g.positions();
    let mut out = vec![S::ZERO; y.len()];
    for b in 0..g.batch {
        for f in 0..g.filters {
            let src = &y[(b * g.filters + f) * p..(b * g.filters + f + 1) * p];
            out[f * bp + b * p..f * bp + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[F, B·P]` to `[B, F, P]` (NCHW).
pub fn filter_major_to_batch_major<S: Real>(g: &ConvGeometry, y: &[S]) -> Vec<S> {
    let p = g.out_height * g.out_width;
    let bp = g.positions();
    let mut out = vec![S::ZERO; y.len()];
    for f in 0..g.filters {
        for b in 0..g.batch {
            let src = &y[f * bp + b * p..f * bp + (b + 1) * p];
            out[(b * g.filters + f) * p..(b * g.filters + f + 1) * p].copy_from_slice(src);
        }
    }
    out
}
