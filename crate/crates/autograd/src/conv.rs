//! Strided 3D convolution kernels.
//!
//! All three kernels are partial derivatives of one trilinear form
//!
//! ```text
//! T(X, W, Y) = sum W[o, c, k] * X[c, s*p + k - pad] * Y[o, p]
//! ```
//!
//! `conv` is dT/dY, `conv_transpose` is dT/dX and `conv_weight` is dT/dW.
//! That closure is what lets the graph differentiate its own backward pass.

use crate::Real;

/// Shapes of a 3D convolution between a dense side `X` and a strided side `Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_size: [usize; 3],
    pub out_size: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_size: [usize; 3],
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        let out_size = in_size.map(|d| {
            assert!(d + 2 * padding >= kernel, "kernel larger than padded input");
            (d + 2 * padding - kernel) / stride + 1
        });
        ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            in_size,
            out_size,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.kernel;
        vec![self.out_channels, self.in_channels, k, k, k]
    }

    pub fn x_shape(&self, batch: usize) -> Vec<usize> {
        let [d, h, w] = self.in_size;
        vec![batch, self.in_channels, d, h, w]
    }

    pub fn y_shape(&self, batch: usize) -> Vec<usize> {
        let [d, h, w] = self.out_size;
        vec![batch, self.out_channels, d, h, w]
    }

    fn in_volume(&self) -> usize {
        self.in_size.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out_size.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    /// Multiply-accumulate count of one forward pass for a single sample.
    pub fn macs(&self) -> usize {
        self.col_rows() * self.out_channels * self.out_volume()
    }
}

/// Range of output positions along one axis whose tap `k` lands inside the
/// input, i.e. `0 <= o * stride + k - pad < n`.
#[inline]
fn valid_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n + pad > k { ((n + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Calls `f(col_offset, x_offset, lo, hi)` for every row run of the column
/// matrix: entries `lo..hi` of the run starting at `col_offset` read
/// `x[x_offset + ox * stride]`, the rest are padding.
#[inline]
fn for_each_run(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    let k = g.kernel;
    let s = g.stride;
    let p = g.padding;
    let [id, ih, iw] = g.in_size;
    let [od, oh, ow] = g.out_size;
    let in_vol = g.in_volume();
    let out_vol = g.out_volume();
    for c in 0..g.in_channels {
        for kz in 0..k {
            let (z_lo, z_hi) = valid_range(id, od, kz, s, p);
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(ih, oh, ky, s, p);
                for kx in 0..k {
                    let (x_lo, x_hi) = valid_range(iw, ow, kx, s, p);
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    for oz in 0..od {
                        for oy in 0..oh {
                            let col0 = row * out_vol + (oz * oh + oy) * ow;
                            if oz < z_lo || oz >= z_hi || oy < y_lo || oy >= y_hi {
                                f(col0, 0, 0, 0);
                                continue;
                            }
                            let iz = oz * s + kz - p;
                            let iy = oy * s + ky - p;
                            // x index of ox = 0, shifted so it never goes negative
                            let x0 = c * in_vol + (iz * ih + iy) * iw + kx;
                            f(col0, x0, x_lo, x_hi);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (s, p, ow) = (g.stride, g.padding, g.out_size[2]);
    for_each_run(g, |col0, x0, lo, hi| {
        let run = &mut col[col0..col0 + ow];
        run[..lo].fill(T::zero());
        run[hi..].fill(T::zero());
        for (ox, dst) in run[lo..hi].iter_mut().enumerate() {
            *dst = x[x0 + (ox + lo) * s - p];
        }
    });
}

fn col2im<T: Real>(g: &ConvGeometry, col: &[T], x: &mut [T]) {
    let (s, p) = (g.stride, g.padding);
    for_each_run(g, |col0, x0, lo, hi| {
        for (ox, &v) in col[col0 + lo..col0 + hi].iter().enumerate() {
            x[x0 + (ox + lo) * s - p] += v;
        }
    });
}

fn check_len(what: &str, got: usize, want: usize) {
    assert_eq!(got, want, "conv: {what} has {got} elements, expected {want}");
}

/// `Y = conv(X, W)` for a batch of `batch` samples.
pub fn conv<T: Real>(g: &ConvGeometry, batch: usize, x: &[T], w: &[T]) -> Vec<T> {
    let (xs, ys) = (g.in_channels * g.in_volume(), g.out_channels * g.out_volume());
    check_len("input", x.len(), batch * xs);
    check_len("weight", w.len(), g.out_channels * g.col_rows());
    let mut y = vec![T::zero(); batch * ys];
    let mut col = vec![T::zero(); g.col_rows() * g.out_volume()];
    for n in 0..batch {
        im2col(g, &x[n * xs..(n + 1) * xs], &mut col);
        T::gemm(
            g.out_channels,
            g.col_rows(),
            g.out_volume(),
            T::one(),
            w,
            false,
            &col,
            false,
            T::zero(),
            &mut y[n * ys..(n + 1) * ys],
        );
    }
    y
}

/// `X = conv_transpose(Y, W)`, the adjoint of [`conv`] in its input.
pub fn conv_transpose<T: Real>(g: &ConvGeometry, batch: usize, y: &[T], w: &[T]) -> Vec<T> {
    let (xs, ys) = (g.in_channels * g.in_volume(), g.out_channels * g.out_volume());
    check_len("strided input", y.len(), batch * ys);
    check_len("weight", w.len(), g.out_channels * g.col_rows());
    let mut x = vec![T::zero(); batch * xs];
    let mut col = vec![T::zero(); g.col_rows() * g.out_volume()];
    for n in 0..batch {
        T::gemm(
            g.col_rows(),
            g.out_channels,
            g.out_volume(),
            T::one(),
            w,
            true,
            &y[n * ys..(n + 1) * ys],
            false,
            T::zero(),
            &mut col,
        );
        col2im(g, &col, &mut x[n * xs..(n + 1) * xs]);
    }
    x
}

/// `W = conv_weight(X, Y)`, the adjoint of [`conv`] in its weight; sums over the batch.
pub fn conv_weight<T: Real>(g: &ConvGeometry, batch: usize, x: &[T], y: &[T]) -> Vec<T> {
    let (xs, ys) = (g.in_channels * g.in_volume(), g.out_channels * g.out_volume());
    check_len("input", x.len(), batch * xs);
    check_len("strided input", y.len(), batch * ys);
    let mut w = vec![T::zero(); g.out_channels * g.col_rows()];
    let mut col = vec![T::zero(); g.col_rows() * g.out_volume()];
    for n in 0..batch {
        im2col(g, &x[n * xs..(n + 1) * xs], &mut col);
        T::gemm(
            g.out_channels,
            g.out_volume(),
            g.col_rows(),
            T::one(),
            &y[n * ys..(n + 1) * ys],
            false,
            &col,
            true,
            T::one(),
            &mut w,
        );
    }
    w
}
