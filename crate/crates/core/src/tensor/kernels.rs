//! Lowering of 3D convolutions onto matrix products.

use super::{Real, Result, TensorError};

/// Output extent of a strided, zero-padded window along one axis.
pub fn conv_output_size(
    op: &'static str,
    axis: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::OutputSize {
            op,
            axis,
            detail: "stride must be >= 1".into(),
        });
    }
    let span = input + 2 * padding;
    if span < kernel || (span - kernel) % stride != 0 {
        return Err(TensorError::OutputSize {
            op,
            axis,
            detail: format!("({input} + 2*{padding} - {kernel}) / {stride} + 1 is not an integer >= 1"),
        });
    }
    Ok((span - kernel) / stride + 1)
}

/// Geometry of a single-sample 3D correlation: a `[channels, D, H, W]` grid read through a
/// `kernel` window producing an `out` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub out: [usize; 3],
}

const AXES: [&str; 3] = ["depth", "height", "width"];

impl Conv3dGeometry {
    pub fn new(
        op: &'static str,
        channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = conv_output_size(op, AXES[a], input[a], kernel[a], stride[a], padding[a])?;
        }
        Ok(Self {
            channels,
            input,
            kernel,
            stride,
            padding,
            out,
        })
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the lowered matrix: `channels * kD * kH * kW`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_len()
    }

    pub fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    /// True when the lowered matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Gather windows of `input` (`[channels, D, H, W]`) into `col` (`[col_rows, out_len]`).
    pub fn im2col<T: Real>(&self, input: &[T], col: &mut [T]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.out;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.padding;
        let out_len = self.out_len();
        assert_eq!(input.len(), self.channels * self.in_len());
        assert_eq!(col.len(), self.col_rows() * out_len);

        for c in 0..self.channels {
            let plane = &input[c * id * ih * iw..(c + 1) * id * ih * iw];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((c * kd + kz) * kh + ky) * kw + kx;
                        let dst = &mut col[row * out_len..(row + 1) * out_len];
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let seg = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                    seg.fill(T::zero());
                                    continue;
                                }
                                let src = &plane[(iz as usize * ih + iy as usize) * iw..][..iw];
                                for (ox, v) in seg.iter_mut().enumerate() {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    *v = if ix < 0 || ix >= iw as isize { T::zero() } else { src[ix as usize] };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add `col` back onto `out` (`[channels, D, H, W]`).
    pub fn col2im<T: Real>(&self, col: &[T], out: &mut [T]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.out;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.padding;
        let out_len = self.out_len();
        assert_eq!(out.len(), self.channels * self.in_len());
        assert_eq!(col.len(), self.col_rows() * out_len);

        for c in 0..self.channels {
            let plane = &mut out[c * id * ih * iw..(c + 1) * id * ih * iw];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((c * kd + kz) * kh + ky) * kw + kx;
                        let src = &col[row * out_len..(row + 1) * out_len];
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            if iz < 0 || iz >= id as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let seg = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let dst = &mut plane[(iz as usize * ih + iy as usize) * iw..][..iw];
                                for (ox, &v) in seg.iter().enumerate() {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix >= 0 && (ix as usize) < iw {
                                        dst[ix as usize] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. `trans_a`/`trans_b` select the transposed view of the stored matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above bound every index the kernel touches for the given
    // dimensions and strides; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
