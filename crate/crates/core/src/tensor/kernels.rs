//! Raw compute kernels on row-major slices: GEMM and im2col convolution.
//!
//! These are shared by the graph ops and by the non-differentiable fast
//! paths (flow inverse, inference) so both routes round identically.

use crate::error::{Error, Result};

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape `(m, k)` and
/// `op(b)` of shape `(k, n)`. A transposed operand is stored row-major in its
/// untransposed orientation, i.e. `a` is `(k, m)` when `trans_a`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches given
    // the strides derived from (m, n, k).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

/// Geometry of a 2D convolution from an `(n, c_in, h, w)` image to an
/// `(n, c_out, h_out, w_out)` map. Transposed convolutions reuse the geometry
/// of the convolution they are the adjoint of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn conv(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [n, c_in, h, w] = dims4("conv2d", "input", input)?;
        let [c_out, kc, kh, kw] = dims4("conv2d", "kernel", kernel)?;
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square, got {kh}x{kw}"),
            ));
        }
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but kernel {kernel:?} expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry for `conv2d_transpose(input, kernel)` where `input` is
    /// `(n, c_out, h_out, w_out)` and `kernel` is `(c_out, c_in, k, k)`.
    pub fn transpose(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [n, c_out, h_out, w_out] = dims4("conv2d_transpose", "input", input)?;
        let [kc, c_in, kh, kw] = dims4("conv2d_transpose", "kernel", kernel)?;
        if kh != kw {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("kernel must be square, got {kh}x{kw}"),
            ));
        }
        if kc != c_out {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input has {c_out} channels but kernel {kernel:?} expects {kc}"),
            ));
        }
        if stride == 0 || h_out == 0 || w_out == 0 {
            return Err(Error::shape("conv2d_transpose", "stride and input size must be >= 1"));
        }
        let full_h = (h_out - 1) * stride + kh;
        let full_w = (w_out - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("padding {pad} consumes the whole {full_h}x{full_w} output"),
            ));
        }
        Ok(Self {
            n,
            c_in,
            h: full_h - 2 * pad,
            w: full_w - 2 * pad,
            c_out,
            k: kh,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.n, self.c_in, self.h, self.w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k, self.k]
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn dims4(op: &'static str, what: &str, shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::shape(op, format!("{what} must be 4-D, got {shape:?}")))
}

fn im2col(sample: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, sample: &mut [f32]) {
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `(n, c_in, h, w) * (c_out, c_in, k, k)`.
pub fn conv_forward(input: &[f32], kernel: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * cols_n;
    let mut cols = vec![0.0; rows * cols_n];
    let mut out = vec![0.0; g.n * out_sz];
    for b in 0..g.n {
        im2col(&input[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        gemm(
            false,
            false,
            g.c_out,
            cols_n,
            rows,
            kernel,
            &cols,
            0.0,
            &mut out[b * out_sz..(b + 1) * out_sz],
        );
    }
    out
}

/// Gradient of [`conv_forward`] w.r.t. its input; also the forward pass of
/// the transposed convolution.
pub fn conv_backward_input(grad_out: &[f32], kernel: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * cols_n;
    let mut cols = vec![0.0; rows * cols_n];
    let mut grad_in = vec![0.0; g.n * in_sz];
    for b in 0..g.n {
        gemm(
            true,
            false,
            rows,
            cols_n,
            g.c_out,
            kernel,
            &grad_out[b * out_sz..(b + 1) * out_sz],
            0.0,
            &mut cols,
        );
        col2im(&cols, g, &mut grad_in[b * in_sz..(b + 1) * in_sz]);
    }
    grad_in
}

/// Gradient of [`conv_forward`] w.r.t. its kernel.
pub fn conv_backward_kernel(input: &[f32], grad_out: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * cols_n;
    let mut cols = vec![0.0; rows * cols_n];
    let mut grad_k = vec![0.0; g.c_out * rows];
    for b in 0..g.n {
        im2col(&input[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        gemm(
            false,
            true,
            g.c_out,
            rows,
            cols_n,
            &grad_out[b * out_sz..(b + 1) * out_sz],
            &cols,
            1.0,
            &mut grad_k,
        );
    }
    grad_k
}

/// `x (n, d_in) . w (d_in, d_out) + bias`, bias broadcast over rows.
pub fn dense_forward(x: &[f32], w: &[f32], bias: &[f32], n: usize, d_in: usize, d_out: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    gemm(false, false, n, d_out, d_in, x, w, 1.0, &mut out);
    out
}
