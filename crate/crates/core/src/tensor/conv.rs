//! Grouped 2-D convolution kernels via im2col + GEMM.

use super::{shape_err, TensorError};

/// Output extent of a convolution along one axis, `None` if the padded input
/// is smaller than the kernel.
pub fn conv_output_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self, TensorError> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected NCHW input and OIHW kernel, got {input:?} and {kernel:?}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, cpg, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(shape_err(
                "conv2d",
                format!("groups={groups} must divide input channels {c} and output channels {o}"),
            ));
        }
        if cpg * groups != c {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input has {c} channels but kernel expects {} ({cpg} per group x {groups} groups)",
                    cpg * groups
                ),
            ));
        }
        let oh = conv_output_dim(h, kh, stride, padding).ok_or_else(|| {
            shape_err(
                "conv2d",
                format!(
                    "padded height {} smaller than kernel height {kh}",
                    h + 2 * padding
                ),
            )
        })?;
        let ow = conv_output_dim(w, kw, stride, padding).ok_or_else(|| {
            shape_err(
                "conv2d",
                format!(
                    "padded width {} smaller than kernel width {kw}",
                    w + 2 * padding
                ),
            )
        })?;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            padding,
            groups,
            oh,
            ow,
        })
    }

    fn cpg(&self) -> usize {
        self.c / self.groups
    }

    fn opg(&self) -> usize {
        self.o / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cpg() * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    /// Valid output range along one axis for kernel tap `k`.
    fn valid(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // need 0 <= o*s + off < size
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_excl = {
            let lim = size as isize - off; // o*s < lim
            if lim <= 0 {
                0
            } else {
                (lim + s - 1) / s
            }
        };
        let lo = lo.max(0) as usize;
        let hi = (hi_excl.max(0) as usize).min(out);
        (lo.min(hi), hi)
    }

    /// Fills `col` (col_rows x col_cols) for sample `n`, group `g`.
    fn im2col(&self, input: &[f64], n: usize, g: usize, col: &mut [f64]) {
        col.iter_mut().for_each(|v| *v = 0.0);
        let cpg = self.cpg();
        let l = self.col_cols();
        for ci in 0..cpg {
            let c = g * cpg + ci;
            let plane = &input[((n * self.c + c) * self.h) * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                let (y0, y1) = self.valid(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (x0, x1) = self.valid(kj, self.w, self.ow);
                    let row = &mut col[((ci * self.kh + ki) * self.kw + kj) * l..][..l];
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ki - self.padding;
                        let src = &plane[iy * self.w..][..self.w];
                        let dst = &mut row[oy * self.ow..][..self.ow];
                        if self.stride == 1 {
                            let ix0 = x0 + kj - self.padding;
                            dst[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                dst[ox] = src[ox * self.stride + kj - self.padding];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the gradient of sample `n`, group `g`.
    fn col2im(&self, col: &[f64], n: usize, g: usize, gin: &mut [f64]) {
        let cpg = self.cpg();
        let l = self.col_cols();
        for ci in 0..cpg {
            let c = g * cpg + ci;
            let plane = &mut gin[((n * self.c + c) * self.h) * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                let (y0, y1) = self.valid(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (x0, x1) = self.valid(kj, self.w, self.ow);
                    let row = &col[((ci * self.kh + ki) * self.kw + kj) * l..][..l];
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ki - self.padding;
                        let dst = &mut plane[iy * self.w..][..self.w];
                        let src = &row[oy * self.ow..][..self.ow];
                        for ox in x0..x1 {
                            dst[ox * self.stride + kj - self.padding] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// C (m x n) = A (m x k) * B (k x n) + beta * C, with explicit strides on A and B.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let a_need = (m - 1) * a_strides.0 + k.saturating_sub(1) * a_strides.1 + 1;
    let b_need = k.saturating_sub(1) * b_strides.0 + (n - 1) * b_strides.1 + 1;
    assert!(
        k == 0 || (a.len() >= a_need && b.len() >= b_need),
        "gemm operand too short"
    );
    assert!(c.len() >= m * n, "gemm output too short");
    // SAFETY: bounds of every operand checked above; c is row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_raw(input: &[f64], kernel: &[f64], bias: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let (k, l) = (geom.col_rows(), geom.col_cols());
    let opg = geom.opg();
    let mut out = vec![0.0; geom.n * geom.o * l];
    let mut col = vec![0.0; k * l];
    for n in 0..geom.n {
        for g in 0..geom.groups {
            geom.im2col(input, n, g, &mut col);
            let w = &kernel[g * opg * k..][..opg * k];
            let dst = &mut out[(n * geom.o + g * opg) * l..][..opg * l];
            for (oi, row) in dst.chunks_exact_mut(l).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[g * opg + oi]);
            }
            gemm(opg, k, l, w, (k, 1), &col, (l, 1), dst, 1.0);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    gout: &[f64],
    geom: &ConvGeom,
    need_input: bool,
) -> ConvGrads {
    let (k, l) = (geom.col_rows(), geom.col_cols());
    let opg = geom.opg();
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; geom.o];
    let mut gin = need_input.then(|| vec![0.0; input.len()]);
    let mut col = vec![0.0; k * l];
    let mut gcol = vec![0.0; k * l];
    for n in 0..geom.n {
        for g in 0..geom.groups {
            let go = &gout[(n * geom.o + g * opg) * l..][..opg * l];
            for (oi, row) in go.chunks_exact(l).enumerate() {
                gb[g * opg + oi] += row.iter().sum::<f64>();
            }
            geom.im2col(input, n, g, &mut col);
            // dW_g += gout_g (opg x L) * col^T (L x K)
            gemm(
                opg,
                l,
                k,
                go,
                (l, 1),
                &col,
                (1, l),
                &mut gk[g * opg * k..][..opg * k],
                1.0,
            );
            if let Some(gin) = gin.as_mut() {
                let w = &kernel[g * opg * k..][..opg * k];
                // dcol (K x L) = W_g^T (K x opg) * gout_g (opg x L)
                gemm(k, opg, l, w, (1, k), go, (l, 1), &mut gcol, 0.0);
                geom.col2im(&gcol, n, g, gin);
            }
        }
    }
    ConvGrads {
        input: gin,
        kernel: gk,
        bias: gb,
    }
}

/// Stand-alone forward convolution on raw buffers, used outside the tape.
pub fn conv2d_forward(
    input: &super::Tensor,
    kernel: &super::Tensor,
    bias: &super::Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<super::Tensor, TensorError> {
    let geom = ConvGeom::new(input.shape(), kernel.shape(), stride, padding, groups)?;
    if bias.numel() != geom.o {
        return Err(shape_err(
            "conv2d",
            format!(
                "bias has {} values for {} output channels",
                bias.numel(),
                geom.o
            ),
        ));
    }
    let out = conv2d_raw(input.data(), kernel.data(), bias.data(), &geom);
    super::Tensor::new(geom.output_shape(), out)
}
