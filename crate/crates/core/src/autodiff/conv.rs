//! im2col / col2im kernels for channels-last 3D convolution.
//!
//! 2D convolution is the `T = 1, K_t = 1` case of the same kernel.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Zero padding that keeps `ceil(in / stride)` outputs.
    Zero,
    /// No padding.
    Valid,
}

/// Resolved geometry for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_t: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_t: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(input: usize, k: usize, stride: usize, pad: Padding) -> Option<(usize, usize)> {
    match pad {
        Padding::Zero => {
            let total = k - 1;
            let out = (input + total - k) / stride + 1;
            Some((total / 2, out))
        }
        Padding::Valid => {
            if input < k {
                None
            } else {
                Some((0, (input - k) / stride + 1))
            }
        }
    }
}

impl ConvGeom {
    /// `input` is `[N, T, H, W, C_in]`, `kernel` is `[K_t, K_h, K_w, C_in, C_out]`.
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        strides: (usize, usize),
        temporal_padding: Padding,
        spatial_padding: Padding,
    ) -> Result<Self> {
        if input.len() != 5 || kernel.len() != 5 {
            return Err(Error::shape(
                "conv",
                format!("input {input:?} / kernel {kernel:?} must both be rank 5"),
            ));
        }
        let [n, t, h, w, cin] = [input[0], input[1], input[2], input[3], input[4]];
        let [kt, kh, kw, kcin, cout] = [kernel[0], kernel[1], kernel[2], kernel[3], kernel[4]];
        if kcin != cin {
            return Err(Error::shape("conv", format!("input channels {cin} vs kernel {kcin}")));
        }
        if kt == 0 || kh == 0 || kw == 0 || strides.0 == 0 || strides.1 == 0 {
            return Err(Error::shape("conv", "zero kernel extent or stride"));
        }
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::shape("conv", format!("empty input {input:?}")));
        }
        let too_small = || Error::shape("conv", format!("input {input:?} smaller than kernel {kernel:?}"));
        let (pad_t, out_t) = out_extent(t, kt, 1, temporal_padding).ok_or_else(too_small)?;
        let (pad_h, out_h) = out_extent(h, kh, strides.0, spatial_padding).ok_or_else(too_small)?;
        let (pad_w, out_w) = out_extent(w, kw, strides.1, spatial_padding).ok_or_else(too_small)?;
        Ok(ConvGeom {
            n,
            t,
            h,
            w,
            cin,
            kt,
            kh,
            kw,
            cout,
            stride_h: strides.0,
            stride_w: strides.1,
            pad_t,
            pad_h,
            pad_w,
            out_t,
            out_h,
            out_w,
        })
    }

    pub fn rows(&self) -> usize {
        self.n * self.out_t * self.out_h * self.out_w
    }

    pub fn patch(&self) -> usize {
        self.kt * self.kh * self.kw * self.cin
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.out_t, self.out_h, self.out_w, self.cout]
    }

    fn source(&self, ot: usize, oh: usize, ow: usize, dt: usize, dh: usize, dw: usize) -> Option<(usize, usize, usize)> {
        let it = (ot + dt).checked_sub(self.pad_t)?;
        let ih = (oh * self.stride_h + dh).checked_sub(self.pad_h)?;
        let iw = (ow * self.stride_w + dw).checked_sub(self.pad_w)?;
        if it < self.t && ih < self.h && iw < self.w {
            Some((it, ih, iw))
        } else {
            None
        }
    }

    /// Walk every (row, patch-offset, input-offset) triple that touches real input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let cin = self.cin;
        let mut row = 0;
        for b in 0..self.n {
            for ot in 0..self.out_t {
                for oh in 0..self.out_h {
                    for ow in 0..self.out_w {
                        let mut col = 0;
                        for dt in 0..self.kt {
                            for dh in 0..self.kh {
                                for dw in 0..self.kw {
                                    if let Some((it, ih, iw)) = self.source(ot, oh, ow, dt, dh, dw) {
                                        let src = (((b * self.t + it) * self.h + ih) * self.w + iw) * cin;
                                        f(row, col, src);
                                    }
                                    col += cin;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

pub fn im2col<F: Scalar>(g: &ConvGeom, input: &[F]) -> Vec<F> {
    let patch = g.patch();
    let cin = g.cin;
    let mut cols = vec![F::zero(); g.rows() * patch];
    g.for_each_tap(|row, col, src| {
        let dst = row * patch + col;
        cols[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
    });
    cols
}

pub fn col2im<F: Scalar>(g: &ConvGeom, dcols: &[F]) -> Vec<F> {
    let patch = g.patch();
    let cin = g.cin;
    let mut dx = vec![F::zero(); g.n * g.t * g.h * g.w * cin];
    g.for_each_tap(|row, col, src| {
        let s = row * patch + col;
        for c in 0..cin {
            dx[src + c] += dcols[s + c];
        }
    });
    dx
}

/// Forward pass: returns `(output, cols)`.
pub fn conv_forward<F: Scalar>(g: &ConvGeom, input: &[F], weight: &[F], bias: Option<&[F]>) -> (Vec<F>, Vec<F>) {
    let cols = im2col(g, input);
    let rows = g.rows();
    let k = g.patch();
    let n = g.cout;
    let mut out = vec![F::zero(); rows * n];
    if let Some(b) = bias {
        for r in 0..rows {
            out[r * n..(r + 1) * n].copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { F::one() } else { F::zero() };
    F::gemm(rows, k, n, &cols, k as isize, 1, weight, n as isize, 1, beta, &mut out);
    (out, cols)
}

/// Weight gradient `cols^T @ dy`.
pub fn conv_grad_weight<F: Scalar>(g: &ConvGeom, cols: &[F], dy: &[F]) -> Vec<F> {
    let rows = g.rows();
    let k = g.patch();
    let n = g.cout;
    let mut dw = vec![F::zero(); k * n];
    F::gemm(k, rows, n, cols, 1, k as isize, dy, n as isize, 1, F::zero(), &mut dw);
    dw
}

/// Input gradient `col2im(dy @ W^T)`.
pub fn conv_grad_input<F: Scalar>(g: &ConvGeom, weight: &[F], dy: &[F]) -> Vec<F> {
    let rows = g.rows();
    let k = g.patch();
    let n = g.cout;
    let mut dcols = vec![F::zero(); rows * k];
    F::gemm(rows, n, k, dy, n as isize, 1, weight, 1, n as isize, F::zero(), &mut dcols);
    col2im(g, &dcols)
}
