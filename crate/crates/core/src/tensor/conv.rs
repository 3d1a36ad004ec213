use super::{Scalar, Tensor};
use crate::error::{EscError, Result};

/// "Same" zero padding: output extent `ceil(input / stride)` and the number
/// of padded rows/columns before the first input element.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let (ho, pad_top) = same_padding(h, k, stride);
        let (wo, pad_left) = same_padding(w, k, stride);
        Self {
            cin,
            h,
            w,
            k,
            stride,
            ho,
            wo,
            pad_top,
            pad_left,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one CHW sample into a `[cin*k*k, ho*wo]` column matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let hw = self.out_len();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad_top as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad_left as isize;
                            *out = if ix < 0 || ix >= self.w as isize {
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

    /// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let hw = self.out_len();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad_left as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<(usize, usize, ConvGeometry)> {
    if stride == 0 {
        return Err(EscError::Config("convolution stride must be positive".into()));
    }
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(EscError::Shape(format!(
            "conv input has {cin} channels but weight expects {wcin}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(EscError::Shape(format!(
            "conv kernels must be square and odd, got {kh}x{kw}"
        )));
    }
    if bias.numel() != cout {
        return Err(EscError::Shape(format!(
            "conv bias has {} entries for {cout} output channels",
            bias.numel()
        )));
    }
    Ok((n, cout, ConvGeometry::new(cin, h, w, kh, stride)))
}

/// 2-D convolution with "same" zero padding; returns `[N, Cout, ceil(H/s), ceil(W/s)]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = check_conv(input, weight, bias, stride)?;
    let in_len = g.cin * g.h * g.w;
    let hw = g.out_len();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); n * cout * hw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw]
    };
    for s in 0..n {
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        let dst = &mut out[s * cout * hw..(s + 1) * cout * hw];
        for (co, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[co]);
        }
        let b: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        T::gemm(
            cout,
            kk,
            hw,
            weight.data(),
            kk as isize,
            1,
            b,
            hw as isize,
            1,
            T::one(),
            dst,
            hw as isize,
            1,
        );
    }
    Tensor::new(vec![n, cout, g.ho, g.wo], out)
}

/// Gradients of a convolution w.r.t. input, weight and bias given the output
/// gradient. Any of the three may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    grad_out: &[T],
    need_input: bool,
    need_params: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (n, cin, h, w) = input.dims4().expect("validated in forward");
    let (cout, _, k, _) = weight.dims4().expect("validated in forward");
    let g = ConvGeometry::new(cin, h, w, k, stride);
    let in_len = cin * h * w;
    let hw = g.out_len();
    let kk = g.patch_len();

    let mut dx = need_input.then(|| vec![T::zero(); n * in_len]);
    let mut dw = need_params.then(|| vec![T::zero(); cout * kk]);
    let mut db = need_params.then(|| vec![T::zero(); cout]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * hw }];
    let mut dcols = vec![T::zero(); if need_input { kk * hw } else { 0 }];

    for s in 0..n {
        let go = &grad_out[s * cout * hw..(s + 1) * cout * hw];
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            for (co, row) in go.chunks(hw).enumerate() {
                db[co] += row.iter().copied().sum();
            }
            let b: &[T] = if g.is_pointwise() {
                x
            } else {
                g.im2col(x, &mut cols);
                &cols
            };
            // dW[cout, kk] += dOut[cout, hw] * cols^T
            T::gemm(cout, hw, kk, go, hw as isize, 1, b, 1, hw as isize, T::one(), dw, kk as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                // dX[cin, hw] = W^T * dOut
                T::gemm(cin, cout, hw, weight.data(), 1, kk as isize, go, hw as isize, 1, T::zero(), dst, hw as isize, 1);
            } else {
                T::gemm(kk, cout, hw, weight.data(), 1, kk as isize, go, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                g.col2im(&dcols, dst);
            }
        }
    }
    (dx, dw, db)
}
