//! 2D convolution (cross-correlation convention, no kernel flip) and its
//! adjoints, implemented as im2col + GEMM.
//!
//! The orientation matches mainstream deep-learning frameworks: the kernel
//! slides without flipping. The whole batch is packed into one patch matrix
//! of shape (C·kh·kw) x (N·oh·ow) so each layer call is a single large GEMM;
//! the backward pass recomputes the patches instead of caching them, trading
//! a little compute for a lot of memory.

use crate::error::{Error, Result};
use crate::tensor::{debug_check_finite, Element, Tensor};

/// Geometry of one convolution application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve<T: Element>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (batch, in_ch, in_h, in_w) = input.nchw()?;
        let (out_ch, w_in_ch, kh, kw) = weight.nchw()?;
        if w_in_ch != in_ch {
            return Err(Error::shape(format!(
                "conv2d: input has {in_ch} channels but weight expects {w_in_ch}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be positive".to_string()));
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                in_h + 2 * padding,
                in_w + 2 * padding
            )));
        }
        let out_h = (in_h + 2 * padding - kh) / stride + 1;
        let out_w = (in_w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeometry {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when im2col would be the identity gather, so patches are just
    /// the input channels themselves.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Expand one sample into its columns of the batched patch matrix. The
/// matrix has row stride `row_stride`; this sample's columns start at
/// `col_base`.
fn im2col<T: Element>(
    g: &ConvGeometry,
    sample: &[T],
    col: &mut [T],
    row_stride: usize,
    col_base: usize,
) {
    for c in 0..g.in_ch {
        let plane = &sample[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let base = row * row_stride + col_base;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut col[base + oy * g.out_w..base + (oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add one sample's columns of the patch-matrix gradient back onto
/// the input sample.
fn col2im_add<T: Element>(
    g: &ConvGeometry,
    col: &[T],
    row_stride: usize,
    col_base: usize,
    sample_grad: &mut [T],
) {
    for c in 0..g.in_ch {
        let plane = &mut sample_grad[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let base = row * row_stride + col_base;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &col[base + oy * g.out_w..base + (oy + 1) * g.out_w];
                    let dst_row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Build the full batched patch matrix (patch_len x batch*out_spatial).
fn pack_columns<T: Element>(g: &ConvGeometry, input: &Tensor<T>) -> Vec<T> {
    let cols = g.batch * g.out_spatial();
    let sample_in = g.in_ch * g.in_h * g.in_w;
    let mut col = vec![T::zero(); g.patch_len() * cols];
    if g.is_pointwise() {
        // Patches are the raw channels: transpose (N,C,S) -> (C, N*S).
        let s = g.out_spatial();
        let src = input.data();
        for n in 0..g.batch {
            for c in 0..g.in_ch {
                let from = &src[(n * g.in_ch + c) * s..(n * g.in_ch + c + 1) * s];
                col[c * cols + n * s..c * cols + (n + 1) * s].copy_from_slice(from);
            }
        }
    } else {
        for n in 0..g.batch {
            let sample = &input.data()[n * sample_in..(n + 1) * sample_in];
            im2col(g, sample, &mut col, cols, n * g.out_spatial());
        }
    }
    col
}

/// Forward convolution. `bias` has one entry per output channel when present.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::resolve(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_ch] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {} output channels",
                b.shape(),
                g.out_ch
            )));
        }
    }
    let s = g.out_spatial();
    let cols = g.batch * s;
    let patch_len = g.patch_len();
    let col = pack_columns(&g, input);
    let mut prod = vec![T::zero(); g.out_ch * cols];
    unsafe {
        // (out_ch x patch_len) @ (patch_len x cols)
        T::gemm(
            g.out_ch,
            patch_len,
            cols,
            T::one(),
            weight.data().as_ptr(),
            patch_len as isize,
            1,
            col.as_ptr(),
            cols as isize,
            1,
            T::zero(),
            prod.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
    // Scatter (out_ch, N*S) -> (N, out_ch, S), adding bias on the way.
    let mut out = vec![T::zero(); g.batch * g.out_ch * s];
    for o in 0..g.out_ch {
        let bv = bias.map_or(T::zero(), |b| b.data()[o]);
        for n in 0..g.batch {
            let src = &prod[o * cols + n * s..o * cols + (n + 1) * s];
            let dst = &mut out[(n * g.out_ch + o) * s..(n * g.out_ch + o + 1) * s];
            if bias.is_some() {
                for (d, &v) in dst.iter_mut().zip(src.iter()) {
                    *d = v + bv;
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
    let out = Tensor::from_vec(g.output_shape(), out)?;
    debug_check_finite("conv2d", &out);
    Ok(out)
}

/// Gradients of `conv2d_forward` with respect to input, weight, and bias.
/// Each piece is computed only when its `need_*` flag is set, so frozen
/// weights cost nothing extra during attribution.
///
/// `grad_input` is the adjoint of the forward map (a transposed-convolution
/// scatter); `grad_weight` is the correlation of the input with the output
/// gradient.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_output: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeometry::resolve(input, weight, stride, padding)?;
    if grad_output.shape() != g.output_shape().as_slice() {
        return Err(Error::shape(format!(
            "conv2d backward: grad_output shape {:?} does not match forward output {:?}",
            grad_output.shape(),
            g.output_shape()
        )));
    }
    let s = g.out_spatial();
    let cols = g.batch * s;
    let patch_len = g.patch_len();
    let sample_in = g.in_ch * g.in_h * g.in_w;

    // Repack grad_output (N, out_ch, S) -> (out_ch, N*S).
    let mut gout = vec![T::zero(); g.out_ch * cols];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let src = &grad_output.data()[(n * g.out_ch + o) * s..(n * g.out_ch + o + 1) * s];
            gout[o * cols + n * s..o * cols + (n + 1) * s].copy_from_slice(src);
        }
    }

    let grad_weight = if need_weight {
        let col = pack_columns(&g, input);
        let mut gw = vec![T::zero(); weight.numel()];
        unsafe {
            // grad_weight = gout @ col^T : (out_ch x cols)(cols x patch_len)
            T::gemm(
                g.out_ch,
                cols,
                patch_len,
                T::one(),
                gout.as_ptr(),
                cols as isize,
                1,
                col.as_ptr(),
                1,
                cols as isize,
                T::zero(),
                gw.as_mut_ptr(),
                patch_len as isize,
                1,
            );
        }
        Some(Tensor::from_vec(weight.shape().to_vec(), gw)?)
    } else {
        None
    };

    let grad_input = if need_input {
        // gcol = weight^T @ gout : (patch_len x cols), then scatter per sample.
        let mut gcol = vec![T::zero(); patch_len * cols];
        unsafe {
            T::gemm(
                patch_len,
                g.out_ch,
                cols,
                T::one(),
                weight.data().as_ptr(),
                1,
                patch_len as isize,
                gout.as_ptr(),
                cols as isize,
                1,
                T::zero(),
                gcol.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
        let mut gin = vec![T::zero(); g.batch * sample_in];
        if g.is_pointwise() {
            for n in 0..g.batch {
                for c in 0..g.in_ch {
                    let dst = &mut gin[(n * g.in_ch + c) * s..(n * g.in_ch + c + 1) * s];
                    dst.copy_from_slice(&gcol[c * cols + n * s..c * cols + (n + 1) * s]);
                }
            }
        } else {
            for n in 0..g.batch {
                let sample = &mut gin[n * sample_in..(n + 1) * sample_in];
                col2im_add(&g, &gcol, cols, n * s, sample);
            }
        }
        Some(Tensor::from_vec(input.shape().to_vec(), gin)?)
    } else {
        None
    };

    let grad_bias = if need_bias {
        let mut gb = vec![T::zero(); g.out_ch];
        for (o, gbo) in gb.iter_mut().enumerate() {
            for &v in &gout[o * cols..(o + 1) * cols] {
                *gbo += v;
            }
        }
        Some(Tensor::from_vec(vec![g.out_ch], gb)?)
    } else {
        None
    };

    Ok((grad_input, grad_weight, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_stride2_patch_sum() {
        // 16x16 ones against [[1,1],[1,-1]] at stride 2: every patch sums to 2.
        let input = Tensor::<f64>::ones(vec![1, 1, 16, 16]);
        let weight = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let out = conv2d_forward(&input, &weight, None, 2, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 8, 8]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn pointwise_identity_kernel() {
        let input =
            Tensor::<f64>::from_vec(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let weight = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d_forward(&input, &weight, None, 1, 0).unwrap();
        assert_eq!(out.data(), input.data());
        let gout = Tensor::ones(vec![1, 1, 2, 3]);
        let (gin, _, _) =
            conv2d_backward(&input, &weight, 1, 0, &gout, true, false, false).unwrap();
        assert_eq!(gin.unwrap().data(), gout.data());
    }

    #[test]
    fn batched_equals_per_sample() {
        // Packing the batch into one GEMM must not change results.
        let mut v = Vec::new();
        for i in 0..(3 * 2 * 6 * 6) {
            v.push(((i * 37 + 11) % 23) as f64 * 0.17 - 1.9);
        }
        let input = Tensor::<f64>::from_vec(vec![3, 2, 6, 6], v).unwrap();
        let w: Vec<f64> = (0..(4 * 2 * 3 * 3)).map(|i| (i as f64) * 0.03 - 0.9).collect();
        let weight = Tensor::from_vec(vec![4, 2, 3, 3], w).unwrap();
        let bias = Tensor::from_vec(vec![4], vec![0.1, -0.2, 0.3, -0.4]).unwrap();
        let full = conv2d_forward(&input, &weight, Some(&bias), 2, 1).unwrap();
        for n in 0..3 {
            let one =
                conv2d_forward(&input.sample(n).unwrap(), &weight, Some(&bias), 2, 1).unwrap();
            let s = one.numel();
            assert_eq!(&full.data()[n * s..(n + 1) * s], one.data());
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let input = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let weight = Tensor::<f64>::zeros(vec![2, 2, 3, 3]);
        assert!(conv2d_forward(&input, &weight, None, 1, 1).is_err());
    }

    #[test]
    fn checkerboard_gradient_from_strided_kernel() {
        // The gradient of sum(conv) w.r.t. an all-ones input tiles the kernel:
        // with stride 2 each input pixel meets exactly one weight.
        let input = Tensor::<f64>::ones(vec![1, 1, 16, 16]);
        let weight = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let gout = Tensor::ones(vec![1, 1, 8, 8]);
        let (gin, gw, _) =
            conv2d_backward(&input, &weight, 2, 0, &gout, true, true, false).unwrap();
        let gin = gin.unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let expect = if i % 2 == 1 && j % 2 == 1 { -1.0 } else { 1.0 };
                assert_eq!(gin.data()[i * 16 + j], expect, "at ({i},{j})");
            }
        }
        // Each weight sees 64 ones.
        assert!(gw.unwrap().data().iter().all(|&v| v == 64.0));
    }
}
