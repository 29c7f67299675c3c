//! Dense layers, activations, reductions, and the fused classification
//! losses.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// x @ W^T + b for x: (N, in), W: (out, in), b: (out).
pub fn linear_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, d_in) = match input.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::shape(format!("linear: input must be 2d, got {s:?}"))),
    };
    let (d_out, w_in) = match weight.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::shape(format!("linear: weight must be 2d, got {s:?}"))),
    };
    if w_in != d_in {
        return Err(Error::shape(format!(
            "linear: input width {d_in} does not match weight width {w_in}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape(format!(
                "linear: bias shape {:?} does not match {d_out} outputs",
                b.shape()
            )));
        }
    }
    let mut out = vec![T::zero(); n * d_out];
    unsafe {
        // (n x d_in) @ (d_in x d_out), reading W transposed via strides.
        T::gemm(
            n,
            d_in,
            d_out,
            T::one(),
            input.data().as_ptr(),
            d_in as isize,
            1,
            weight.data().as_ptr(),
            1,
            d_in as isize,
            T::zero(),
            out.as_mut_ptr(),
            d_out as isize,
            1,
        );
    }
    if let Some(b) = bias {
        let bd = b.data();
        for row in out.chunks_exact_mut(d_out) {
            for (v, &bv) in row.iter_mut().zip(bd.iter()) {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(vec![n, d_out], out)
}

pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_output: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let (d_out, _) = (weight.shape()[0], weight.shape()[1]);
    if grad_output.shape() != [n, d_out] {
        return Err(Error::shape(format!(
            "linear backward: grad shape {:?}, expected [{n}, {d_out}]",
            grad_output.shape()
        )));
    }
    let mut gin = vec![T::zero(); n * d_in];
    let mut gw = vec![T::zero(); d_out * d_in];
    unsafe {
        // grad_input = gout @ W
        T::gemm(
            n,
            d_out,
            d_in,
            T::one(),
            grad_output.data().as_ptr(),
            d_out as isize,
            1,
            weight.data().as_ptr(),
            d_in as isize,
            1,
            T::zero(),
            gin.as_mut_ptr(),
            d_in as isize,
            1,
        );
        // grad_weight = gout^T @ input
        T::gemm(
            d_out,
            n,
            d_in,
            T::one(),
            grad_output.data().as_ptr(),
            1,
            d_out as isize,
            input.data().as_ptr(),
            d_in as isize,
            1,
            T::zero(),
            gw.as_mut_ptr(),
            d_in as isize,
            1,
        );
    }
    let gb = if has_bias {
        let mut b = vec![T::zero(); d_out];
        for row in grad_output.data().chunks_exact(d_out) {
            for (acc, &v) in b.iter_mut().zip(row.iter()) {
                *acc += v;
            }
        }
        Some(Tensor::from_vec(vec![d_out], b)?)
    } else {
        None
    };
    Ok((
        Tensor::from_vec(vec![n, d_in], gin)?,
        Tensor::from_vec(vec![d_out, d_in], gw)?,
        gb,
    ))
}

/// Per-channel affine y = x * scale[c] + shift[c] on NCHW.
pub fn channel_affine_forward<T: Element>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(format!(
            "channel_affine: scale/shift must have shape [{c}]"
        )));
    }
    let plane = h * w;
    let src = input.data();
    let sc = scale.data();
    let sh = shift.data();
    let mut out = vec![T::zero(); src.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let (s, b) = (sc[ch], sh[ch]);
            for (o, &v) in out[base..base + plane].iter_mut().zip(&src[base..base + plane]) {
                *o = v * s + b;
            }
        }
    }
    Tensor::from_vec(input.shape().to_vec(), out)
}

/// Gradients for `channel_affine_forward`: input, scale, and shift.
pub fn channel_affine_backward<T: Element>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = input.nchw()?;
    if grad_output.shape() != input.shape() {
        return Err(Error::shape("channel_affine backward: shape mismatch".to_string()));
    }
    let plane = h * w;
    let src = input.data();
    let gout = grad_output.data();
    let sc = scale.data();
    let mut gin = vec![T::zero(); src.len()];
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let s = sc[ch];
            let mut acc_s = T::zero();
            let mut acc_b = T::zero();
            for k in base..base + plane {
                gin[k] = gout[k] * s;
                acc_s += gout[k] * src[k];
                acc_b += gout[k];
            }
            gscale[ch] += acc_s;
            gshift[ch] += acc_b;
        }
    }
    Ok((
        Tensor::from_vec(input.shape().to_vec(), gin)?,
        Tensor::from_vec(vec![c], gscale)?,
        Tensor::from_vec(vec![c], gshift)?,
    ))
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient mask for relu: passes where the forward input was positive.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_output: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = input
        .data()
        .iter()
        .zip(grad_output.data().iter())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape().to_vec(), data).expect("shape preserved")
}

pub fn sigmoid<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| {
        // Split by sign for numerical stability.
        let x = v.to_f64();
        let y = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        T::from_f64(y)
    })
}

pub fn sigmoid_backward<T: Element>(output: &Tensor<T>, grad_output: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = output
        .data()
        .iter()
        .zip(grad_output.data().iter())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Tensor::from_vec(output.shape().to_vec(), data).expect("shape preserved")
}

/// Row-wise softmax over the last axis of a 2d tensor.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::shape(format!("softmax: need 2d logits, got {s:?}"))),
    };
    let src = logits.data();
    let mut out = vec![T::zero(); n * k];
    for r in 0..n {
        let row = &src[r * k..(r + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
        let mut denom = 0.0;
        let mut exps = vec![0.0f64; k];
        for (e, &v) in exps.iter_mut().zip(row.iter()) {
            *e = (v.to_f64() - max).exp();
            denom += *e;
        }
        for (o, e) in out[r * k..(r + 1) * k].iter_mut().zip(exps.iter()) {
            *o = T::from_f64(e / denom);
        }
    }
    Tensor::from_vec(vec![n, k], out)
}

/// Mean cross-entropy of softmax(logits) against integer labels, fused with
/// its gradient: grad = (softmax - onehot) / N.
pub fn cross_entropy_mean<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::shape(format!("cross_entropy: need 2d logits, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(format!(
            "cross_entropy: {} labels for {n} rows",
            labels.len()
        )));
    }
    let probs = softmax_rows(logits)?;
    let pd = probs.data();
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); n * k];
    let inv_n = T::from_f64(1.0 / n as f64);
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::shape(format!(
                "cross_entropy: label {label} out of range for {k} classes"
            )));
        }
        let p = pd[r * k + label].to_f64().max(1e-300);
        loss -= p.ln();
        for j in 0..k {
            let indicator = if j == label { T::one() } else { T::zero() };
            grad[r * k + j] = (pd[r * k + j] - indicator) * inv_n;
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(vec![n, k], grad)?))
}

/// Mean binary cross-entropy over sigmoid(logits) against {0,1} targets,
/// fused with its gradient: grad = (sigmoid - target) / numel.
pub fn bce_with_logits_mean<T: Element>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape("bce: logits/targets shape mismatch".to_string()));
    }
    let n = logits.numel();
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); n];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let x = logits.data()[i].to_f64();
        let t = targets.data()[i].to_f64();
        // log(1+e^x) computed stably as max(x,0) + log1p(e^-|x|)
        loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        let s = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        grad[i] = T::from_f64((s - t) * inv_n);
    }
    Ok((loss * inv_n, Tensor::from_vec(logits.shape().to_vec(), grad)?))
}

/// Mean absolute error, fused with its gradient sign(a-b)/numel.
/// The subgradient at zero is taken as zero.
pub fn l1_loss_mean<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l1: shape mismatch".to_string()));
    }
    let n = a.numel();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); n];
    for i in 0..n {
        let d = a.data()[i].to_f64() - b.data()[i].to_f64();
        loss += d.abs();
        grad[i] = T::from_f64(d.signum() * inv_n * if d == 0.0 { 0.0 } else { 1.0 });
    }
    Ok((loss * inv_n, Tensor::from_vec(a.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_hand_product() {
        let x = Tensor::<f64>::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::from_vec(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![10.0, -10.0]).unwrap();
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data().to_vec(), vec![1.0 - 3.0 + 10.0, 3.0 - 10.0]);
    }

    #[test]
    fn linear_backward_shapes_and_bias_sum() {
        let x = Tensor::<f64>::from_vec(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let w = Tensor::<f64>::full(vec![4, 3], 0.5);
        let g = Tensor::<f64>::ones(vec![2, 4]);
        let (gin, gw, gb) = linear_backward(&x, &w, true, &g).unwrap();
        assert_eq!(gin.shape(), &[2, 3]);
        assert_eq!(gw.shape(), &[4, 3]);
        assert_eq!(gb.unwrap().data().to_vec(), vec![2.0; 4]);
        // Each grad-input entry is sum over outputs of w = 4 * 0.5.
        assert!(gin.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let p = softmax_rows(&l).unwrap();
        for row in p.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        // All-zero logits over 4 classes: loss = ln 4, grad rows sum to 0.
        let l = Tensor::<f64>::zeros(vec![2, 4]);
        let (loss, grad) = cross_entropy_mean(&l, &[0, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        for row in grad.data().chunks(4) {
            assert!((row.iter().sum::<f64>()).abs() < 1e-12);
        }
        assert!((grad.data()[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bce_at_zero_logit() {
        let l = Tensor::<f64>::zeros(vec![2, 1]);
        let t = Tensor::from_vec(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let (loss, grad) = bce_with_logits_mean(&l, &t).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        assert!((grad.data()[0] + 0.25).abs() < 1e-12);
        assert!((grad.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_extremes_stay_finite() {
        let l = Tensor::<f64>::from_vec(vec![1, 3], vec![-1000.0, 0.0, 1000.0]).unwrap();
        let s = sigmoid(&l);
        assert_eq!(s.data().to_vec(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn l1_gradient_is_scaled_sign() {
        let a = Tensor::<f64>::from_vec(vec![2], vec![3.0, -1.0]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![2], vec![1.0, 4.0]).unwrap();
        let (loss, grad) = l1_loss_mean(&a, &b).unwrap();
        assert!((loss - 3.5).abs() < 1e-12);
        assert_eq!(grad.data().to_vec(), vec![0.5, -0.5]);
    }
}
