//! Spatial transforms on NCHW tensors: cyclic roll, bilinear resampling,
//! Gaussian blur, and pooling.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Cyclic shift along H and W. Positive offsets move content toward larger
/// indices; the map is a bijection, so its adjoint is the inverse roll.
pub fn roll2d<T: Element>(input: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    let dy = dy.rem_euclid(h as isize) as usize;
    let dx = dx.rem_euclid(w as isize) as usize;
    if dy == 0 && dx == 0 {
        return Ok(input.clone());
    }
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    let plane = h * w;
    for p in 0..n * c {
        let sp = &src[p * plane..(p + 1) * plane];
        let dp = &mut out[p * plane..(p + 1) * plane];
        for y in 0..h {
            let ty = (y + dy) % h;
            let drow = &mut dp[ty * w..(ty + 1) * w];
            let srow = &sp[y * w..(y + 1) * w];
            // Split the rotated row copy into its two contiguous runs.
            drow[dx..].copy_from_slice(&srow[..w - dx]);
            drow[..dx].copy_from_slice(&srow[w - dx..]);
        }
    }
    Tensor::from_vec(input.shape().to_vec(), out)
}

/// Bilinear resize with the half-pixel ("align corners false") source
/// mapping: src = (dst + 0.5) * in/out - 0.5, clamped at the borders.
pub fn bilinear_resize<T: Element>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize: empty output".to_string()));
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    // Precompute per-axis taps: (low index, high index, high weight).
    let taps = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|d| {
                let s = (d as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
                let s = s.clamp(0.0, (in_len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = input.data();
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    let in_plane = h * w;
    let out_plane = out_h * out_w;
    for p in 0..n * c {
        let sp = &src[p * in_plane..(p + 1) * in_plane];
        let dp = &mut out[p * out_plane..(p + 1) * out_plane];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &sp[y0 * w..y0 * w + w];
            let r1 = &sp[y1 * w..y1 * w + w];
            let drow = &mut dp[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0].to_f64() * (1.0 - fx) + r0[x1].to_f64() * fx;
                let bot = r1[x0].to_f64() * (1.0 - fx) + r1[x1].to_f64() * fx;
                drow[ox] = T::from_f64(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec(vec![n, c, out_h, out_w], out)
}

/// Halve even spatial extents. With the half-pixel mapping and an exact
/// factor of two, every output pixel is the mean of one 2x2 block, so this
/// is written as the block mean directly.
pub fn bilinear_down2x<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "bilinear_down2x: spatial extents {h}x{w} must be even"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let src = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let in_plane = h * w;
    let out_plane = oh * ow;
    for p in 0..n * c {
        let sp = &src[p * in_plane..(p + 1) * in_plane];
        let dp = &mut out[p * out_plane..(p + 1) * out_plane];
        for oy in 0..oh {
            let r0 = &sp[2 * oy * w..2 * oy * w + w];
            let r1 = &sp[(2 * oy + 1) * w..(2 * oy + 1) * w + w];
            let drow = &mut dp[oy * ow..(oy + 1) * ow];
            for ox in 0..ow {
                drow[ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], out)
}

/// Adjoint of `bilinear_down2x`: spread each output gradient evenly over its
/// 2x2 block.
pub fn bilinear_down2x_backward<T: Element>(
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad_output.nchw()?;
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::from_f64(0.25);
    let src = grad_output.data();
    let mut out = vec![T::zero(); n * c * h * w];
    let in_plane = oh * ow;
    let out_plane = h * w;
    for p in 0..n * c {
        let sp = &src[p * in_plane..(p + 1) * in_plane];
        let dp = &mut out[p * out_plane..(p + 1) * out_plane];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = sp[oy * ow + ox] * quarter;
                dp[2 * oy * w + 2 * ox] = v;
                dp[2 * oy * w + 2 * ox + 1] = v;
                dp[(2 * oy + 1) * w + 2 * ox] = v;
                dp[(2 * oy + 1) * w + 2 * ox + 1] = v;
            }
        }
    }
    Tensor::from_vec(vec![n, c, h, w], out)
}

/// Normalized 1D Gaussian taps for a centered odd-length kernel.
fn gaussian_taps(ksize: usize, sigma: f64) -> Vec<f64> {
    assert!(ksize % 2 == 1, "blur kernel must have odd length");
    let half = (ksize / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Mirror index without repeating the edge sample (reflect-101):
/// for len 4, positions -2..6 read 2,1,0,1,2,3,2,1.
fn reflect101(i: isize, len: usize) -> usize {
    let len = len as isize;
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut i = i.rem_euclid(period);
    if i >= len {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with reflect-101 border handling.
pub fn gaussian_blur2d<T: Element>(
    input: &Tensor<T>,
    ksize: usize,
    sigma: f64,
) -> Result<Tensor<T>> {
    if ksize % 2 == 0 || ksize == 0 {
        return Err(Error::config(format!(
            "gaussian_blur2d: kernel size {ksize} must be odd"
        )));
    }
    let (n, c, h, w) = input.nchw()?;
    let taps = gaussian_taps(ksize, sigma);
    let half = (ksize / 2) as isize;
    let src = input.data();
    let plane = h * w;
    let mut tmp = vec![0.0f64; plane];
    let mut out = vec![T::zero(); src.len()];
    for p in 0..n * c {
        let sp = &src[p * plane..(p + 1) * plane];
        // Horizontal pass into f64 scratch.
        for y in 0..h {
            let row = &sp[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &tv) in taps.iter().enumerate() {
                    let sx = reflect101(x as isize + t as isize - half, w);
                    acc += row[sx].to_f64() * tv;
                }
                tmp[y * w + x] = acc;
            }
        }
        // Vertical pass.
        let dp = &mut out[p * plane..(p + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &tv) in taps.iter().enumerate() {
                    let sy = reflect101(y as isize + t as isize - half, h);
                    acc += tmp[sy * w + x] * tv;
                }
                dp[y * w + x] = T::from_f64(acc);
            }
        }
    }
    Tensor::from_vec(input.shape().to_vec(), out)
}

/// 2x2 stride-2 max pooling. Returns the pooled tensor and the flat index
/// (within each NC plane) of every winner, for routing gradients back.
pub fn max_pool2x<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = input.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "max_pool2x: spatial extents {h}x{w} must be even"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let in_plane = h * w;
    let out_plane = oh * ow;
    let mut out = vec![T::zero(); n * c * out_plane];
    let mut argmax = vec![0u32; n * c * out_plane];
    for p in 0..n * c {
        let sp = &src[p * in_plane..(p + 1) * in_plane];
        for oy in 0..oh {
            for ox in 0..ow {
                // Ties resolve to the first candidate in row-major order.
                let candidates = [
                    2 * oy * w + 2 * ox,
                    2 * oy * w + 2 * ox + 1,
                    (2 * oy + 1) * w + 2 * ox,
                    (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if sp[idx] > sp[best] {
                        best = idx;
                    }
                }
                out[p * out_plane + oy * ow + ox] = sp[best];
                argmax[p * out_plane + oy * ow + ox] = best as u32;
            }
        }
    }
    Ok((Tensor::from_vec(vec![n, c, oh, ow], out)?, argmax))
}

/// Scatter pooled gradients back to the winning positions.
pub fn max_pool2x_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = {
        let t = Tensor::<T>::zeros(input_shape.to_vec());
        t.nchw()?
    };
    let (gn, gc, oh, ow) = grad_output.nchw()?;
    if gn != n || gc != c || oh != h / 2 || ow != w / 2 {
        return Err(Error::shape(
            "max_pool2x backward: gradient shape mismatch".to_string(),
        ));
    }
    let in_plane = h * w;
    let out_plane = oh * ow;
    let mut out = vec![T::zero(); n * c * in_plane];
    let gsrc = grad_output.data();
    for p in 0..n * c {
        for i in 0..out_plane {
            out[p * in_plane + argmax[p * out_plane + i] as usize] += gsrc[p * out_plane + i];
        }
    }
    Tensor::from_vec(input_shape.to_vec(), out)
}

/// Mean over spatial positions: NCHW -> NC.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let src = input.data();
    let mut out = vec![T::zero(); n * c];
    for (p, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for &v in &src[p * plane..(p + 1) * plane] {
            acc += v;
        }
        *o = acc * inv;
    }
    Tensor::from_vec(vec![n, c], out)
}

/// Adjoint of `global_avg_pool`: broadcast grad/(H*W) over each plane.
pub fn global_avg_pool_backward<T: Element>(
    input_shape: &[usize],
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    if input_shape.len() != 4 {
        return Err(Error::shape("global_avg_pool backward: need NCHW".to_string()));
    }
    let plane = input_shape[2] * input_shape[3];
    let inv = T::from_f64(1.0 / plane as f64);
    let gsrc = grad_output.data();
    if gsrc.len() != input_shape[0] * input_shape[1] {
        return Err(Error::shape(
            "global_avg_pool backward: gradient shape mismatch".to_string(),
        ));
    }
    let mut out = vec![T::zero(); input_shape.iter().product()];
    for p in 0..gsrc.len() {
        let v = gsrc[p] * inv;
        out[p * plane..(p + 1) * plane].fill(v);
    }
    Tensor::from_vec(input_shape.to_vec(), out)
}
