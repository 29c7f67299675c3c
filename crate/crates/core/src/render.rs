//! Image emission: 8-bit binary PGM, a signed blue-white-red PNG
//! colormap, and alpha-blended overlays on de-normalized inputs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn plane<T: Element>(map: &Tensor<T>) -> Result<(usize, usize)> {
    match map.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::shape(format!("expected an [h,w] map, got {s:?}"))),
    }
}

/// Min-max normalize to 0..=255. A flat map renders mid-gray so a nulled
/// gradient shows up as the uniform image it is, not as black.
pub fn gray_levels<T: Element>(map: &Tensor<T>) -> Result<Vec<u8>> {
    plane(map)?;
    let lo = map.data().iter().map(|&v| v.to_f64()).fold(f64::MAX, f64::min);
    let hi = map.data().iter().map(|&v| v.to_f64()).fold(f64::MIN, f64::max);
    if hi - lo < 1e-12 {
        return Ok(vec![128; map.numel()]);
    }
    Ok(map
        .data()
        .iter()
        .map(|&v| ((v.to_f64() - lo) / (hi - lo) * 255.0).round() as u8)
        .collect())
}

pub fn write_pgm<T: Element>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let (h, w) = plane(map)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(gray_levels(map)?);
    fs::write(path, out)?;
    Ok(())
}

/// Signed colormap, symmetric around zero: negative values ramp toward
/// blue, positives toward red, zero stays white. Returns packed RGB rows.
pub fn signed_rgb<T: Element>(map: &Tensor<T>) -> Result<Vec<u8>> {
    plane(map)?;
    let scale = map.data().iter().map(|&v| v.to_f64().abs()).fold(0.0, f64::max);
    let mut out = Vec::with_capacity(map.numel() * 3);
    for &v in map.data() {
        let t = if scale < 1e-12 { 0.0 } else { v.to_f64() / scale };
        let fade = (255.0 * (1.0 - t.abs())).round() as u8;
        if t >= 0.0 {
            out.extend_from_slice(&[255, fade, fade]);
        } else {
            out.extend_from_slice(&[fade, fade, 255]);
        }
    }
    Ok(out)
}

fn save_rgb(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    image::save_buffer(path, rgb, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::format(format!("png write {path:?}: {e}")))
}

pub fn write_signed_png<T: Element>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let (h, w) = plane(map)?;
    save_rgb(path, &signed_rgb(map)?, w, h)
}

/// Blend the colormapped saliency over a display-space image (values in
/// 0..=1, one or three channels): alpha 0 shows the image, 1 the map.
pub fn overlay_rgb<T: Element>(
    image: &Tensor<f64>,
    map: &Tensor<T>,
    alpha: f64,
) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::usage(format!("alpha {alpha} outside 0..=1")));
    }
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("expected a [C,H,W] image, got {s:?}"))),
    };
    if !(c == 1 || c == 3) {
        return Err(Error::shape(format!("overlay needs 1 or 3 channels, got {c}")));
    }
    if map.shape() != [h, w] {
        return Err(Error::shape(format!(
            "map {:?} does not match the {h}x{w} image",
            map.shape()
        )));
    }
    let heat = signed_rgb(map)?;
    let pix = h * w;
    let mut out = Vec::with_capacity(pix * 3);
    for i in 0..pix {
        for ch in 0..3 {
            let base = image.data()[if c == 1 { i } else { ch * pix + i }].clamp(0.0, 1.0);
            let v = (1.0 - alpha) * base * 255.0 + alpha * heat[i * 3 + ch] as f64;
            out.push(v.round() as u8);
        }
    }
    Ok(out)
}

pub fn write_overlay_png<T: Element>(
    path: &Path,
    image: &Tensor<f64>,
    map: &Tensor<T>,
    alpha: f64,
) -> Result<()> {
    let rgb = overlay_rgb(image, map, alpha)?;
    let (h, w) = plane(map)?;
    save_rgb(path, &rgb, w, h)
}
