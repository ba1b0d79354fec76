//! Single-channel `(H, W)` image helpers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLIP: f32 = 1.5;

pub(crate) fn dims(img: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w] => Ok((*h, *w)),
        other => Err(Error::shape(op, format!("expected (H, W) image, got {other:?}"))),
    }
}

/// Bilinear value at continuous pixel coordinates; neighbors outside the
/// frame read as `fill`.
pub fn sample_bilinear(img: &[f32], h: usize, w: usize, y: f64, x: f64, fill: f32) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            fill
        } else {
            img[yy as usize * w + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize with corners aligned to pixel centers.
pub fn resize(img: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (h, w) = dims(img, "resize")?;
    if h_out < 2 || w_out < 2 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "resize {h}x{w} -> {h_out}x{w_out}: target sides must be >= 2"
        )));
    }
    if (h, w) == (h_out, w_out) {
        return Ok(img.clone());
    }
    let sy = (h - 1) as f64 / (h_out - 1) as f64;
    let sx = (w - 1) as f64 / (w_out - 1) as f64;
    let src = img.data();
    let mut out = Vec::with_capacity(h_out * w_out);
    for i in 0..h_out {
        let y = (i as f64 * sy).min((h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (y - y0 as f64) as f32;
        for j in 0..w_out {
            let x = (j as f64 * sx).min((w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (x - x0 as f64) as f32;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![h_out, w_out], out)
}

/// Per-image z-score, before clipping.
pub fn zscore(raw: &Tensor) -> Result<Tensor> {
    let n = raw.len() as f64;
    if n == 0.0 {
        return Err(Error::invalid("cannot normalize an empty image"));
    }
    let mean = raw.sum() / n;
    let var = raw
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::invalid("image has zero standard deviation"));
    }
    Ok(raw.map(|v| ((v as f64 - mean) / std) as f32))
}

/// Per-image z-score followed by clipping to `[-1.5, 1.5]`.
pub fn preprocess(raw: &Tensor) -> Result<Tensor> {
    Ok(zscore(raw)?.map(|v| v.clamp(-CLIP, CLIP)))
}
