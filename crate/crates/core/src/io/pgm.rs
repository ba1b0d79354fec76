use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Percentile at which heatmaps are clamped before normalization.
pub const CLAMP_PERCENTILE: f64 = 0.99;

/// Nearest-rank percentile of a non-empty slice.
pub fn percentile(values: &[f32], q: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Clamps at the 99th percentile and min-max normalizes to `0..=255`.
/// A map with no dynamic range becomes all zeros.
pub fn heatmap_to_gray(map: &[f32]) -> Result<Vec<u8>> {
    if map.is_empty() {
        return Ok(Vec::new());
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "heatmap for export".into(),
        });
    }
    let hi = percentile(map, CLAMP_PERCENTILE);
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    if hi <= lo {
        return Ok(vec![0; map.len()]);
    }
    let range = (hi - lo) as f64;
    Ok(map
        .iter()
        .map(|&v| ((v.min(hi) - lo) as f64 / range * 255.0).round() as u8)
        .collect())
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape(
            "pgm",
            format!("{width}x{height} image with {} pixels", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Writes an `(H, W)` heatmap as a binary 8-bit PGM.
pub fn export_heatmap_image(heatmap: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = match heatmap.shape() {
        [h, w] => (*h, *w),
        [1, h, w] | [1, 1, h, w] => (*h, *w),
        other => {
            return Err(Error::shape("export_heatmap_image", format!("expected (H, W), got {other:?}")))
        }
    };
    let bytes = encode_pgm(w, h, &heatmap_to_gray(heatmap.data())?)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
