use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{dims, resize};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    /// Oriented high-frequency stripes.
    Stripes,
    /// Fine-grained value noise.
    Speckle,
    /// Either of the above, drawn per anomaly.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub resolution: usize,
    /// Normal slices are rendered at `resolution * oversample` and resized.
    pub oversample: usize,
    pub n_train: usize,
    /// Normal-only split used for checkpoint selection.
    pub n_holdout: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of anomalous slices in val and test.
    pub prevalence: f64,
    /// Anomaly area as a fraction of the foreground area.
    pub anomaly_size: [f64; 2],
    pub texture: TextureFamily,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            oversample: 2,
            n_train: 2000,
            n_holdout: 200,
            n_val: 500,
            n_test: 500,
            prevalence: 0.2,
            anomaly_size: [0.08, 0.25],
            texture: TextureFamily::Mixed,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            return Err(Error::invalid(format!(
                "resolution {} must be a power of two >= 16",
                self.resolution
            )));
        }
        if self.oversample == 0 {
            return Err(Error::invalid("oversample must be >= 1"));
        }
        check_size_range(self.anomaly_size)?;
        if !(0.0..=1.0).contains(&self.prevalence) {
            return Err(Error::invalid(format!(
                "prevalence {} outside [0, 1]",
                self.prevalence
            )));
        }
        Ok(())
    }
}

fn check_size_range([lo, hi]: [f64; 2]) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi < 0.5) {
        return Err(Error::invalid(format!(
            "anomaly size range [{lo}, {hi}] must lie inside (0, 0.5)"
        )));
    }
    Ok(())
}

/// Lattice noise with smoothstep interpolation; `cells` lattice cells span
/// the unit square.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut impl Rng) -> Self {
        let n = cells + 2;
        Self {
            cells,
            lattice: (0..n * n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        }
    }

    /// `u, v` in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> f32 {
        let n = self.cells + 2;
        let gy = u * self.cells as f64;
        let gx = v * self.cells as f64;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let smooth = |t: f64| (t * t * (3.0 - 2.0 * t)) as f32;
        let (ty, tx) = (smooth(gy - y0 as f64), smooth(gx - x0 as f64));
        let l = |y: usize, x: usize| self.lattice[y.min(n - 1) * n + x.min(n - 1)];
        let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
        let bottom = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// A normal slice: textured elliptical foreground on an exactly-zero
/// background. Returns the raw image and its foreground mask.
pub fn generate_normal(config: &SynthConfig, rng: &mut impl Rng) -> Result<(Tensor, Vec<bool>)> {
    config.validate()?;
    let res = config.resolution;
    let side = res * config.oversample;
    let s = side as f64;

    let cy = s * (0.5 + rng.random_range(-0.06..0.06));
    let cx = s * (0.5 + rng.random_range(-0.06..0.06));
    let a = s * rng.random_range(0.32..0.43);
    let b = s * rng.random_range(0.32..0.43);
    let theta = rng.random_range(0.0..PI);
    let (sin_t, cos_t) = theta.sin_cos();
    let harmonics: Vec<(f64, f64, f64)> = [2.0, 3.0, 5.0]
        .into_iter()
        .map(|k| (k, rng.random_range(0.0..0.015), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let octaves = [(3, 0.18f32), (6, 0.09), (12, 0.045)]
        .map(|(cells, amp)| (ValueNoise::new(cells, rng), amp));
    let inner_depth = rng.random_range(0.2f32..0.4);
    let inner_u = rng.random_range(0.2..0.35);
    let inner_v = rng.random_range(0.1..0.2);

    let mut img = vec![0.0f32; side * side];
    let mut support = vec![0.0f32; side * side];
    for i in 0..side {
        for j in 0..side {
            let dy = i as f64 + 0.5 - cy;
            let dx = j as f64 + 0.5 - cx;
            let u = (dx * cos_t + dy * sin_t) / a;
            let v = (-dx * sin_t + dy * cos_t) / b;
            let rho = (u * u + v * v).sqrt();
            let phi = v.atan2(u);
            let edge = 1.0 + harmonics.iter().map(|(k, amp, ph)| amp * (k * phi + ph).sin()).sum::<f64>();
            if rho > edge {
                continue;
            }
            let (py, px) = ((i as f64 + 0.5) / s, (j as f64 + 0.5) / s);
            let noise: f32 = octaves.iter().map(|(n, amp)| amp * n.at(py, px)).sum();
            let inner = inner_depth
                * (-((u / inner_u).powi(2) + (v / inner_v).powi(2))).exp() as f32;
            img[i * side + j] = (1.0 + noise) * (1.0 - inner);
            support[i * side + j] = 1.0;
        }
    }

    let img = Tensor::new(vec![side, side], img)?;
    let support = Tensor::new(vec![side, side], support)?;
    let (img, support) = if side == res {
        (img, support)
    } else {
        (resize(&img, res, res)?, resize(&support, res, res)?)
    };
    let mask: Vec<bool> = support.data().iter().map(|&m| m >= 0.5).collect();
    let data = img
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Ok((Tensor::new(vec![res, res], data)?, mask))
}

/// Blends a convex textured patch into the foreground. Pixels outside the
/// returned mask are left bit-identical.
pub fn inject_anomaly(
    image: &Tensor,
    brain_mask: &[bool],
    rng: &mut impl Rng,
    size_range: [f64; 2],
    texture: TextureFamily,
) -> Result<(Tensor, Vec<bool>)> {
    let (h, w) = dims(image, "inject_anomaly")?;
    if brain_mask.len() != h * w {
        return Err(Error::shape(
            "inject_anomaly",
            format!("mask of {} pixels for a {h}x{w} image", brain_mask.len()),
        ));
    }
    check_size_range(size_range)?;
    let brain: Vec<usize> = (0..h * w).filter(|&p| brain_mask[p]).collect();
    if brain.is_empty() {
        return Err(Error::invalid("brain mask is empty"));
    }
    let frac = if size_range[0] < size_range[1] {
        rng.random_range(size_range[0]..=size_range[1])
    } else {
        size_range[0]
    };
    let target = frac * brain.len() as f64;
    if target.round() < 1.0 {
        return Err(Error::invalid(format!(
            "anomaly of {:.0}% of a {}-pixel foreground covers 0 pixels",
            frac * 100.0,
            brain.len()
        )));
    }

    let ratio = rng.random_range(0.5..1.0);
    let p = (target / (PI * ratio)).sqrt();
    let q = ratio * p;
    let psi = rng.random_range(0.0..PI);
    let (sin_p, cos_p) = psi.sin_cos();
    let inside = |cy: f64, cx: f64, i: usize, j: usize| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        let u = (dx * cos_p + dy * sin_p) / p;
        let v = (-dx * sin_p + dy * cos_p) / q;
        u * u + v * v <= 1.0
    };
    let mut best: Option<(Vec<bool>, usize)> = None;
    for _ in 0..20 {
        let centre = brain[rng.random_range(0..brain.len())];
        let (cy, cx) = ((centre / w) as f64, (centre % w) as f64);
        let mask: Vec<bool> = (0..h * w)
            .map(|k| brain_mask[k] && inside(cy, cx, k / w, k % w))
            .collect();
        let count = mask.iter().filter(|&&m| m).count();
        let good = count as f64 >= 0.8 * target;
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((mask, count));
        }
        if good {
            break;
        }
    }
    let (mask, count) = best.expect("at least one placement attempt");
    if count == 0 {
        return Err(Error::invalid("anomaly placement produced an empty patch"));
    }

    let family = match texture {
        TextureFamily::Mixed => {
            if rng.random_bool(0.5) {
                TextureFamily::Stripes
            } else {
                TextureFamily::Speckle
            }
        }
        f => f,
    };
    let pattern: Box<dyn Fn(usize, usize) -> f32> = match family {
        TextureFamily::Stripes => {
            let freq = rng.random_range(0.2..0.35);
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (sa, ca) = angle.sin_cos();
            Box::new(move |i, j| {
                (0.5 + 0.5 * (2.0 * PI * freq * (j as f64 * ca + i as f64 * sa) + phase).sin()) as f32
            })
        }
        _ => {
            let noise = ValueNoise::new(h.max(w) / 2, rng);
            let (hf, wf) = (h as f64, w as f64);
            Box::new(move |i, j| 0.5 + 0.5 * noise.at(i as f64 / hf, j as f64 / wf))
        }
    };

    let brain_mean = (brain.iter().map(|&k| image.data()[k] as f64).sum::<f64>() / brain.len() as f64)
        .max(1e-6) as f32;
    // Half the patches are dark holes, half bright textured lesions.
    let (level, contrast) = if rng.random_bool(0.5) {
        (rng.random_range(0.05f32..0.3), rng.random_range(0.3f32..0.6))
    } else {
        (rng.random_range(1.6f32..2.0), rng.random_range(0.8f32..1.2))
    };
    let (level, contrast) = (level * brain_mean, contrast * brain_mean);
    let alpha = rng.random_range(0.7f32..=1.0);

    let mut out = image.data().to_vec();
    for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let value = level + contrast * (pattern(k / w, k % w) - 0.5);
        out[k] = (1.0 - alpha) * out[k] + alpha * value;
    }
    Ok((Tensor::new(vec![h, w], out)?, mask))
}
