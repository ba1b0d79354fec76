//! Random views for contrastive and VAE training.
//!
//! Geometric transforms (crop, scale, mirror, rotation) are composed into a
//! single inverse map and resampled once with bilinear interpolation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::image::{dims, sample_bilinear};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Crop area as a fraction of the image; `None` disables cropping.
    pub crop_area: Option<[f64; 2]>,
    pub scale: [f64; 2],
    /// Per-axis flip probability.
    pub mirror_prob: f64,
    pub rotation_deg: [f64; 2],
    pub brightness: [f64; 2],
    pub noise_sigma: [f64; 2],
    /// Cutout area fraction for the restoration term; `None` disables it.
    pub cutout_area: Option<[f64; 2]>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::simclr()
    }
}

impl AugmentationPolicy {
    pub fn simclr() -> Self {
        Self {
            crop_area: Some([0.6, 1.0]),
            scale: [0.85, 1.15],
            mirror_prob: 0.5,
            rotation_deg: [-20.0, 20.0],
            brightness: [0.9, 1.1],
            noise_sigma: [0.0, 0.1],
            cutout_area: None,
        }
    }

    pub fn vae() -> Self {
        Self {
            crop_area: None,
            ..Self::simclr()
        }
    }

    pub fn cevae() -> Self {
        Self {
            cutout_area: Some([0.02, 0.2]),
            ..Self::vae()
        }
    }

    /// Every transform collapsed to the identity.
    pub fn identity() -> Self {
        Self {
            crop_area: None,
            scale: [1.0, 1.0],
            mirror_prob: 0.0,
            rotation_deg: [0.0, 0.0],
            brightness: [1.0, 1.0],
            noise_sigma: [0.0, 0.0],
            cutout_area: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, [lo, hi]: [f64; 2]| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} range [{lo}, {hi}] is empty")))
            }
        };
        if let Some(c) = self.crop_area {
            range("crop_area", c)?;
            if c[0] <= 0.0 || c[1] > 1.0 {
                return Err(Error::invalid("crop_area must lie in (0, 1]"));
            }
        }
        range("scale", self.scale)?;
        if self.scale[0] <= 0.0 {
            return Err(Error::invalid("scale must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::invalid("mirror_prob must lie in [0, 1]"));
        }
        range("rotation_deg", self.rotation_deg)?;
        range("brightness", self.brightness)?;
        range("noise_sigma", self.noise_sigma)?;
        if self.noise_sigma[0] < 0.0 {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if let Some(c) = self.cutout_area {
            check_cutout_range(c)?;
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Composite inverse map from output to source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Warp {
    crop_frac: f64,
    crop_centre: (f64, f64),
    scale: f64,
    flip_y: bool,
    flip_x: bool,
    angle: f64,
}

impl Warp {
    fn is_identity(&self, h: usize, w: usize) -> bool {
        self.crop_frac == 1.0
            && self.crop_centre == ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
            && self.scale == 1.0
            && !self.flip_y
            && !self.flip_x
            && self.angle == 0.0
    }

    fn apply(&self, img: &[f32], h: usize, w: usize, fill: f32) -> Vec<f32> {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin_a, cos_a) = self.angle.sin_cos();
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (u, v) = (i as f64 - cy, j as f64 - cx);
                // undo rotation
                let (mut y, mut x) = (cos_a * u + sin_a * v, -sin_a * u + cos_a * v);
                if self.flip_y {
                    y = -y;
                }
                if self.flip_x {
                    x = -x;
                }
                y /= self.scale;
                x /= self.scale;
                let sy = self.crop_centre.0 + y * self.crop_frac;
                let sx = self.crop_centre.1 + x * self.crop_frac;
                out.push(sample_bilinear(img, h, w, sy, sx, fill));
            }
        }
        out
    }
}

fn square(image: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (h, w) = dims(image, op)?;
    if h != w {
        return Err(Error::shape(op, format!("expected a square image, got {h}x{w}")));
    }
    Ok((h, w))
}

/// Value used for pixels that map outside the frame: the top-left corner,
/// which is background for every generated slice.
fn fill_value(image: &Tensor) -> f32 {
    image.data().first().copied().unwrap_or(0.0)
}

/// Rotates about the image centre by `degrees`.
pub fn rotate(image: &Tensor, degrees: f64) -> Result<Tensor> {
    let (h, w) = dims(image, "rotate")?;
    let warp = Warp {
        crop_frac: 1.0,
        crop_centre: ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0),
        scale: 1.0,
        flip_y: false,
        flip_x: false,
        angle: degrees.to_radians(),
    };
    Tensor::new(vec![h, w], warp.apply(image.data(), h, w, fill_value(image)))
}

/// One random view: crop, scale, mirror, rotate, brightness, noise.
pub fn sample_view(image: &Tensor, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Result<Tensor> {
    let (h, w) = square(image, "sample_view")?;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);

    let (crop_frac, crop_centre) = match policy.crop_area {
        Some(range) => {
            let frac = draw(rng, range).sqrt();
            let half = (1.0 - frac) * cy;
            let dy = if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
            let dx = if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
            (frac, (cy + dy, cx + dx))
        }
        None => (1.0, (cy, cx)),
    };
    let warp = Warp {
        crop_frac,
        crop_centre,
        scale: draw(rng, policy.scale),
        flip_y: rng.random_bool(policy.mirror_prob),
        flip_x: rng.random_bool(policy.mirror_prob),
        angle: draw(rng, policy.rotation_deg).to_radians(),
    };
    let brightness = draw(rng, policy.brightness) as f32;
    let sigma = draw(rng, policy.noise_sigma);

    let mut out = if warp.is_identity(h, w) {
        image.data().to_vec()
    } else {
        warp.apply(image.data(), h, w, fill_value(image))
    };
    if brightness != 1.0 {
        out.iter_mut().for_each(|v| *v *= brightness);
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        out.iter_mut().for_each(|v| *v += normal.sample(rng) as f32);
    }
    Tensor::new(vec![h, w], out)
}

/// Axis-aligned rectangle in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.y && i < self.y + self.h && j >= self.x && j < self.x + self.w
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

fn check_cutout_range([lo, hi]: [f64; 2]) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::invalid(format!(
            "cutout area range [{lo}, {hi}] must lie inside (0, 1)"
        )));
    }
    Ok(())
}

/// Zeroes one random rectangle whose area fraction lies in `area_range`.
pub fn cutout(image: &Tensor, rng: &mut impl Rng, area_range: [f64; 2]) -> Result<(Tensor, Rect)> {
    let (h, w) = dims(image, "cutout")?;
    check_cutout_range(area_range)?;
    let total = (h * w) as f64;
    let (lo, hi) = (area_range[0] * total, area_range[1] * total);
    let target = draw(rng, area_range) * total;
    let aspect = rng.random_range(0.5f64..2.0);
    let rh = ((target * aspect).sqrt().round() as usize).clamp(1, h);
    let mut rw = ((target / rh as f64).round() as usize).clamp(1, w);
    if ((rh * rw) as f64) < lo {
        rw = ((lo / rh as f64).ceil() as usize).min(w);
    }
    if ((rh * rw) as f64) > hi {
        rw = ((hi / rh as f64).floor() as usize).max(1);
    }
    let area = (rh * rw) as f64;
    if area < lo || area > hi {
        return Err(Error::invalid(format!(
            "no rectangle in a {h}x{w} image has area fraction in [{}, {}]",
            area_range[0], area_range[1]
        )));
    }
    let rect = Rect {
        y: rng.random_range(0..=h - rh),
        x: rng.random_range(0..=w - rw),
        h: rh,
        w: rw,
    };
    let mut out = image.clone();
    for i in rect.y..rect.y + rect.h {
        out.data_mut()[i * w + rect.x..i * w + rect.x + rect.w].fill(0.0);
    }
    Ok((out, rect))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(side: usize) -> Tensor {
        let c = (side as f32 - 1.0) / 2.0;
        Tensor::from_fn(&[side, side], |k| {
            let (i, j) = ((k / side) as f32 - c, (k % side) as f32 - c);
            (-(i * i + j * j) / (0.1 * (side * side) as f32)).exp()
        })
    }

    #[test]
    fn identity_policy_is_exact() {
        let img = blob(32);
        let out = sample_view(&img, &AugmentationPolicy::identity(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn same_rng_same_view() {
        let img = blob(32);
        let p = AugmentationPolicy::simclr();
        let a = sample_view(&img, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_view(&img, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn brightness_scales_exactly() {
        let img = blob(16);
        let p = AugmentationPolicy {
            brightness: [1.07, 1.07],
            ..AugmentationPolicy::identity()
        };
        let out = sample_view(&img, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let m = 1.07f64 as f32;
        assert!(out.data().iter().zip(img.data()).all(|(&o, &v)| o == v * m));
    }

    #[test]
    fn cutout_examples() {
        let img = blob(32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (out, r) = cutout(&img, &mut rng, [0.02, 0.2]).unwrap();
            let frac = r.area() as f64 / 1024.0;
            assert!((0.02..=0.2).contains(&frac), "{frac}");
            for k in 0..1024 {
                if r.contains(k / 32, k % 32) {
                    assert_eq!(out.data()[k], 0.0);
                } else {
                    assert_eq!(out.data()[k], img.data()[k]);
                }
            }
        }
        assert!(cutout(&img, &mut rng, [0.0, 0.1]).is_err());
    }

    #[test]
    fn presets_validate() {
        for p in [
            AugmentationPolicy::simclr(),
            AugmentationPolicy::vae(),
            AugmentationPolicy::cevae(),
            AugmentationPolicy::identity(),
        ] {
            p.validate().unwrap();
        }
        assert!(AugmentationPolicy::vae().crop_area.is_none());
        assert!(AugmentationPolicy::cevae().cutout_area.is_some());
    }
}
