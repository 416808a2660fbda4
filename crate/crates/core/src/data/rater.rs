use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::nearest;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Strength and ranges of the simulated-rater mask perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaterPerturbConfig {
    /// Overall strength in `[0, 1]`; every amplitude below is scaled by it.
    pub strength: f64,
    /// Largest structuring-disk radius at full strength.
    pub max_radius: usize,
    pub max_translation_px: f64,
    pub max_rotation_deg: f64,
}

impl Default for RaterPerturbConfig {
    fn default() -> Self {
        RaterPerturbConfig { strength: 0.0, max_radius: 3, max_translation_px: 2.0, max_rotation_deg: 10.0 }
    }
}

impl RaterPerturbConfig {
    pub fn with_strength(self, strength: f64) -> Self {
        RaterPerturbConfig { strength, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!("rater strength {} outside [0, 1]", self.strength)));
        }
        if !(self.max_translation_px >= 0.0 && self.max_rotation_deg >= 0.0) {
            return Err(Error::Config("rater jitter amplitudes must be >= 0".into()));
        }
        Ok(())
    }
}

fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    offsets
}

fn morph(mask: &Tensor<f32>, radius: usize, dilation: bool) -> Result<Tensor<f32>> {
    let shape = mask.shape();
    if shape.len() < 2 {
        return Err(Error::Validation(format!("mask of shape {shape:?} is not an image")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let src = mask.data();
    if src.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("mask is not binary".into()));
    }
    if radius == 0 {
        return Ok(mask.clone());
    }
    let offsets = disk(radius);
    let mut out = vec![0.0f32; src.len()];
    for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h as isize {
            for x in 0..w as isize {
                // Pixels outside the image count as background.
                let hit = |&(dy, dx): &(isize, isize)| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && plane[(yy * w as isize + xx) as usize] == 1.0
                };
                let on = if dilation { offsets.iter().any(hit) } else { offsets.iter().all(hit) };
                dst[(y * w as isize + x) as usize] = if on { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(Tensor::new(shape, out).expect("same shape"))
}

/// Binary dilation by a disk of integer `radius`.
pub fn dilate(mask: &Tensor<f32>, radius: usize) -> Result<Tensor<f32>> {
    morph(mask, radius, true)
}

/// Binary erosion by a disk of integer `radius`.
pub fn erode(mask: &Tensor<f32>, radius: usize) -> Result<Tensor<f32>> {
    morph(mask, radius, false)
}

/// One simulated rater: dilate or erode by a disk of radius
/// `round(s * max_radius * u)`, then rotate and translate by up to
/// `s * max` about the mask centroid (nearest neighbour). Deterministic in `seed`.
pub fn perturb_ground_truth(mask: &Tensor<f32>, seed: u64, cfg: &RaterPerturbConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "rater", "perturb");
    let s = cfg.strength;
    let radius = (s * cfg.max_radius as f64 * rng.random::<f64>()).round() as usize;
    let grow = rng.random_bool(0.5);
    let angle = (s * cfg.max_rotation_deg * rng.random_range(-1.0..=1.0)).to_radians();
    let ty = s * cfg.max_translation_px * rng.random_range(-1.0..=1.0);
    let tx = s * cfg.max_translation_px * rng.random_range(-1.0..=1.0);

    let morphed = morph(mask, radius, grow)?;
    if s == 0.0 {
        return Ok(morphed);
    }
    let shape = morphed.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let src = morphed.data();
    let mut out = vec![0.0f32; src.len()];
    let (sin, cos) = angle.sin_cos();
    for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(h * w)) {
        let (mut cy, mut cx, mut n) = (0.0, 0.0, 0.0);
        for (i, &v) in plane.iter().enumerate() {
            if v == 1.0 {
                cy += (i / w) as f64;
                cx += (i % w) as f64;
                n += 1.0;
            }
        }
        if n == 0.0 {
            continue;
        }
        let (cy, cx) = (cy / n, cx / n);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 - cy - ty, x as f64 - cx - tx);
                let sy = cos * py - sin * px + cy;
                let sx = sin * py + cos * px + cx;
                dst[y * w + x] = nearest(plane, h, w, sy, sx);
            }
        }
    }
    Ok(Tensor::new(shape, out).expect("same shape"))
}
