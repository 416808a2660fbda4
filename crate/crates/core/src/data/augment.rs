use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Random affine plus elastic deformation amplitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation drawn from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Translation per axis drawn from `±translation_px`.
    pub translation_px: f64,
    /// Isotropic scale drawn from `1 ± scale`.
    pub scale: f64,
    /// Elastic displacement amplitude in pixels (per-axis std of the field).
    pub elastic_alpha: f64,
    /// Gaussian smoothing width of the elastic field in pixels.
    pub elastic_sigma: f64,
    /// Chance that each of the affine and elastic transforms is applied.
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 10.0,
            translation_px: 3.0,
            scale: 0.1,
            elastic_alpha: 1.5,
            elastic_sigma: 4.0,
            probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            translation_px: 0.0,
            scale: 0.0,
            elastic_alpha: 0.0,
            elastic_sigma: 0.0,
            probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let amps = [self.rotation_deg, self.translation_px, self.scale, self.elastic_alpha, self.elastic_sigma];
        if amps.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Config(format!("augmentation amplitudes must be finite and >= 0: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.probability) || self.scale >= 1.0 {
            return Err(Error::Config(format!("augmentation probability must be in [0, 1] and scale < 1: {self:?}")));
        }
        Ok(())
    }

    fn has_affine(&self) -> bool {
        self.rotation_deg > 0.0 || self.translation_px > 0.0 || self.scale > 0.0
    }

    fn has_elastic(&self) -> bool {
        self.elastic_alpha > 0.0
    }
}

/// Applies one random affine + elastic draw, seeded by `(seed, sample.id)`.
///
/// The image is resampled bilinearly (zero outside), the mask by nearest
/// neighbour so it stays binary.
pub fn augment_sample(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<Sample> {
    cfg.validate()?;
    sample.validate()?;
    let (h, w) = (sample.height(), sample.width());
    let mut rng = rng::stream(seed, "augment", &sample.id);

    // Every variate is drawn unconditionally so the stream layout is fixed.
    let use_affine = rng.random::<f64>() < cfg.probability && cfg.has_affine();
    let angle = cfg.rotation_deg.to_radians() * rng.random_range(-1.0..=1.0);
    let shift = (cfg.translation_px * rng.random_range(-1.0..=1.0), cfg.translation_px * rng.random_range(-1.0..=1.0));
    let zoom = 1.0 + cfg.scale * rng.random_range(-1.0..=1.0);
    let use_elastic = rng.random::<f64>() < cfg.probability && cfg.has_elastic();

    if !use_affine && !use_elastic {
        return Ok(sample.clone());
    }
    let field = if use_elastic {
        let mut dy: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
        let mut dx: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
        if cfg.elastic_sigma > 0.0 {
            dy = gaussian_blur(&dy, h, w, cfg.elastic_sigma);
            dx = gaussian_blur(&dx, h, w, cfg.elastic_sigma);
        }
        let rms = (dy.iter().chain(&dx).map(|v| v * v).sum::<f64>() / (2 * h * w) as f64).sqrt().max(1e-12);
        let k = cfg.elastic_alpha / rms;
        dy.iter_mut().chain(dx.iter_mut()).for_each(|v| *v *= k);
        Some((dy, dx))
    } else {
        None
    };

    let (angle, shift, zoom) = if use_affine { (angle, shift, zoom) } else { (0.0, (0.0, 0.0), 1.0) };
    let (sin, cos) = angle.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let img = sample.image.data();
    let msk = sample.mask.data();
    let mut out_img = vec![0.0f32; h * w];
    let mut out_msk = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            // Inverse map: output pixel -> source coordinate.
            let (py, px) = (y as f64 - cy - shift.0, x as f64 - cx - shift.1);
            let mut sy = (cos * py - sin * px) / zoom + cy;
            let mut sx = (sin * py + cos * px) / zoom + cx;
            if let Some((dy, dx)) = &field {
                sy += dy[i];
                sx += dx[i];
            }
            out_img[i] = bilinear(img, h, w, sy, sx);
            out_msk[i] = nearest(msk, h, w, sy, sx);
        }
    }
    let shape = sample.image.shape();
    Ok(Sample {
        id: sample.id.clone(),
        phantom_id: sample.phantom_id.clone(),
        contrast: sample.contrast.clone(),
        image: Tensor::new(shape, out_img).expect("same shape"),
        mask: Tensor::new(shape, out_msk).expect("same shape"),
    })
}

pub(crate) fn bilinear(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            src[yy as usize * w + xx as usize] as f64
        }
    };
    let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
    v.clamp(0.0, 1.0) as f32
}

pub(crate) fn nearest(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (yy, xx) = (y.round(), x.round());
    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
        0.0
    } else {
        src[yy as usize * w + xx as usize]
    }
}

/// Separable Gaussian blur, kernel truncated at `3 sigma`, edges replicated.
pub(crate) fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * src[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}
