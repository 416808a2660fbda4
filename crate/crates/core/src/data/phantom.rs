use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{PhantomMode, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Side of the generated phantom slice.
pub const NATIVE_SIZE: usize = 64;
/// Side of the ROI window fed to the network.
pub const CROP_SIZE: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl Ellipse {
    /// Normalized radius of `(x, y)`; `<= 1` means inside.
    pub fn radius_at(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        (u * u + v * v).sqrt()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.radius_at(x, y) <= 1.0
    }

    /// Point at normalized polar position `(r, theta)`.
    fn point(&self, r: f64, theta: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (r * theta.cos() * self.rx, r * theta.sin() * self.ry);
        (self.cx + c * u - s * v, self.cy + s * u + c * v)
    }
}

/// An elliptical blob inside the cord: a lesion (in the mask) or a
/// non-lesion mimic of opposite polarity (contrast-flip mode only).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub shape: Ellipse,
    pub lesion: bool,
}

/// Everything needed to render one phantom slice deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub phantom_id: String,
    pub sample_id: String,
    pub contrast: String,
    pub contrast_index: usize,
    pub mode: PhantomMode,
    pub cord: Ellipse,
    pub blobs: Vec<Blob>,
    pub background: f64,
    pub cord_level: f64,
    pub lesion_level: f64,
    pub mimic_level: f64,
    /// Standard deviation of the white noise.
    pub noise: f64,
    /// Amplitude of the smooth tissue texture.
    pub grain: f64,
}

const LESION_RADIUS: (f64, f64) = (2.5, 4.5);
const MAX_BLOBS_PER_KIND: usize = 3;
/// Width of the imaging point-spread function in pixels.
const PSF_SIGMA: f64 = 0.8;

impl PhantomSpec {
    /// Draws slice `slice` of phantom `phantom`.
    ///
    /// Cord geometry and blob layout are shared by all slices of a phantom;
    /// each slice jitters blob positions and sizes and gets its own noise.
    pub fn draw(seed: u64, phantom: usize, slice: usize, contrast: &str, contrast_index: usize, mode: PhantomMode) -> Self {
        let phantom_id = format!("p{phantom:04}");
        let sample_id = format!("{phantom_id}_s{slice}");
        let mut prng = rng::stream(seed, "phantom", &phantom_id);
        let cord = Ellipse {
            cx: 31.5 + prng.random_range(-6.0..6.0),
            cy: 31.5 + prng.random_range(-6.0..6.0),
            rx: prng.random_range(11.0..15.0),
            ry: prng.random_range(8.0..11.0),
            angle: prng.random_range(-0.4..0.4),
        };
        let lesions = prng.random_range(0..=MAX_BLOBS_PER_KIND);
        let mimics = match mode {
            PhantomMode::Natural => 0,
            PhantomMode::ContrastFlip => prng.random_range(0..=MAX_BLOBS_PER_KIND),
        };
        let mut shapes: Vec<Ellipse> = Vec::new();
        for _ in 0..lesions + mimics {
            for _attempt in 0..30 {
                let (x, y) = cord.point(prng.random_range(0.0f64..1.0).sqrt() * 0.65, prng.random_range(0.0..std::f64::consts::TAU));
                let candidate = Ellipse {
                    cx: x,
                    cy: y,
                    rx: prng.random_range(LESION_RADIUS.0..LESION_RADIUS.1),
                    ry: prng.random_range(LESION_RADIUS.0..LESION_RADIUS.1),
                    angle: prng.random_range(0.0..std::f64::consts::PI),
                };
                let clear = shapes.iter().all(|s| {
                    let d = ((s.cx - x).powi(2) + (s.cy - y).powi(2)).sqrt();
                    d >= s.rx.max(s.ry) + candidate.rx.max(candidate.ry) + 2.0
                });
                if clear {
                    shapes.push(candidate);
                    break;
                }
            }
        }
        // Lesion/mimic roles are assigned after placement so both kinds share
        // one geometry distribution.
        let mut roles: Vec<bool> = (0..shapes.len()).map(|i| i < lesions).collect();
        roles.shuffle(&mut prng);

        let mut srng = rng::stream(seed, "slice", &sample_id);
        let blobs = shapes
            .iter()
            .zip(roles)
            .map(|(s, lesion)| {
                let scale = srng.random_range(0.85..1.1);
                Blob {
                    shape: Ellipse {
                        cx: s.cx + srng.random_range(-1.0..1.0),
                        cy: s.cy + srng.random_range(-1.0..1.0),
                        rx: s.rx * scale,
                        ry: s.ry * scale,
                        angle: s.angle,
                    },
                    lesion,
                }
            })
            .collect();

        let odd = contrast_index % 2 == 1;
        let (background, cord_level, lesion_level, mimic_level, noise, grain) = match (mode, odd) {
            (PhantomMode::Natural, false) => (0.10, 0.40, 0.80, 0.40, 0.03, 0.04),
            (PhantomMode::Natural, true) => (0.25, 0.55, 0.85, 0.55, 0.04, 0.02),
            (PhantomMode::ContrastFlip, _) => {
                let offset = if odd { 0.1 } else { 0.0 };
                let polarity = if odd { -1.0 } else { 1.0 };
                let cord = 0.5 + offset;
                (0.15 + offset, cord, cord + 0.25 * polarity, cord - 0.25 * polarity, 0.04, 0.03)
            }
        };
        PhantomSpec {
            seed,
            phantom_id,
            sample_id,
            contrast: contrast.to_string(),
            contrast_index,
            mode,
            cord,
            blobs,
            background,
            cord_level,
            lesion_level,
            mimic_level,
            noise,
            grain,
        }
    }
}

/// Renders a 64x64 slice and its cord mask. Lesion mask = lesion blobs ∩ cord.
pub fn generate_phantom(spec: &PhantomSpec) -> (Sample, Tensor<f32>) {
    let n = NATIVE_SIZE;
    let mut rng = rng::stream(spec.seed, "texture", &spec.sample_id);
    let raw: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let mut texture = super::augment::gaussian_blur(&raw, n, n, 2.0);
    let std = (texture.iter().map(|v| v * v).sum::<f64>() / texture.len() as f64).sqrt().max(1e-12);
    texture.iter_mut().for_each(|v| *v *= spec.grain / std);

    let mut clean = vec![0.0f64; n * n];
    let mut mask = vec![0.0f32; n * n];
    let mut cord = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let i = y * n + x;
            let mut v = spec.background;
            if spec.cord.contains(fx, fy) {
                cord[i] = 1.0;
                v = spec.cord_level;
                if let Some(blob) = spec.blobs.iter().find(|b| b.shape.contains(fx, fy)) {
                    if blob.lesion {
                        v = spec.lesion_level;
                        mask[i] = 1.0;
                    } else {
                        v = spec.mimic_level;
                    }
                }
            }
            clean[i] = v;
        }
    }
    // Partial-volume blur of tissue boundaries, then texture and noise.
    let blurred = super::augment::gaussian_blur(&clean, n, n, PSF_SIGMA);
    let image: Vec<f32> = blurred
        .iter()
        .zip(&texture)
        .map(|(v, t)| (v + t + spec.noise * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0) as f32)
        .collect();
    let t = |d: Vec<f32>| Tensor::new(&[1, n, n], d).expect("square slice");
    let sample = Sample {
        id: spec.sample_id.clone(),
        phantom_id: spec.phantom_id.clone(),
        contrast: spec.contrast.clone(),
        image: t(image),
        mask: t(mask),
    };
    (sample, t(cord))
}

/// Crops a 48x48 window centred on the rounded cord-mask centroid, zero-padding
/// outside the source slice.
pub fn crop_roi(sample: &Sample, cord: &Tensor<f32>) -> Result<Sample> {
    sample.validate()?;
    if cord.shape() != sample.mask.shape() {
        return Err(Error::Validation(format!(
            "cord mask {:?} does not match sample {:?}",
            cord.shape(),
            sample.mask.shape()
        )));
    }
    let (h, w) = (sample.height(), sample.width());
    let (mut sy, mut sx, mut count) = (0.0, 0.0, 0usize);
    for (i, &v) in cord.data().iter().enumerate() {
        if v != 0.0 {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation(format!("sample {}: empty cord mask, cannot crop", sample.id)));
    }
    let cy = (sy / count as f64).round() as isize;
    let cx = (sx / count as f64).round() as isize;
    let half = (CROP_SIZE / 2) as isize;
    let (top, left) = (cy - half, cx - half);
    let window = |src: &[f32]| {
        let mut out = vec![0.0f32; CROP_SIZE * CROP_SIZE];
        for r in 0..CROP_SIZE {
            let y = top + r as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for c in 0..CROP_SIZE {
                let x = left + c as isize;
                if x >= 0 && x < w as isize {
                    out[r * CROP_SIZE + c] = src[y as usize * w + x as usize];
                }
            }
        }
        Tensor::new(&[1, CROP_SIZE, CROP_SIZE], out).expect("crop shape")
    };
    Ok(Sample {
        id: sample.id.clone(),
        phantom_id: sample.phantom_id.clone(),
        contrast: sample.contrast.clone(),
        image: window(sample.image.data()),
        mask: window(sample.mask.data()),
    })
}
