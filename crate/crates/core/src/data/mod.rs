//! Synthetic multi-contrast phantoms, ROI cropping, augmentation, simulated
//! rater disagreement, dataset splits and the on-disk dataset format.

mod augment;
mod io;
mod phantom;
mod rater;
mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::film::Vocabulary;
use crate::tensor::Tensor;

pub use augment::{augment_sample, AugmentConfig};
pub use io::{read_dataset, read_manifest, write_dataset, Manifest, ManifestEntry, MANIFEST_VERSION};
pub use phantom::{crop_roi, generate_phantom, Blob, Ellipse, PhantomSpec, CROP_SIZE, NATIVE_SIZE};
pub use rater::{dilate, erode, perturb_ground_truth, RaterPerturbConfig};
pub use split::{split_dataset, Split};

/// How lesion intensity relates to the contrast label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomMode {
    /// Lesions are brighter than the cord in every contrast.
    Natural,
    /// Lesions are bright in even-indexed contrasts and dark in odd-indexed
    /// ones, with opposite-polarity mimics, so intensity alone is ambiguous.
    ContrastFlip,
}

impl std::str::FromStr for PhantomMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(PhantomMode::Natural),
            "contrast_flip" => Ok(PhantomMode::ContrastFlip),
            other => Err(Error::Config(format!("unknown phantom mode {other:?} (natural | contrast_flip)"))),
        }
    }
}

impl std::fmt::Display for PhantomMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhantomMode::Natural => "natural",
            PhantomMode::ContrastFlip => "contrast_flip",
        })
    }
}

/// One axial slice: `[1, H, W]` image in `[0, 1]` and binary lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub phantom_id: String,
    pub contrast: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn lesion_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Checks shapes, mask binariness and image range.
    pub fn validate(&self) -> Result<()> {
        if self.image.rank() != 3 || self.image.shape()[0] != 1 || self.image.shape() != self.mask.shape() {
            return Err(Error::Validation(format!(
                "sample {}: image {:?} and mask {:?} must both be [1, H, W]",
                self.id,
                self.image.shape(),
                self.mask.shape()
            )));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!("sample {}: mask is not binary", self.id)));
        }
        if self.image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("sample {}: image has non-finite values", self.id)));
        }
        Ok(())
    }
}

/// Per-sample zero-mean, unit-variance rescaling of an image.
pub fn standardize(image: &Tensor<f32>) -> Tensor<f32> {
    let n = image.len().max(1) as f64;
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    image.map(|v| ((v as f64 - mean) * scale) as f32)
}

/// A labelled collection of samples sharing one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub mode: PhantomMode,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Distinct phantom ids in first-appearance order.
    pub fn phantom_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for s in &self.samples {
            if ids.last() != Some(&s.phantom_id) && !ids.contains(&s.phantom_id) {
                ids.push(s.phantom_id.clone());
            }
        }
        ids
    }

    /// Sample counts per vocabulary label, in vocabulary order.
    pub fn contrast_counts(&self) -> Vec<(String, usize)> {
        self.vocabulary
            .labels()
            .iter()
            .map(|l| (l.clone(), self.samples.iter().filter(|s| &s.contrast == l).count()))
            .collect()
    }

    /// The samples whose phantom belongs to `phantoms`.
    pub fn subset(&self, phantoms: &[String]) -> Vec<&Sample> {
        self.samples.iter().filter(|s| phantoms.contains(&s.phantom_id)).collect()
    }

    /// Phantom-level train/val/test partition of this dataset.
    pub fn split(&self, seed: u64) -> Result<Split> {
        split_dataset(&self.phantom_ids(), seed)
    }
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub mode: PhantomMode,
    pub phantoms: usize,
    pub slices_per_phantom: usize,
    pub seed: u64,
    pub vocabulary: Vocabulary,
    /// Restrict every phantom to one label; otherwise labels alternate.
    pub contrast: Option<String>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            mode: PhantomMode::Natural,
            phantoms: 100,
            slices_per_phantom: 4,
            seed: 0,
            vocabulary: Vocabulary::contrasts(),
            contrast: None,
        }
    }
}

/// Generates, crops and labels `phantoms x slices_per_phantom` samples.
///
/// Phantom `i` uses label `i mod |vocabulary|` unless a single contrast is
/// requested. Each sample depends only on `(seed, phantom, slice)`, so the
/// work is split across `threads` workers without changing the output.
pub fn generate_dataset(cfg: &GenerateConfig, threads: usize) -> Result<Dataset> {
    if cfg.phantoms == 0 || cfg.slices_per_phantom == 0 {
        return Err(Error::Config("dataset needs at least one phantom and one slice".into()));
    }
    if let Some(label) = &cfg.contrast {
        cfg.vocabulary.index_of(label)?;
    }
    let jobs: Vec<(usize, usize)> =
        (0..cfg.phantoms).flat_map(|p| (0..cfg.slices_per_phantom).map(move |s| (p, s))).collect();
    let samples = crate::parallel::map(&jobs, threads, |&(p, s)| {
        let label = match &cfg.contrast {
            Some(l) => l.clone(),
            None => cfg.vocabulary.labels()[p % cfg.vocabulary.len()].clone(),
        };
        let index = cfg.vocabulary.index_of(&label)?;
        let spec = PhantomSpec::draw(cfg.seed, p, s, &label, index, cfg.mode);
        let (native, cord) = generate_phantom(&spec);
        crop_roi(&native, &cord)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { vocabulary: cfg.vocabulary.clone(), mode: cfg.mode, seed: cfg.seed, samples })
}

/// Best balanced accuracy `(TPR + TNR) / 2` of a single global intensity
/// threshold (either polarity) over `(intensity, is_lesion)` pixels, ignoring
/// the contrast label.
pub fn intensity_threshold_accuracy(pixels: &[(f32, bool)]) -> f64 {
    let mut sorted: Vec<(f32, bool)> = pixels.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = sorted.iter().filter(|p| p.1).count() as f64;
    let negatives = sorted.len() as f64 - positives;
    if positives == 0.0 || negatives == 0.0 {
        return 1.0;
    }
    // Sweep "lesion iff value > t" over every cut; the reverse polarity is 1 - that.
    let (mut pos_below, mut neg_below) = (0.0, 0.0);
    let mut best: f64 = 0.5;
    let mut i = 0;
    while i <= sorted.len() {
        let tpr = (positives - pos_below) / positives;
        let tnr = neg_below / negatives;
        let acc = 0.5 * (tpr + tnr);
        best = best.max(acc).max(1.0 - acc);
        if i == sorted.len() {
            break;
        }
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                pos_below += 1.0;
            } else {
                neg_below += 1.0;
            }
            i += 1;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_accuracy_separable_and_mixed() {
        let separable: Vec<(f32, bool)> = (0..10).map(|i| (i as f32, i >= 5)).collect();
        assert_eq!(intensity_threshold_accuracy(&separable), 1.0);
        let reversed: Vec<(f32, bool)> = (0..10).map(|i| (i as f32, i < 5)).collect();
        assert_eq!(intensity_threshold_accuracy(&reversed), 1.0);
        // positives at both extremes, negatives in the middle
        let mixed = vec![(0.0, true), (1.0, false), (2.0, false), (3.0, true)];
        assert_eq!(intensity_threshold_accuracy(&mixed), 0.75);
    }

    #[test]
    fn standardize_moments() {
        let img = Tensor::new(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.6]).unwrap();
        let s = standardize(&img);
        let mean: f32 = s.data().iter().sum::<f32>() / 4.0;
        let var: f32 = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
        let flat = Tensor::new(&[1, 1, 2], vec![0.4, 0.4]).unwrap();
        assert_eq!(standardize(&flat).data(), &[0.0, 0.0]);
    }

    #[test]
    fn generated_dataset_is_balanced_and_deterministic() {
        let cfg = GenerateConfig { phantoms: 6, seed: 11, ..GenerateConfig::default() };
        let a = generate_dataset(&cfg, 1).unwrap();
        let b = generate_dataset(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 24);
        assert_eq!(a.contrast_counts(), vec![("T2w".to_string(), 12), ("T2star".to_string(), 12)]);
        assert_eq!(a.phantom_ids().len(), 6);
        for s in &a.samples {
            s.validate().unwrap();
            assert_eq!(s.image.shape(), &[1, 48, 48]);
        }
        let only = GenerateConfig { contrast: Some("T2star".into()), ..cfg.clone() };
        let c = generate_dataset(&only, 1).unwrap();
        assert!(c.samples.iter().all(|s| s.contrast == "T2star"));
        let unknown = GenerateConfig { contrast: Some("FLAIR".into()), ..cfg };
        assert!(matches!(generate_dataset(&unknown, 1), Err(Error::UnknownLabel { .. })));
    }
}
