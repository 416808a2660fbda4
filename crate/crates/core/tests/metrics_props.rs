use filmseg::data::{generate_dataset, GenerateConfig, RaterPerturbConfig, Sample};
use filmseg::film::Vocabulary;
use filmseg::metrics::{calibrate_rater_strength, estimate_interrater_dice, evaluate_model, Predictor};
use filmseg::{Error, Result, Tensor};
use proptest::prelude::*;

/// Returns the input image as the probability map.
struct Passthrough(Vocabulary);

impl Predictor for Passthrough {
    fn vocabulary(&self) -> &Vocabulary {
        &self.0
    }

    fn predict(&self, images: &Tensor<f32>, _: &[&str]) -> Result<Tensor<f32>> {
        Ok(images.clone())
    }
}

struct Zero(Vocabulary);

impl Predictor for Zero {
    fn vocabulary(&self) -> &Vocabulary {
        &self.0
    }

    fn predict(&self, images: &Tensor<f32>, _: &[&str]) -> Result<Tensor<f32>> {
        Ok(Tensor::zeros(images.shape()))
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::contrasts()
}

/// Samples whose image is their own mask, so a passthrough predictor is an oracle.
fn mask_images(t2w: usize, t2star: usize) -> Vec<Sample> {
    (0..t2w + t2star)
        .map(|i| {
            let data: Vec<f32> = (0..64).map(|p| ((p * 7 + i * 3) % 5 == 0) as u8 as f32).collect();
            let mask = Tensor::new(&[1, 8, 8], data).unwrap();
            Sample {
                id: format!("s{i:03}"),
                phantom_id: format!("p{i:03}"),
                contrast: if i < t2w { "T2w".into() } else { "T2star".into() },
                image: mask.clone(),
                mask,
            }
        })
        .collect()
}

#[test]
fn oracle_predictor_scores_one_everywhere() {
    let samples = mask_images(5, 5);
    let refs: Vec<&Sample> = samples.iter().collect();
    let report = evaluate_model(&Passthrough(vocab()), &vocab(), &refs, 0.5, "fp", 0).unwrap();
    assert!(report.samples.iter().all(|s| s.dice == 1.0));
    assert_eq!(report.overall, 1.0);
}

#[test]
fn zero_predictor_scores_zero_on_non_empty_masks() {
    let samples = mask_images(4, 3);
    assert!(samples.iter().all(|s| s.lesion_pixels() > 0));
    let refs: Vec<&Sample> = samples.iter().collect();
    let report = evaluate_model(&Zero(vocab()), &vocab(), &refs, 0.5, "fp", 0).unwrap();
    assert_eq!(report.overall, 0.0);
}

#[test]
fn report_counts_follow_contrasts() {
    let samples = mask_images(10, 6);
    let refs: Vec<&Sample> = samples.iter().collect();
    let report = evaluate_model(&Zero(vocab()), &vocab(), &refs, 0.5, "fp", 0).unwrap();
    assert_eq!(report.count("T2w"), Some(10));
    assert_eq!(report.count("T2star"), Some(6));
    assert_eq!(report.per_contrast.iter().map(|c| c.count).sum::<usize>(), 16);
}

#[test]
fn evaluation_rejects_vocabulary_mismatch() {
    let samples = mask_images(1, 1);
    let refs: Vec<&Sample> = samples.iter().collect();
    let other = Vocabulary::new(["T2w", "FLAIR"]).unwrap();
    assert!(matches!(
        evaluate_model(&Zero(other), &vocab(), &refs, 0.5, "fp", 0),
        Err(Error::VocabularyMismatch { .. })
    ));
}

fn natural_samples() -> Vec<Sample> {
    let cfg = GenerateConfig { phantoms: 12, slices_per_phantom: 3, seed: 4, ..GenerateConfig::default() };
    generate_dataset(&cfg, 1).unwrap().samples
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn evaluation_is_permutation_invariant(order in Just((0..36).collect::<Vec<usize>>()).prop_shuffle()) {
        let samples = natural_samples();
        let forward: Vec<&Sample> = samples.iter().collect();
        let shuffled: Vec<&Sample> = order.iter().map(|&i| &samples[i]).collect();
        let a = evaluate_model(&Passthrough(vocab()), &vocab(), &forward, 0.5, "fp", 1).unwrap();
        let b = evaluate_model(&Passthrough(vocab()), &vocab(), &shuffled, 0.5, "fp", 1).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn default_masks(non_empty_only: bool) -> Vec<Tensor<f32>> {
    generate_dataset(&GenerateConfig::default(), 1)
        .unwrap()
        .samples
        .into_iter()
        .filter(|s| !non_empty_only || s.lesion_pixels() > 0)
        .map(|s| s.mask)
        .collect()
}

#[test]
fn interrater_estimate_is_deterministic_and_seed_dependent() {
    let masks: Vec<Tensor<f32>> = default_masks(true).into_iter().take(40).collect();
    let cfg = RaterPerturbConfig::default().with_strength(0.5);
    let a = estimate_interrater_dice(&masks, &cfg, 6, 3, 1).unwrap();
    let b = estimate_interrater_dice(&masks, &cfg, 6, 3, 2).unwrap();
    let c = estimate_interrater_dice(&masks, &cfg, 6, 4, 1).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.mean, c.mean);
    let zero = estimate_interrater_dice(&masks, &RaterPerturbConfig::default(), 4, 3, 1).unwrap();
    assert_eq!(zero.mean, 1.0);
}

#[test]
fn full_strength_on_default_masks_is_below_point_nine() {
    let masks = default_masks(false);
    assert_eq!(masks.len(), 400);
    let est = estimate_interrater_dice(&masks, &RaterPerturbConfig::default().with_strength(1.0), 10, 0, 1).unwrap();
    assert!(est.mean < 0.9, "{est:?}");
}

#[test]
fn doubling_draws_shrinks_standard_error_by_root_two() {
    let masks = default_masks(true);
    let cfg = RaterPerturbConfig::default().with_strength(0.5);
    let small = estimate_interrater_dice(&masks, &cfg, 10, 0, 1).unwrap();
    let large = estimate_interrater_dice(&masks, &cfg, 20, 0, 1).unwrap();
    let ratio = small.std_error / large.std_error;
    let expected = 2f64.sqrt();
    assert!((ratio - expected).abs() <= 0.3 * expected, "ratio {ratio}");
}

#[test]
fn calibration_endpoints() {
    let masks: Vec<Tensor<f32>> = default_masks(true).into_iter().take(30).collect();
    let cal = calibrate_rater_strength(1.0, &masks, &RaterPerturbConfig::default(), 4, 0.01, 0, 1).unwrap();
    assert_eq!(cal.strength, 0.0);
    assert_eq!(cal.estimate.mean, 1.0);

    let frozen = RaterPerturbConfig { max_radius: 0, max_translation_px: 0.0, max_rotation_deg: 0.0, ..RaterPerturbConfig::default() };
    assert!(matches!(
        calibrate_rater_strength(0.99, &masks, &frozen, 4, 0.001, 0, 1),
        Err(Error::Calibration(_))
    ));
}
