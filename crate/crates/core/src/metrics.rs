//! Evaluation reports and simulated inter-rater agreement.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{perturb_ground_truth, RaterPerturbConfig, Sample};
use crate::error::{Error, Result};
use crate::film::Vocabulary;
use crate::optim::{binarize, dice_score};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Anything that maps a batch of images plus contrast labels to
/// per-pixel lesion probabilities of the same shape.
pub trait Predictor: Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// `images` is `[N, 1, H, W]`; returns probabilities `[N, 1, H, W]`.
    fn predict(&self, images: &Tensor<f32>, contrasts: &[&str]) -> Result<Tensor<f32>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastSummary {
    pub contrast: String,
    pub count: usize,
    /// `None` when the contrast has no samples.
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDice {
    pub id: String,
    pub contrast: String,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_contrast: Vec<ContrastSummary>,
    pub samples: Vec<SampleDice>,
    pub overall: f64,
    pub threshold: f64,
    pub fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    /// Aggregates per-sample scores by vocabulary label. Samples are sorted by
    /// id first so the sums do not depend on evaluation order.
    pub fn from_scores(
        vocabulary: &Vocabulary,
        mut samples: Vec<SampleDice>,
        threshold: f64,
        fingerprint: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("cannot summarize an empty evaluation".into()));
        }
        for s in &samples {
            vocabulary.index_of(&s.contrast)?;
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let per_contrast = vocabulary
            .labels()
            .iter()
            .map(|label| {
                let scores: Vec<f64> = samples.iter().filter(|s| &s.contrast == label).map(|s| s.dice).collect();
                let (mean, std) = moments(&scores).map_or((None, None), |(m, s)| (Some(m), Some(s)));
                ContrastSummary { contrast: label.clone(), count: scores.len(), mean, std }
            })
            .collect();
        let overall = samples.iter().map(|s| s.dice).sum::<f64>() / samples.len() as f64;
        Ok(EvalReport { per_contrast, samples, overall, threshold, fingerprint: fingerprint.into(), seed })
    }

    pub fn count(&self, contrast: &str) -> Option<usize> {
        self.per_contrast.iter().find(|c| c.contrast == contrast).map(|c| c.count)
    }

    pub fn mean(&self, contrast: &str) -> Option<f64> {
        self.per_contrast.iter().find(|c| c.contrast == contrast).and_then(|c| c.mean)
    }

    /// Writes `<stem>.json` and `<stem>.csv` (id, contrast, dice) into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json { path: json_path.clone(), source: e })?;
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut csv = String::from("id,contrast,dice\n");
        for s in &self.samples {
            csv.push_str(&format!("{},{},{}\n", s.id, s.contrast, s.dice));
        }
        fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
    }
}

fn moments(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Median of `xs` (mean of the two middle values for even lengths).
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// Batched inference, binarization at `threshold` and per-sample Dice.
pub fn evaluate_model(
    predictor: &dyn Predictor,
    vocabulary: &Vocabulary,
    samples: &[&Sample],
    threshold: f64,
    fingerprint: &str,
    seed: u64,
) -> Result<EvalReport> {
    predictor.vocabulary().ensure_matches(vocabulary)?;
    if samples.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let batch = Tensor::stack(&images)?;
        let contrasts: Vec<&str> = chunk.iter().map(|s| s.contrast.as_str()).collect();
        let probs = predictor.predict(&batch, &contrasts)?;
        if probs.shape() != batch.shape() {
            return Err(Error::Validation(format!(
                "predictor returned {:?} for a batch of {:?}",
                probs.shape(),
                batch.shape()
            )));
        }
        let per = probs.len() / chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            let p = Tensor::new(s.mask.shape(), probs.data()[i * per..(i + 1) * per].to_vec())?;
            scores.push(SampleDice {
                id: s.id.clone(),
                contrast: s.contrast.clone(),
                dice: dice_score(&binarize(&p, threshold), &s.mask)?,
            });
        }
    }
    EvalReport::from_scores(vocabulary, scores, threshold, fingerprint, seed)
}

/// Mean pairwise inter-rater Dice with its Monte-Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterraterEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub masks: usize,
    pub draws: usize,
}

/// Mean over raters pairs of one mask plus its jackknife variance over raters.
fn pairwise_agreement(raters: &[Tensor<f32>]) -> Result<(f64, f64)> {
    let d = raters.len();
    let mut dice = vec![0.0; d * d];
    for i in 0..d {
        for j in i + 1..d {
            let v = dice_score(&raters[i], &raters[j])?;
            dice[i * d + j] = v;
            dice[j * d + i] = v;
        }
    }
    let pairs = (d * (d - 1) / 2) as f64;
    let total: f64 = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).map(|(i, j)| dice[i * d + j]).sum();
    let mean = total / pairs;
    if d < 3 {
        return Ok((mean, 0.0));
    }
    // Leave-one-rater-out estimates.
    let loo_pairs = ((d - 1) * (d - 2) / 2) as f64;
    let loo: Vec<f64> = (0..d).map(|k| (total - (0..d).map(|j| dice[k * d + j]).sum::<f64>()) / loo_pairs).collect();
    let loo_mean = loo.iter().sum::<f64>() / d as f64;
    let var = (d - 1) as f64 / d as f64 * loo.iter().map(|x| (x - loo_mean).powi(2)).sum::<f64>();
    Ok((mean, var))
}

/// Draws `draws` independent perturbations of every mask and averages the
/// Dice over all unordered rater pairs, then over masks.
///
/// The standard error covers rater randomness for this fixed mask set.
pub fn estimate_interrater_dice(
    masks: &[Tensor<f32>],
    cfg: &RaterPerturbConfig,
    draws: usize,
    seed: u64,
    threads: usize,
) -> Result<InterraterEstimate> {
    if masks.is_empty() {
        return Err(Error::Usage("no masks to estimate inter-rater agreement on".into()));
    }
    if draws < 2 {
        return Err(Error::Usage(format!("need at least 2 raters per mask, got {draws}")));
    }
    cfg.validate()?;
    let indexed: Vec<(usize, &Tensor<f32>)> = masks.iter().enumerate().collect();
    let per_mask = crate::parallel::map(&indexed, threads, |&(m, mask)| -> Result<(f64, f64)> {
        let raters = (0..draws)
            .map(|r| perturb_ground_truth(mask, derive_seed(seed, "rater", &format!("{m}/{r}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        pairwise_agreement(&raters)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = masks.len() as f64;
    let mean = per_mask.iter().map(|p| p.0).sum::<f64>() / n;
    let std_error = per_mask.iter().map(|p| p.1).sum::<f64>().sqrt() / n;
    Ok(InterraterEstimate { mean, std_error, masks: masks.len(), draws })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target: f64,
    pub strength: f64,
    pub estimate: InterraterEstimate,
    pub iterations: usize,
    pub config: RaterPerturbConfig,
}

pub const CALIBRATION_MAX_ITERATIONS: usize = 20;

/// Bisects the perturbation strength until the inter-rater estimate is
/// within `tol` of `target` or the iteration budget is spent.
pub fn calibrate_rater_strength(
    target: f64,
    masks: &[Tensor<f32>],
    template: &RaterPerturbConfig,
    draws: usize,
    tol: f64,
    seed: u64,
    threads: usize,
) -> Result<Calibration> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Config(format!("target inter-rater Dice {target} outside (0, 1]")));
    }
    let estimate = |s: f64| estimate_interrater_dice(masks, &template.with_strength(s), draws, seed, threads);
    let done = |s: f64, est: InterraterEstimate, iterations| Calibration {
        target,
        strength: s,
        estimate: est,
        iterations,
        config: template.with_strength(s),
    };
    let at_zero = estimate(0.0)?;
    if (at_zero.mean - target).abs() <= tol || target >= at_zero.mean {
        return Ok(done(0.0, at_zero, 0));
    }
    let at_one = estimate(1.0)?;
    if at_one.mean > target {
        return Err(Error::Calibration(format!(
            "full strength only lowers inter-rater Dice to {:.4}, above target {target}; increase max_radius (now {})",
            at_one.mean, template.max_radius
        )));
    }
    if (at_one.mean - target).abs() <= tol {
        return Ok(done(1.0, at_one, 0));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = (1.0, at_one);
    for it in 1..=CALIBRATION_MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let est = estimate(mid)?;
        if (est.mean - target).abs() < (best.1.mean - target).abs() {
            best = (mid, est);
        }
        if (est.mean - target).abs() <= tol {
            return Ok(done(mid, est, it));
        }
        if est.mean > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(done(best.0, best.1, CALIBRATION_MAX_ITERATIONS))
}
