//! Run configuration and its fingerprint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::FINGERPRINT_LEN;
use crate::data::{AugmentConfig, PhantomMode, RaterPerturbConfig};
use crate::error::{Error, Result};
use crate::film::Vocabulary;
use crate::metrics::Calibration;
use crate::unet::ModelConfig;

fn default_out() -> PathBuf {
    PathBuf::from("run")
}
fn default_depth() -> usize {
    3
}
fn default_base_channels() -> usize {
    16
}
fn default_film_hidden() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_lr0() -> f64 {
    1e-3
}
fn default_lr_min() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    8
}
fn default_augmentation() -> Option<AugmentConfig> {
    Some(AugmentConfig::default())
}
fn default_threads() -> usize {
    1
}

/// Everything needed to reproduce one training run. Only `data` and `seed`
/// are mandatory in the JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory written by `gen-data`.
    pub data: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "natural")]
    pub mode: PhantomMode,
    #[serde(default = "Vocabulary::contrasts")]
    pub vocabulary: Vocabulary,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_film_hidden")]
    pub film_hidden: usize,
    /// FiLM conditioning on the contrast label.
    #[serde(default = "default_true")]
    pub conditioning: bool,
    /// Per-sample zero-mean, unit-variance input scaling.
    #[serde(default)]
    pub standardize: bool,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// `null` disables augmentation.
    #[serde(default = "default_augmentation")]
    pub augmentation: Option<AugmentConfig>,
    #[serde(default)]
    pub rater: RaterPerturbConfig,
    /// Perturb training masks with `rater` each epoch.
    #[serde(default)]
    pub perturb_ground_truth: bool,
    /// Strength file from `calibrate-raters`; replaces `rater` when set.
    #[serde(default)]
    pub rater_calibration: Option<PathBuf>,
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn natural() -> PhantomMode {
    PhantomMode::Natural
}

/// The fields that change what a run computes. Paths and thread count are excluded.
#[derive(Serialize)]
struct FingerprintFields<'a> {
    mode: PhantomMode,
    vocabulary: &'a Vocabulary,
    model: ModelConfig,
    standardize: bool,
    lr0: f64,
    lr_min: f64,
    epochs: usize,
    batch_size: usize,
    augmentation: &'a Option<AugmentConfig>,
    rater: Option<&'a RaterPerturbConfig>,
    seed: u64,
}

impl RunConfig {
    pub fn new(data: impl Into<PathBuf>, seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "data": data.into(), "seed": seed })).expect("defaults are valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: 1,
            out_channels: 1,
            conditioning_size: if self.conditioning { self.vocabulary.len() } else { 0 },
            film_hidden: self.film_hidden,
        }
    }

    /// Checks values that do not need the file system.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return bad(format!("need 0 <= lr_min <= lr0 with lr0 > 0, got lr0={} lr_min={}", self.lr0, self.lr_min));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        self.rater.validate()
    }

    /// Replaces `rater` with the calibrated configuration, if a strength file is named.
    pub fn resolve_calibration(&self) -> Result<RunConfig> {
        let Some(path) = &self.rater_calibration else {
            return Ok(self.clone());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cal: Calibration = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        Ok(RunConfig { rater: cal.config, rater_calibration: None, ..self.clone() })
    }

    /// SHA-256 over the training-relevant fields.
    pub fn fingerprint(&self) -> [u8; FINGERPRINT_LEN] {
        let fields = FingerprintFields {
            mode: self.mode,
            vocabulary: &self.vocabulary,
            model: self.model_config(),
            standardize: self.standardize,
            lr0: self.lr0,
            lr_min: self.lr_min,
            epochs: self.epochs,
            batch_size: self.batch_size,
            augmentation: &self.augmentation,
            rater: self.perturb_ground_truth.then_some(&self.rater),
            seed: self.seed,
        };
        let json = serde_json::to_vec(&fields).expect("plain data serializes");
        Sha256::digest(json).into()
    }

    pub fn fingerprint_hex(&self) -> String {
        crate::checkpoint::hex(&self.fingerprint())
    }

    /// Annotated example printed by `--help-config`.
    pub fn help_text() -> String {
        let example = RunConfig::new("data/natural", 0);
        let json = serde_json::to_string_pretty(&example).expect("serializes");
        format!(
            "Run configuration (JSON). Required: \"data\", \"seed\". Defaults shown below.\n\n{json}\n\n\
             data                 dataset directory written by gen-data\n\
             out                  output directory (overridden by --out)\n\
             mode                 natural | contrast_flip; must match the dataset manifest\n\
             vocabulary           ordered contrast labels; must match the dataset manifest\n\
             depth                U-Net pooling levels (2..=4)\n\
             base_channels        channels at the top level, doubled per level\n\
             film_hidden          hidden width of each FiLM generator\n\
             conditioning         true: FiLM on the contrast label; false: plain U-Net\n\
             standardize          per-sample zero-mean, unit-variance input scaling\n\
             lr0, lr_min          cosine learning-rate schedule endpoints\n\
             epochs, batch_size   training length and mini-batch size\n\
             augmentation         random affine + elastic settings, or null\n\
             rater                ground-truth perturbation settings\n\
             perturb_ground_truth apply rater perturbation to training masks\n\
             rater_calibration    strength file from calibrate-raters (overrides rater)\n\
             seed                 global seed for init, shuffling, augmentation and splits\n\
             threads              worker threads for data preparation (results do not depend on it)\n"
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_required_fields() {
        let cfg: RunConfig = serde_json::from_str(r#"{"data": "d", "seed": 4}"#).unwrap();
        assert_eq!((cfg.batch_size, cfg.epochs, cfg.base_channels, cfg.film_hidden), (8, 30, 16, 64));
        assert_eq!(cfg.model_config().conditioning_size, 2);
        assert!(serde_json::from_str::<RunConfig>(r#"{"data": "d"}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"data": "d", "seed": 1, "colour": 3}"#).is_err());
        cfg.validate().unwrap();
    }

    #[test]
    fn fingerprint_ignores_paths_and_threads() {
        let a = RunConfig::new("d", 1);
        let b = RunConfig { data: "elsewhere".into(), out: "o".into(), threads: 4, ..a.clone() };
        assert_eq!(a.fingerprint(), b.fingerprint());
        for changed in [
            RunConfig { seed: 2, ..a.clone() },
            RunConfig { lr0: 5e-4, ..a.clone() },
            RunConfig { depth: 2, ..a.clone() },
            RunConfig { conditioning: false, ..a.clone() },
            RunConfig { standardize: true, ..a.clone() },
            RunConfig { augmentation: None, ..a.clone() },
            RunConfig { mode: PhantomMode::ContrastFlip, ..a.clone() },
        ] {
            assert_ne!(a.fingerprint(), changed.fingerprint());
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let a = RunConfig::new("d", 1);
        assert!(matches!(RunConfig { depth: 7, ..a.clone() }.validate(), Err(Error::Config(_))));
        assert!(matches!(RunConfig { lr_min: 1.0, ..a.clone() }.validate(), Err(Error::Config(_))));
        assert!(matches!(RunConfig { batch_size: 0, ..a }.validate(), Err(Error::Config(_))));
    }
}
